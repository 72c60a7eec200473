from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from prefmatch.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from prefmatch.scenarios import SCENARIOS, substream, validate_config

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

SMALL = {
    "bias_curve": {"scenario": "bias_curve", "seed": 1, "beta_grid": [0.5, 1.0], "p_ref_grid": [0.2, 0.5]},
    "collapse": {"scenario": "collapse", "seed": 1, "collapse": {"vocab_size": 3, "lengths": [2, 3], "pairs": 500, "repeats": 2}},
    "align_compare": {
        "scenario": "align_compare",
        "seed": 1,
        "model": {"kind": "sequence", "vocab_size": 2, "max_length": 3, "num_prompts": 2},
        "regularizers": [{"tag": "kl"}, {"tag": "conditional_pm", "epsilon": 0.1}],
        "beta_grid": [0.5, 1.0],
        "alpha_grid": [0.0, 0.1],
    },
    "ode_check": {"scenario": "ode_check", "seed": 1, "ode": {"pi_grid": [0.1, 0.5, 0.9]}},
    "duality_check": {"scenario": "duality_check", "seed": 1, "duality": {"rows": 5, "k_max": 6}},
    "reward_fit": {
        "scenario": "reward_fit",
        "seed": 1,
        "model": {"kind": "random_tabular", "num_prompts": 2, "responses": 3},
        "reward_fit": {"samples": [200], "repeats": 2},
    },
    "pm_property": {
        "scenario": "pm_property",
        "seed": 1,
        "model": {"kind": "tabular", "rewards": [[0.0, 0.0]], "reference": [[0.9, 0.1]]},
        "regularizers": [{"tag": "pm"}, {"tag": "kl"}],
    },
}


def write(tmp_path, config, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


def outputs(out_dir: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out_dir.iterdir()) if p.suffix in (".csv", ".json") and p.name != "manifest.json"}


def test_small_configs_cover_every_scenario():
    assert set(SMALL) == set(SCENARIOS)


class TestValidate:
    def test_empty_beta_grid_names_field(self, tmp_path, capsys):
        cfg = {"scenario": "bias_curve", "seed": 0, "beta_grid": [], "p_ref_grid": [0.5]}
        assert main(["validate", "--config", write(tmp_path, cfg)]) == EXIT_CONFIG
        out = capsys.readouterr().out
        assert "beta_grid" in out

    def test_unknown_tag_lists_allowed(self, tmp_path, capsys):
        cfg = dict(SMALL["pm_property"], regularizers=[{"tag": "bogus"}])
        assert main(["validate", "--config", write(tmp_path, cfg)]) == EXIT_CONFIG
        out = capsys.readouterr().out
        assert "regularizers.0.tag" in out
        for tag in ("pm", "kl", "fdiv", "conditional_pm"):
            assert tag in out

    def test_reports_all_errors(self):
        cfg = {"scenario": "bias_curve", "seed": -1, "beta_grid": [], "p_ref_grid": [2.0]}
        paths = {p for p, _ in validate_config(cfg)}
        assert {"seed", "beta_grid", "p_ref_grid.0"} <= paths

    def test_bad_reference_row(self):
        cfg = dict(SMALL["pm_property"], model={"kind": "tabular", "rewards": [[0.0, 1.0]], "reference": [[0.5, 0.6]]})
        assert [p for p, _ in validate_config(cfg)] == ["model.reference.0"]

    def test_missing_model_file(self, tmp_path):
        cfg = dict(SMALL["pm_property"], model={"kind": "tabular", "file": "nope.json"})
        assert [p for p, _ in validate_config(cfg, config_dir=tmp_path)] == ["model.file"]

    def test_align_needs_sequence_model(self):
        cfg = dict(SMALL["align_compare"], model={"kind": "random_tabular", "num_prompts": 1, "responses": 3})
        assert validate_config(cfg)

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_sample_configs_clean(self, path):
        assert main(["validate", "--config", str(path)]) == EXIT_OK

    def test_unreadable_file(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["validate", "--config", str(path)]) == EXIT_CONFIG


class TestRun:
    @pytest.mark.parametrize("name", sorted(SMALL))
    def test_rerun_byte_identical(self, tmp_path, name):
        cfg = write(tmp_path, SMALL[name])
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
        a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
        assert a and a == b

    @pytest.mark.parametrize("name", sorted(SMALL))
    def test_manifest_checksums(self, tmp_path, name):
        out = tmp_path / "o"
        assert main(["run", "--config", write(tmp_path, SMALL[name]), "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["scenario"] == name and manifest["seed"] == 1
        assert set(manifest["outputs"]) == set(outputs(out))
        for fname, digest in manifest["outputs"].items():
            assert hashlib.sha256((out / fname).read_bytes()).hexdigest() == digest

    def test_seed_override(self, tmp_path):
        cfg = write(tmp_path, SMALL["duality_check"])
        main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
        main(["run", "--config", write(tmp_path, dict(SMALL["duality_check"], seed=7), "c.json"), "--out", str(tmp_path / "c")])
        a, b, c = (outputs(tmp_path / d) for d in "abc")
        assert a != b and b == c
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 7

    @pytest.mark.parametrize("name", ["collapse", "align_compare", "reward_fit"])
    def test_parallel_matches_serial(self, tmp_path, name):
        cfg = write(tmp_path, SMALL[name])
        main(["run", "--config", cfg, "--out", str(tmp_path / "s")])
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "p"), "--jobs", "2"]) == EXIT_OK
        assert outputs(tmp_path / "s") == outputs(tmp_path / "p")

    def test_svg(self, tmp_path):
        out = tmp_path / "o"
        pytest.importorskip("matplotlib")
        assert main(["run", "--config", write(tmp_path, SMALL["collapse"]), "--out", str(out), "--svg"]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["charts"] == ["collapse_hist_L2.svg", "collapse_hist_L3.svg"]
        assert (out / "collapse_hist_L2.svg").read_text().lstrip().startswith("<?xml")

    def test_output_dir_from_config(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write(tmp_path, dict(SMALL["ode_check"], output_dir="from_cfg"))
        assert main(["run", "--config", cfg]) == EXIT_OK
        assert (tmp_path / "from_cfg" / "ode_summary.json").is_file()

    def test_no_output_dir(self, tmp_path):
        assert main(["run", "--config", write(tmp_path, SMALL["ode_check"])]) == EXIT_CONFIG

    def test_invalid_config_exit_code(self, tmp_path):
        cfg = dict(SMALL["bias_curve"], beta_grid=[])
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert not (tmp_path / "o").exists()

    def test_runtime_failure_exit_code(self, tmp_path, capsys):
        # alpha = 1 leaves the regular set empty, which the tabular regularizer rejects
        cfg = dict(SMALL["pm_property"], regularizers=[{"tag": "conditional_pm", "alpha": 1.0}])
        assert main(["run", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
        assert "pm_property" in capsys.readouterr().err
        assert not (tmp_path / "o" / "manifest.json").exists()

    def test_sample_outputs_well_formed(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", str(CONFIG_DIR / "ode_check.json"), "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "ode_summary.json").read_text())
        assert summary["pm_max_abs_residual"] <= 1e-8
        assert min(summary["non_pm_max_abs_residual"].values()) >= 0.1


def test_substreams_distinct_and_stable():
    a = substream(0, "model").generate_state(2)
    assert (a == substream(0, "model").generate_state(2)).all()
    assert not (a == substream(0, "rewards").generate_state(2)).all()
    assert not (a == substream(1, "model").generate_state(2)).all()
