"""Scenario configuration, execution and artifact writing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import time
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.special import expit

from .closed_form import bias_curve
from .exceptions import ConfigError
from .metrics import (
    MetricsReport,
    aggregate_pm_divergence,
    entropy,
    expected_length,
    kl_to_reference,
    tabular_perplexity,
)
from .optimizer import OptimizerConfig, optimize, pm_property_test
from .preference import RewardTable, TabularPolicy
from .regularizers import (
    F_DIVERGENCES,
    NON_PM_REGULARIZERS,
    ConditionalPMRegularizer,
    ConstantEpsilon,
    FDivRegularizer,
    KLRegularizer,
    NoRegularizer,
    PMRegularizer,
    RefCalibratedEpsilon,
    RegularSet,
    UniformPenalty,
    fenchel_duality_check,
    pm_family_member,
    pm_ode_residual,
)
from .reward import fit_reward_mle, fit_reward_population, generate_comparisons, pairwise_probabilities
from .sequence import (
    AutoregressivePolicy,
    Vocabulary,
    collapse_histogram,
    flatten_all,
)

__version__ = "0.1.0"

SCHEMA_NAME = "scenario.schema.json"
MANIFEST_NAME = "manifest.json"


def load_schema() -> dict:
    return json.loads(resources.files("prefmatch").joinpath("data", SCHEMA_NAME).read_text(encoding="utf-8"))


def _path_str(path) -> str:
    return ".".join(str(p) for p in path)


def validate_config(config, *, config_dir: Path | None = None) -> list[tuple[str, str]]:
    """All schema and consistency errors as ``(field_path, message)`` pairs."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = [(_path_str(e.absolute_path), e.message) for e in validator.iter_errors(config)]
    if errors or not isinstance(config, dict):
        return sorted(errors)
    model = config.get("model")
    if model and model.get("kind") == "tabular":
        if "file" in model:
            base = config_dir or Path(".")
            if not (base / model["file"]).is_file():
                errors.append(("model.file", f"file not found: {model['file']}"))
        elif "rewards" not in model:
            errors.append(("model", "tabular model needs 'rewards' or 'file'"))
        else:
            errors.extend(_check_tabular(model))
    return sorted(errors)


def _check_tabular(model) -> list[tuple[str, str]]:
    errors = []
    rewards = model.get("rewards", [])
    ref = model.get("reference")
    if ref is not None:
        if [len(r) for r in ref] != [len(r) for r in rewards]:
            errors.append(("model.reference", "reference rows must match reward rows in length"))
        for x, row in enumerate(ref):
            if any(v < 0 for v in row) or abs(sum(row) - 1.0) > 1e-9:
                errors.append((f"model.reference.{x}", "reference row must be nonnegative and sum to 1"))
    return errors


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([("", f"cannot read {path}: {exc.strerror or exc}")]) from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from exc
    return config, path.parent


# --------------------------------------------------------------------------
# Seeding
# --------------------------------------------------------------------------


def _name_key(name) -> int:
    return int.from_bytes(hashlib.sha256(str(name).encode("utf-8")).digest()[:4], "little")


def substream(seed: int, *names) -> np.random.SeedSequence:
    """Independent seed stream addressed by names, stable under adding new names."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *names))


# --------------------------------------------------------------------------
# Model and regularizer construction
# --------------------------------------------------------------------------


@dataclass
class Model:
    rewards: RewardTable
    reference: TabularPolicy
    vocab: Vocabulary | None = None
    order: int | None = None


def build_model(spec: dict, seed: int, config_dir: Path | None = None) -> Model:
    kind = spec["kind"]
    if kind == "tabular":
        if "file" in spec:
            spec = {**json.loads(((config_dir or Path(".")) / spec["file"]).read_text(encoding="utf-8")), "kind": "tabular"}
        rewards = RewardTable(spec["rewards"])
        ref = spec.get("reference")
        reference = TabularPolicy(ref, atol=1e-9) if ref is not None else TabularPolicy.uniform(rewards.responses_per_prompt)
        return Model(rewards, reference)
    if kind == "random_tabular":
        rng = rng_for(seed, "model")
        X, k = spec["num_prompts"], spec["responses"]
        span = spec.get("reward_range", 3.0)
        rewards = RewardTable(rng.uniform(-span, span, size=(X, k)))
        reference = TabularPolicy(rng.dirichlet(np.ones(k), size=X), atol=1e-9)
        return Model(rewards, reference)
    vocab = Vocabulary(spec["vocab_size"], spec["max_length"])
    order = spec.get("markov_order", 1)
    X = spec.get("num_prompts", 1)
    conc = spec.get("reference_concentration", 1.0)
    rng = rng_for(seed, "model", "reference")
    if conc is None:
        ref_policy = AutoregressivePolicy.uniform(vocab, X, order)
    else:
        ref_policy = AutoregressivePolicy.random(vocab, rng, X, order, conc)
    reference = flatten_all(ref_policy)
    reference = TabularPolicy([row / row.sum() for row in reference.rows])
    scale = spec.get("reward_scale", 1.0)
    rewards = RewardTable(rng_for(seed, "model", "rewards").normal(0.0, scale, size=(X, vocab.num_responses)))
    return Model(rewards, reference, vocab, order)


def regularizer_label(reg: dict) -> str:
    tag = reg["tag"]
    if tag == "fdiv":
        return f"fdiv:{reg.get('f', 'kl')}"
    if tag == "conditional_pm":
        return f"conditional_pm:{reg.get('epsilon', 'ref')}"
    return tag


def build_regularizer(reg: dict, model: Model, *, beta: float | None = None, alpha: float | None = None):
    tag = reg["tag"]
    beta = reg.get("beta", 1.0) if beta is None else beta
    if tag == "none":
        return NoRegularizer()
    if tag == "pm":
        return PMRegularizer(reg.get("c1", 0.0), reg.get("c2", 0.0))
    if tag == "kl":
        return KLRegularizer(model.reference, beta)
    if tag == "fdiv":
        return FDivRegularizer(F_DIVERGENCES[reg.get("f", "kl")], model.reference, beta)
    if tag == "uniform_penalty":
        return UniformPenalty()
    alpha = reg.get("alpha", 0.0) if alpha is None else alpha
    eps = reg.get("epsilon", "ref")
    rule = RefCalibratedEpsilon(model.reference) if eps == "ref" else ConstantEpsilon(float(eps))
    return ConditionalPMRegularizer(
        RegularSet.from_threshold(model.reference, alpha), rule, reg.get("c1", 0.0), reg.get("c2", 0.0)
    )


def optimizer_config(config: dict) -> OptimizerConfig:
    return OptimizerConfig(**config.get("optimizer", {}), record_every=1_000_000)


# --------------------------------------------------------------------------
# Cells: independent units of work, run serially or in a process pool
# --------------------------------------------------------------------------


def _call(job):
    fn, kwargs = job
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = fn(**kwargs)
    return value, Counter(w.category.__name__ for w in caught)


def _map(jobs, n_workers: int):
    if n_workers <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_call, jobs))


def _bias_cell(beta, p_ref_grid, p_reward_grid):
    rows = []
    for p_ref in p_ref_grid:
        rows.extend(asdict(pt) for pt in bias_curve(beta, p_ref, p_reward_grid))
    return rows


def _collapse_cell(vocab_size, length, repeat, pairs, concentration, seed):
    vocab = Vocabulary(vocab_size, length)
    if concentration is None:
        ref = AutoregressivePolicy.uniform(vocab, 1, order=1)
    else:
        ref = AutoregressivePolicy.random(vocab, rng_for(seed, "collapse", length, repeat, "reference"), 1, 1, concentration)
    rewards = rng_for(seed, "collapse", length, repeat, "rewards").normal(size=vocab.num_responses)
    hist = collapse_histogram(ref, rewards, pairs, substream(seed, "collapse", length, repeat, "pairs"))
    return {
        "summary": {
            "length": length,
            "repeat": repeat,
            "extreme_mass": hist.extreme_mass,
            "middle_mass": hist.middle_mass,
            "gap": hist.extremity_gap,
        },
        "hist": list(zip(hist.edges[:-1].tolist(), hist.edges[1:].tolist(), hist.count_ref.tolist(), hist.count_reward.tolist())),
    }


def _align_cell(model: Model, reg: dict, beta: float, alpha, opt: OptimizerConfig, pairs, exact, seed):
    scaled = model.rewards.scaled(1.0 / beta)
    spec = build_regularizer(reg, model, beta=1.0, alpha=alpha)
    result = optimize(scaled, spec, opt)
    policy = result.policy.to_tabular()
    n_pairs = sum(k * (k - 1) for k in policy.responses_per_prompt)
    use_exact = exact and n_pairs <= 10_000
    div = aggregate_pm_divergence(
        policy, model.rewards, beta, n=pairs, seed=substream(seed, "metrics", regularizer_label(reg), beta, alpha), exact=use_exact
    )
    report = MetricsReport(
        pm_divergence=div.mean,
        length=expected_length(policy, model.vocab),
        perplexity=tabular_perplexity(policy, model.vocab),
        entropy=entropy(policy),
        kl=kl_to_reference(policy, model.reference),
        n_sentinel=div.n_sentinel,
    )
    return {
        "regularizer": regularizer_label(reg),
        "alpha": "" if alpha is None else alpha,
        "beta": beta,
        **report.to_dict(),
        "converged": bool(result.all_converged),
    }


def _duality_cell(index, k_max, seed):
    rng = rng_for(seed, "duality", index)
    k = int(rng.integers(2, k_max + 1))
    row = rng.dirichlet(np.ones(k))
    res = fenchel_duality_check(row)
    return {"row": index, "k": k, "gap": res.gap, "maximum": res.maximum, "neg_entropy": res.neg_entropy, "converged": res.converged}


def _reward_cell(rewards: RewardTable, n, repeat, seed):
    data = generate_comparisons(rewards, None, n, substream(seed, "reward_fit", n, repeat))
    fitted, info = fit_reward_mle(data, return_info=True)
    err = max(
        float(np.max(np.abs(expit(f[:, None] - f[None, :]) - expit(r[:, None] - r[None, :]))))
        for f, r in zip(fitted.rows, rewards.rows)
    )
    return {"n": n, "repeat": repeat, "max_prob_error": err, "converged": info.converged}


def _pm_property_cell(model: Model, reg: dict, opt: OptimizerConfig):
    res = pm_property_test(model.rewards, build_regularizer(reg, model), opt)
    return {
        "regularizer": regularizer_label(reg),
        "passed": res.passed,
        "max_tv": float(np.max(res.tv)),
        "converged": bool(res.result.all_converged),
    }


# --------------------------------------------------------------------------
# Output collection
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Outputs:
    """Collects artifacts in memory; ``flush`` writes them once, in name order."""

    def __init__(self):
        self.files: dict[str, bytes] = {}
        self.charts: list[tuple[str, str, dict]] = []

    def csv(self, name: str, columns, rows) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
        self.files[name] = buf.getvalue().encode("utf-8")

    def json(self, name: str, obj) -> None:
        self.files[name] = (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")

    def chart(self, name: str, kind: str, data: dict) -> None:
        self.charts.append((name, kind, data))

    def flush(self, out_dir: Path) -> dict[str, str]:
        out_dir.mkdir(parents=True, exist_ok=True)
        sums = {}
        for name in sorted(self.files):
            _atomic_write(out_dir / name, self.files[name])
            sums[name] = hashlib.sha256(self.files[name]).hexdigest()
        return sums


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Scenarios
# --------------------------------------------------------------------------


def _scenario_bias_curve(config, seed, out: Outputs, jobs, config_dir):
    p_reward = config.get("p_reward_grid") or np.linspace(0.0, 1.0, 101).tolist()
    cells = [(_bias_cell, {"beta": b, "p_ref_grid": config["p_ref_grid"], "p_reward_grid": p_reward}) for b in config["beta_grid"]]
    results = _map(cells, jobs)
    rows = [r for value, _ in results for r in value]
    out.csv("bias_curve.csv", ("beta", "p_ref", "p_reward", "p_rlhf"), rows)
    out.chart("bias_curve.svg", "bias_curve", {"rows": rows})
    return results


def _scenario_collapse(config, seed, out: Outputs, jobs, config_dir):
    c = config["collapse"]
    cells = [
        (
            _collapse_cell,
            {
                "vocab_size": c["vocab_size"],
                "length": L,
                "repeat": rep,
                "pairs": c.get("pairs", 10_000),
                "concentration": c.get("concentration"),
                "seed": seed,
            },
        )
        for L in c["lengths"]
        for rep in range(c.get("repeats", 1))
    ]
    results = _map(cells, jobs)
    summary = [v["summary"] for v, _ in results]
    out.csv("collapse_summary.csv", ("length", "repeat", "extreme_mass", "middle_mass", "gap"), summary)
    for v, _ in results:
        if v["summary"]["repeat"] == 0:
            L = v["summary"]["length"]
            rows = [dict(zip(("bin_lo", "bin_hi", "count_ref", "count_reward"), h)) for h in v["hist"]]
            out.csv(f"collapse_hist_L{L}.csv", ("bin_lo", "bin_hi", "count_ref", "count_reward"), rows)
            out.chart(f"collapse_hist_L{L}.svg", "histogram", {"rows": rows, "length": L})
    return results


ALIGN_COLUMNS = ("regularizer", "alpha", "beta", "pm_divergence", "length", "perplexity", "entropy", "kl", "n_sentinel", "converged")


def _scenario_align_compare(config, seed, out: Outputs, jobs, config_dir):
    model = build_model(config["model"], seed, config_dir)
    opt = optimizer_config(config)
    metrics = config.get("metrics", {})
    cells = []
    for reg in config["regularizers"]:
        for beta in config["beta_grid"]:
            alphas = config["alpha_grid"] if reg["tag"] == "conditional_pm" else [None]
            for alpha in alphas:
                cells.append(
                    (
                        _align_cell,
                        {
                            "model": model,
                            "reg": reg,
                            "beta": beta,
                            "alpha": alpha,
                            "opt": opt,
                            "pairs": metrics.get("pairs", 10_000),
                            "exact": metrics.get("exact", True),
                            "seed": seed,
                        },
                    )
                )
    results = _map(cells, jobs)
    out.csv("align_compare.csv", ALIGN_COLUMNS, [v for v, _ in results])
    return results


def _scenario_ode_check(config, seed, out: Outputs, jobs, config_dir):
    ode = config.get("ode", {})
    pis = np.array(ode.get("pi_grid") or np.round(np.arange(1, 100) / 100, 2))
    a_grid = ode.get("a_grid", [-1.0, 0.0, 1.0])
    b_grid = ode.get("b_grid", [-1.0, 0.0, 1.0])
    rows, summary = [], {"pm_max_abs_residual": 0.0, "non_pm_max_abs_residual": {}}
    for a in a_grid:
        for b in b_grid:
            res = pm_ode_residual(pm_family_member(a, b), pis)
            summary["pm_max_abs_residual"] = max(summary["pm_max_abs_residual"], float(np.max(np.abs(res))))
            rows.extend({"family": "pm", "a": a, "b": b, "pi": p, "residual": v} for p, v in zip(pis, res))
    for name, reg in NON_PM_REGULARIZERS.items():
        res = pm_ode_residual(reg, pis)
        summary["non_pm_max_abs_residual"][name] = float(np.max(np.abs(res)))
        rows.extend({"family": name, "a": "", "b": "", "pi": p, "residual": v} for p, v in zip(pis, res))
    out.csv("ode_residuals.csv", ("family", "a", "b", "pi", "residual"), rows)
    out.json("ode_summary.json", summary)
    return []


def _scenario_duality_check(config, seed, out: Outputs, jobs, config_dir):
    d = config.get("duality", {})
    cells = [(_duality_cell, {"index": i, "k_max": d.get("k_max", 20), "seed": seed}) for i in range(d.get("rows", 50))]
    results = _map(cells, jobs)
    out.csv("duality.csv", ("row", "k", "gap", "maximum", "neg_entropy", "converged"), [v for v, _ in results])
    return results


def _scenario_reward_fit(config, seed, out: Outputs, jobs, config_dir):
    model = build_model(config["model"], seed, config_dir)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fitted = fit_reward_population(pairwise_probabilities(model.rewards))
    pop_rows = []
    for x, (f, r) in enumerate(zip(fitted.rows, model.rewards.rows)):
        err = float(np.max(np.abs(expit(f[:, None] - f[None, :]) - expit(r[:, None] - r[None, :]))))
        pop_rows.append({"prompt": x, "max_prob_error": err})
    out.csv("population_fit.csv", ("prompt", "max_prob_error"), pop_rows)
    rf = config.get("reward_fit", {})
    cells = [
        (_reward_cell, {"rewards": model.rewards, "n": n, "repeat": rep, "seed": seed})
        for n in rf.get("samples", [1000, 10_000])
        for rep in range(rf.get("repeats", 3))
    ]
    results = _map(cells, jobs)
    out.csv("reward_fit.csv", ("n", "repeat", "max_prob_error", "converged"), [v for v, _ in results])
    return results + [(None, Counter(w.category.__name__ for w in caught))]


def _scenario_pm_property(config, seed, out: Outputs, jobs, config_dir):
    model = build_model(config["model"], seed, config_dir)
    opt = optimizer_config(config)
    cells = [(_pm_property_cell, {"model": model, "reg": reg, "opt": opt}) for reg in config["regularizers"]]
    results = _map(cells, jobs)
    out.csv("pm_property.csv", ("regularizer", "passed", "max_tv", "converged"), [v for v, _ in results])
    return results


SCENARIOS = {
    "bias_curve": _scenario_bias_curve,
    "collapse": _scenario_collapse,
    "align_compare": _scenario_align_compare,
    "ode_check": _scenario_ode_check,
    "duality_check": _scenario_duality_check,
    "reward_fit": _scenario_reward_fit,
    "pm_property": _scenario_pm_property,
}


# --------------------------------------------------------------------------
# Charts
# --------------------------------------------------------------------------


def render_charts(charts, out_dir: Path) -> list[str]:
    """Render SVG charts; returns the written file names."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "prefmatch"
    written = []
    for name, kind, data in charts:
        fig, ax = plt.subplots(figsize=(5, 4))
        rows = data["rows"]
        if kind == "bias_curve":
            keys = sorted({(r["beta"], r["p_ref"]) for r in rows})
            for beta, p_ref in keys:
                sel = [r for r in rows if r["beta"] == beta and r["p_ref"] == p_ref]
                ax.plot([r["p_reward"] for r in sel], [r["p_rlhf"] for r in sel], label=f"beta={beta:g}, p_ref={p_ref:g}")
            ax.set_xlabel("p_reward")
            ax.set_ylabel("p_rlhf")
            ax.legend(fontsize=5)
        else:
            lo = [r["bin_lo"] for r in rows]
            width = rows[0]["bin_hi"] - rows[0]["bin_lo"]
            ax.bar(lo, [r["count_ref"] for r in rows], width=width, align="edge", alpha=0.6, label="reference")
            ax.bar(lo, [r["count_reward"] for r in rows], width=width, align="edge", alpha=0.6, label="reward")
            ax.set_xlabel("pairwise probability of y1")
            ax.set_title(f"L = {data['length']}")
            ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / name, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(name)
    return written


# --------------------------------------------------------------------------
# Run
# --------------------------------------------------------------------------


@dataclass
class RunManifest:
    scenario: str
    seed: int
    config_sha256: str
    version: str
    outputs: dict
    timings_s: dict
    warnings: dict
    sentinels: int
    charts: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run(config: dict, out_dir, *, seed: int | None = None, jobs: int = 1, svg: bool = False, config_dir=None) -> RunManifest:
    """Validate and execute a scenario, write its artifacts, and write the manifest last.

    Raises :class:`ConfigError` for invalid configurations.
    """
    config = dict(config)
    if seed is not None:
        config["seed"] = int(seed)
    config_dir = Path(config_dir) if config_dir is not None else None
    errors = validate_config(config, config_dir=config_dir)
    if errors:
        raise ConfigError(errors)
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    out = Outputs()
    results = SCENARIOS[config["scenario"]](config, config["seed"], out, max(1, int(jobs)), config_dir)
    t1 = time.perf_counter()
    sums = out.flush(out_dir)
    for name, digest in sums.items():
        if hashlib.sha256((out_dir / name).read_bytes()).hexdigest() != digest:
            raise RuntimeError(f"checksum mismatch for {name}")
    charts = render_charts(out.charts, out_dir) if svg and out.charts else []
    counts = Counter()
    for _, c in results:
        counts.update(c)
    manifest = RunManifest(
        scenario=config["scenario"],
        seed=config["seed"],
        config_sha256=config_hash(config),
        version=__version__,
        outputs=sums,
        timings_s={"compute": round(t1 - t0, 6), "total": round(time.perf_counter() - t0, 6)},
        warnings=dict(sorted(counts.items())),
        sentinels=int(counts.get("SentinelWarning", 0)),
        charts=charts,
    )
    _atomic_write(out_dir / MANIFEST_NAME, manifest.to_json().encode("utf-8"))
    return manifest
