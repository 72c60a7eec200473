"""Exception and warning classes shared across the package."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class UndefinedConditionalError(ZeroDivisionError):
    """A conditional probability was requested with a zero-mass denominator."""


class GenerationError(RuntimeError):
    pass


class ThresholdError(ValueError):
    """A threshold rule produced an empty regular set."""


class ConfigError(ValueError):
    """Scenario configuration failed validation.

    ``errors`` holds ``(field_path, message)`` pairs, one per problem found.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        lines = [f"{path or '<root>'}: {msg}" for path, msg in self.errors]
        super().__init__("\n".join(lines))


class OptimizerFailure(RuntimeError):
    pass


class ClampWarning(RuntimeWarning):
    """A zero probability was clamped to a positive floor inside a logarithm."""


class SentinelWarning(RuntimeWarning):
    """An infinite metric value was replaced by the finite sentinel cap."""


class NonRealizableWarning(UserWarning):
    """Pairwise preferences are not representable by any BTL reward."""


class UnidentifiableWarning(UserWarning):
    pass


class ConvergenceWarning(UserWarning):
    pass
