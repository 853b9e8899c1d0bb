"""Exception types shared across the library and the CLI exit-code mapping."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigError(ValueError):
    """Invalid experiment configuration. Carries one message per offending key."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericalError(RuntimeError):
    """Training or evaluation produced a non-finite value."""
