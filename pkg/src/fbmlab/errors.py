"""Exception hierarchy shared by every module."""


class FbmLabError(Exception):
    """Base class for all package errors."""


class DomainError(FbmLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class FrameDegenerateError(FbmLabError):
    """The frame V_1..V_n fails to be a basis (or is badly conditioned)."""

    def __init__(self, x, cond):
        self.x = x
        self.cond = cond
        super().__init__(f"frame degenerate at x={list(map(float, x))} (cond={cond:.3g})")


class DegenerateMalliavinError(FbmLabError):
    """The reduced Malliavin matrix M is numerically singular."""


class ConfigError(FbmLabError):
    """Invalid configuration; ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
