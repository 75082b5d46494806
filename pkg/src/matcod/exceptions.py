"""Exception and warning types raised across the package."""


class MatcodError(Exception):
    """Base class for all package errors.

    Every subclass carries enough context in ``args`` to be rendered as a
    machine-readable error by the command line interface.
    """

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class SchemaError(MatcodError, ValueError):
    """An input file does not follow its documented column layout."""


class DuplicateCode(MatcodError, ValueError):
    def __init__(self, code):
        super().__init__(f"ICD-10 code listed more than once: {code!r}")
        self.code = code


class UnknownCategoryLabel(MatcodError, ValueError):
    def __init__(self, row):
        super().__init__(f"unknown cause category label in row: {row!r}")
        self.row = row


class MissingEnvelope(MatcodError, KeyError):
    def __init__(self, country, year):
        super().__init__(f"no envelope estimate for {country} {year}")
        self.country = country
        self.year = year

    def __str__(self):
        return self.args[0]


class NonFiniteDensity(MatcodError, FloatingPointError):
    """Log density or its gradient overflowed."""


class DomainError(MatcodError, ValueError):
    """A constrained parameter lies outside its support."""


class AllInitsFailed(MatcodError, RuntimeError):
    """No finite initial point was found for a chain."""


class InsufficientDraws(MatcodError, ValueError):
    """Diagnostics need at least two chains and four draws per chain."""


class MissingCountryYear(MatcodError, KeyError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(f"{c}:{t}" for c, t in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"country-years without distributions: {shown}{more}")

    def __str__(self):
        return self.args[0]


class EmptyAfterExclusion(MatcodError, ValueError):
    def __init__(self, region):
        super().__init__(f"no observations left after exclusion ({region})")
        self.region = region


class MaxDepthSaturation(UserWarning):
    """More than 10% of iterations hit the maximum tree depth."""
