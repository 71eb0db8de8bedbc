"""Exception hierarchy shared across the package."""


class PanelSelectError(Exception):
    """Base class for all package errors."""


class ConfigError(PanelSelectError):
    """Invalid run configuration or model specification."""


class SchemaError(ConfigError):
    """Input file lacks a required column."""


class ParseError(ConfigError):
    """A cell could not be parsed."""


class IntegrityError(ConfigError):
    """Duplicate or otherwise inconsistent keys in the input."""


class ContractError(PanelSelectError):
    """A caller asked for something the data model does not define."""


class ParameterError(PanelSelectError):
    """Structural parameters are inconsistent (e.g. covariance not PSD)."""


class DomainError(ValueError, PanelSelectError):
    """Numerical input outside the supported domain (NaN, etc.)."""


class NumericalError(PanelSelectError):
    """Numerical breakdown during estimation."""


class StartPointError(NumericalError):
    """Objective is not finite at the starting values."""


class SingularHessianError(NumericalError):
    def __init__(self, message, flat_directions=()):
        super().__init__(message)
        self.flat_directions = tuple(flat_directions)


class NonIdentifiedError(NumericalError):
    def __init__(self, message, parameters=()):
        super().__init__(message)
        self.parameters = tuple(parameters)


class RankDeficiencyError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed."""
