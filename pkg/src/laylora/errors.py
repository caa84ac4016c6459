"""Exception hierarchy. Every error raised by the package derives from LayLoraError."""


class LayLoraError(Exception):
    pass


class DimensionError(LayLoraError, ValueError):
    pass


class ContractError(LayLoraError, ValueError):
    pass


class DegenerateVectorError(LayLoraError, ValueError):
    pass


class NumericalDomainError(LayLoraError, ArithmeticError):
    pass


class ConfigurationError(LayLoraError, ValueError):
    pass


class ControlError(LayLoraError, ValueError):
    """Branch weights violate the Switch/Router invariant."""


class RoutingError(LayLoraError, LookupError):
    """A sample's style has no matching branch."""


class SamplingError(LayLoraError, ValueError):
    pass


class DegenerateSplitError(LayLoraError, ValueError):
    pass


class DegenerateSubspaceError(LayLoraError, ValueError):
    pass


class IngestionError(LayLoraError, ValueError):
    pass


class SchemaError(IngestionError):
    pass


class ParityError(LayLoraError, ValueError):
    pass
