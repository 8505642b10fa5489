class CasperLabError(Exception):
    pass


class InvalidInputError(CasperLabError, ValueError):
    pass


class InvalidParameterError(CasperLabError, ValueError):
    pass


class InsufficientClassesError(CasperLabError):
    pass


class TrainingDivergenceError(CasperLabError, RuntimeError):
    pass


class GenerationError(CasperLabError):
    pass


class LoadError(CasperLabError):
    pass


class InvalidPartitionError(CasperLabError, ValueError):
    pass


class ConfigError(CasperLabError):
    pass
