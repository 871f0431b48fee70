"""Exception hierarchy shared by every stage of the pipeline."""


class EmulationError(Exception):
    """Base class. The CLI maps subclasses of this to exit code 1."""


class ValidationError(EmulationError):
    pass
