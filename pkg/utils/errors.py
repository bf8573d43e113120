class EngineError(ValueError):
    """Base class for input errors raised by the engine (CLI exit code 1)."""


class MalformedJson(EngineError):
    """An input line that is not valid UTF-8 JSON of the expected shape."""
