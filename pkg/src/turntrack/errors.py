"""Exception types shared across the package."""


class TurntrackError(Exception):
    """Base class for all errors raised by this package."""


class CorpusParseError(TurntrackError):
    """Malformed corpus record (syntax / structure), with location info."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class CorpusValidationError(TurntrackError):
    """Well-formed record violating a corpus invariant."""

    def __init__(self, message, invariant, line=None, conversation=None):
        self.invariant = invariant
        self.line = line
        self.conversation = conversation
        where = []
        if conversation is not None:
            where.append(f"conversation {conversation!r}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"[{invariant}] {message}{suffix}")


class RepositoryError(TurntrackError):
    pass


class EncodingError(TurntrackError):
    pass


class SequenceTooLongError(EncodingError):
    """Combined repository+utterance sequence exceeds the model's budget."""

    def __init__(self, n, m, budget):
        self.n = n
        self.m = m
        self.budget = budget
        super().__init__(f"sequence too long: {n} repository rows + {m} tokens > {budget}")


class ShapeError(TurntrackError):
    pass


class GradientError(TurntrackError):
    """Non-finite gradient detected; names the offending parameter."""

    def __init__(self, param_name):
        self.param_name = param_name
        super().__init__(f"non-finite gradient in parameter {param_name!r}")


class CheckpointError(TurntrackError):
    pass
