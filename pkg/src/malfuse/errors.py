"""Exception types shared across the toolkit."""


class MalfuseError(Exception):
    """Base class for all toolkit errors."""


# ---- corpus / parsing ----

class MalformedLine(MalfuseError):
    def __init__(self, line_no, token, path=None):
        self.line_no = line_no
        self.token = token
        self.path = path
        where = f"{path}:" if path else "line "
        super().__init__(f"{where}{line_no}: byte token {token!r} is neither 2 hex digits nor '??'")


class EmptyFile(MalfuseError):
    pass


class UnknownClass(MalfuseError):
    pass


class DuplicateId(MalfuseError):
    pass


class MissingFile(MalfuseError):
    """Raised with the full list of (sample id, file kind) pairs that could not be resolved."""

    def __init__(self, missing):
        self.missing = list(missing)
        listing = ", ".join(f"{sid}({kind})" for sid, kind in self.missing)
        super().__init__(f"{len(self.missing)} sample file(s) missing: {listing}")


class TooFewSamples(MalfuseError):
    def __init__(self, family, count):
        self.family = family
        self.count = count
        super().__init__(f"family {family} has {count} samples, need at least 3 to split")


class InvalidSpec(MalfuseError):
    pass


# ---- features ----

class EmptyInput(MalfuseError):
    pass


class NoOpcodesFound(MalfuseError):
    pass


class WidthMismatch(MalfuseError):
    pass


class IoFailure(MalfuseError):
    pass


# ---- tensor / nn ----

class ShapeMismatch(MalfuseError):
    pass


class BatchTooSmall(MalfuseError):
    pass


class DivergedLoss(MalfuseError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class VersionMismatch(MalfuseError):
    pass


class CorruptCheckpoint(MalfuseError):
    pass


# ---- svm / selection ----

class SingleClassInput(MalfuseError):
    pass


class PoolTooSmall(MalfuseError):
    pass


# ---- pipeline / cli ----

class IdSetMismatch(MalfuseError):
    pass


class ConfigError(MalfuseError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message if key is None else f"config key {key!r}: {message}")


class StageError(MalfuseError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
