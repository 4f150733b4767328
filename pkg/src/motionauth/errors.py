"""Exception types shared across the toolkit."""


class MotionAuthError(Exception):
    """Base class for all toolkit errors."""


# data pipeline
class MissingModality(MotionAuthError):
    pass


class MalformedSeries(MotionAuthError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class NoOverlap(MotionAuthError):
    pass


class TooShort(MotionAuthError):
    pass


class BadSplitCounts(MotionAuthError):
    pass


class InsufficientUsers(MotionAuthError):
    pass


class TooFewSamples(MotionAuthError):
    pass


# network core
class ShapeError(MotionAuthError, ValueError):
    pass


class DegenerateBatch(MotionAuthError):
    pass


class MisalignedGrads(MotionAuthError):
    pass


# metric learning
class NoValidTriplets(MotionAuthError):
    """``stats`` is set when triplets existed but all of them were easy (zero loss)."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


# model files
class IncompatibleModelFile(MotionAuthError):
    pass


class CorruptModelFile(MotionAuthError):
    pass


class NoEnrollment(MotionAuthError):
    code = "no_enrollment"


class NotCalibrated(MotionAuthError):
    pass


# training
class TrainingStalled(MotionAuthError):
    pass


class BadPairSet(MotionAuthError):
    pass


class DegenerateScores(MotionAuthError):
    pass


class EmptySearchSpace(MotionAuthError):
    pass


class NonFiniteLoss(MotionAuthError, FloatingPointError):
    pass


# evaluation / fusion
class UndefinedMetric(MotionAuthError, ZeroDivisionError):
    pass


class DegenerateColumn(MotionAuthError):
    pass


class DegenerateFit(MotionAuthError):
    pass


class MalformedScoreFile(MotionAuthError, ValueError):
    pass


# service
class NotEnrolled(MotionAuthError):
    code = "not_enrolled"


class NotInFallback(MotionAuthError):
    code = "not_in_fallback"


class Unauthorized(MotionAuthError):
    code = "unauthorized"


class StoreError(MotionAuthError):
    code = "store_error"


class ProtocolError(MotionAuthError):
    code = "bad_request"
