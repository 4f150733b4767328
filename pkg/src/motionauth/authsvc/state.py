"""Per-user consecutive-failure counter and fallback status."""

from dataclasses import dataclass

FALLBACK_AFTER = 3
ACTIVE = "active"
FALLBACK = "fallback"


@dataclass(frozen=True)
class VerificationState:
    consecutive_failures: int = 0

    def __post_init__(self):
        if self.consecutive_failures < 0:
            raise ValueError("consecutive_failures must be >= 0")

    @property
    def status(self):
        return FALLBACK if self.consecutive_failures >= FALLBACK_AFTER else ACTIVE

    def after(self, accept):
        """State after one verification.

        A reject always counts. An accept clears the counter only while the
        user is active: once in fallback the status holds until
        :meth:`reset`, so the counter stays where it is.
        """
        if not accept:
            return VerificationState(self.consecutive_failures + 1)
        if self.status == FALLBACK:
            return self
        return VerificationState(0)

    def reset(self):
        return VerificationState(0)

    def to_dict(self):
        return {"consecutive_failures": self.consecutive_failures, "status": self.status}
