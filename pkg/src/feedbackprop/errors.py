"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FeedbackPropError(Exception):
    """Base class for all errors raised by feedbackprop."""


class ShapeError(FeedbackPropError, ValueError):
    pass


class UnknownLayerError(FeedbackPropError, KeyError):
    def __init__(self, name: str, available=()):
        self.name = name
        self.available = tuple(available)
        super().__init__(name)

    def __str__(self) -> str:
        if self.available:
            return f"unknown layer {self.name!r} (known: {', '.join(self.available)})"
        return f"unknown layer {self.name!r}"


class PivotOrderError(FeedbackPropError, ValueError):
    pass


class GraphError(FeedbackPropError, ValueError):
    """Raised for malformed backward requests (non-scalar loss, unreachable target)."""


class CorruptFileError(FeedbackPropError, ValueError):
    pass


class VersionError(FeedbackPropError, ValueError):
    pass


class ExcludedLabelError(FeedbackPropError, ValueError):
    """Labels without a single positive occurrence; ``indices`` lists them."""

    def __init__(self, indices):
        self.indices = tuple(int(i) for i in indices)
        super().__init__(f"labels with zero positive occurrences: {list(self.indices)}")


class UndefinedAPError(FeedbackPropError, ValueError):
    """Average precision requested for a label without positives."""

    def __init__(self, labels=()):
        self.labels = tuple(int(i) for i in labels)
        msg = "average precision undefined: no positive labels"
        if self.labels:
            msg += f" (labels {list(self.labels)})"
        super().__init__(msg)


class EvidenceError(FeedbackPropError, ValueError):
    pass


class DivergenceError(FeedbackPropError, ArithmeticError):
    pass


class SpecError(FeedbackPropError, ValueError):
    """Invalid dataset / experiment / model specification document."""


class EmptyReportError(FeedbackPropError, ValueError):
    pass
