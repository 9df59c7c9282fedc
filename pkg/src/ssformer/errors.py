"""Exception types shared across the package."""


class SSFormerError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShape(SSFormerError):
    """A shape is malformed (zero/negative extent, bad element count, indivisible size)."""


class ShapeMismatch(SSFormerError):
    """Two operands have incompatible shapes."""


class InvalidAxis(SSFormerError):
    """A reduction axis is out of range or repeated."""


class InvalidReduction(SSFormerError):
    """backward() was called on a non-scalar tensor."""


class TapeConsumed(SSFormerError):
    """backward() was called twice on the same tape."""


class NumericalFailure(SSFormerError):
    """A numeric check hit a non-finite value."""


class InvalidTarget(SSFormerError):
    """A mask argument is not strictly binary."""


class InvalidEpoch(SSFormerError):
    """Epoch index outside the schedule's range."""


class FormatError(SSFormerError):
    """A file (netpbm image, checkpoint, config) failed to parse."""


class NotRecorded(SSFormerError):
    """Attention maps were requested but the forward pass did not record them."""


class DivergenceDetected(SSFormerError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
