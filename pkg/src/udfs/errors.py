"""Exception hierarchy shared across the pipeline.

``DataError`` subclasses map to CLI exit code 2, ``DivergedTraining`` to 3.
"""


class UdfsError(Exception):
    """Base class for all package errors."""


class DataError(UdfsError):
    """Input data violates a documented contract."""


class UnreadableCapture(DataError):
    pass


class EmptyTrace(DataError):
    pass


class MalformedRecord(DataError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class DuplicateFlow(DataError):
    pass


class MissingTimestamp(DataError):
    pass


class EmptyBatch(DataError):
    pass


class HeterogeneousLength(DataError):
    pass


class ShapeMismatch(UdfsError, ValueError):
    pass


class NonScalarLoss(UdfsError, ValueError):
    pass


class OddModelDim(UdfsError, ValueError):
    pass


class NonFiniteActivation(UdfsError, FloatingPointError):
    pass


class MissingPrototype(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class EmptyClass(DataError):
    pass


class NoPrototypes(DataError):
    pass


class IdMismatch(DataError):
    pass


class ExhaustedRejectionSampling(UdfsError):
    pass


class ModelFormatError(DataError):
    pass


class DivergedTraining(UdfsError):
    """Loss or activations became non-finite during optimisation."""
