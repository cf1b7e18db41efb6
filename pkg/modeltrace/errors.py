from __future__ import annotations
from typing import Optional


class ModelTraceError(Exception):
    """Base class for every failure raised by the toolkit."""


class InvalidInputError(ModelTraceError, ValueError):
    pass


# Media / file formats

class FormatError(ModelTraceError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, message: str, frame_index: Optional[int] = None):
        super().__init__(message)
        self.frame_index = frame_index


class EmptySourceError(ModelTraceError):
    pass


class InsufficientFramesError(ModelTraceError):
    pass


class ContentTooSimilarError(ModelTraceError):
    def __init__(self, best_distance: int, d_min: int):
        super().__init__(
            f"selected frames reach a min pairwise Hamming distance of "
            f"{best_distance}, below d_min={d_min}"
        )
        self.best_distance = best_distance
        self.d_min = d_min


class InconsistencyError(ModelTraceError):
    pass


# Networks

class DivergenceError(ModelTraceError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became NaN in epoch {epoch}")
        self.epoch = epoch


class UnsupportedArchitectureError(ModelTraceError):
    pass


# Ledger / identity

class CorruptionError(ModelTraceError):
    def __init__(self, message: str, first_bad_seq: Optional[int] = None):
        super().__init__(message)
        self.first_bad_seq = first_bad_seq


class ClockSkewError(ModelTraceError):
    pass


class CollisionError(ModelTraceError):
    def __init__(self, existing_user: str, new_user: str):
        super().__init__(
            f"verification value already enrolled for {existing_user!r}; "
            f"cannot enroll {new_user!r}"
        )
        self.existing_user = existing_user
        self.new_user = new_user


# Gateway

class StartupError(ModelTraceError):
    pass


class TransportError(ModelTraceError):
    pass


class ProtocolError(ModelTraceError):
    pass


class RequestRejectedError(ProtocolError):
    def __init__(self, error_code: str, request_id: Optional[str] = None):
        super().__init__(f"request {request_id!r} rejected: {error_code}")
        self.error_code = error_code
        self.request_id = request_id
