"""Exception hierarchy shared by every convshard module."""


class ConvShardError(Exception):
    """Base class for all convshard errors."""


class DimensionError(ConvShardError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConsistencyError(ConvShardError, ValueError):
    """Cached state (e.g. pooling indices) does not match the data it is applied to."""


class ConfigurationError(ConvShardError, ValueError):
    """Invalid hyperparameters, presets or run configuration."""


class DataError(ConvShardError, ValueError):
    """Input values are outside their legal domain (labels, times, ...)."""


class IngestionError(DataError):
    """A dataset file could not be parsed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ProtocolError(ConvShardError):
    """A frame violates the wire format; the connection must be dropped."""


class IncompleteFrameError(ProtocolError):
    """Not enough bytes buffered yet to decode a full frame (retryable)."""


class CorruptionError(ProtocolError):
    """A frame parsed but its contents are self-inconsistent."""


class MessageSizeError(ProtocolError):
    """Payload exceeds the maximum frame size."""


class TransportError(ConvShardError):
    """Connection-level failure."""


class ConnectionLostError(TransportError):
    """Peer closed the connection (possibly mid-frame)."""


class TransportTimeout(TransportError):
    """No data arrived within the configured idle timeout."""


class WorkerError(ConvShardError):
    """A worker failed, timed out or returned an unusable result."""

    def __init__(self, device_id, message):
        super().__init__(f"device {device_id}: {message}")
        self.device_id = device_id


class IncompletenessError(WorkerError):
    """A device with a nonzero share produced no result."""


class ResultCorruptionError(WorkerError, CorruptionError):
    """A worker's ConvResult does not match the task it was given."""
