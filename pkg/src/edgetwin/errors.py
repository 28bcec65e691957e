"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment configuration. CLI maps this to exit code 2."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite values appeared in network outputs or losses. CLI exit code 3."""


class AggregationError(ValueError):
    """Twin model vectors cannot be aggregated (length mismatch, empty cluster)."""


class BufferUnderfullError(RuntimeError):
    """Replay buffer sampled before it holds a full batch."""


class TraceFormatError(ValueError):
    """A trace file cannot be opened or its header is unusable."""
