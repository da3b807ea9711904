class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class DataError(ValueError):
    """A dataset, batch or file cannot be used as given."""


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt or does not match the expected manifest."""
