from .errors import CapclustError
from .helpers import derive_rng, format_error_message, logger, setup_logging

__all__ = ["CapclustError", "derive_rng", "format_error_message", "logger", "setup_logging"]
