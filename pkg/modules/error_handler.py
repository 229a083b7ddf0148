"""
Error Handler Module
Provides the exception hierarchy and error handling utilities for the pipeline.
"""

import logging
import traceback
from typing import Optional, Dict, Any, Callable

logger = logging.getLogger(__name__)


class Points2SoundError(Exception):
    """Base class for every error raised by the pipeline"""


class ShapeError(Points2SoundError, ValueError):
    """Tensor, clip or cloud dimensions do not line up"""


class ConfigError(Points2SoundError, ValueError):
    """Invalid or inconsistent configuration"""


class DataFormatError(Points2SoundError, ValueError):
    """A file on disk does not follow its declared format"""


class SampleRateError(Points2SoundError, ValueError):
    """Two audio sources disagree on their sample rate"""


class TapeError(Points2SoundError, RuntimeError):
    """Misuse of the gradient tape"""


class CheckpointError(Points2SoundError):
    """Checkpoint cannot be read or does not fit the requested model"""


class TrainingDivergedError(Points2SoundError, RuntimeError):
    """Loss became NaN or infinite during training"""

    def __init__(self, iteration: int, learning_rate: float, batch_seed: int, loss: float):
        self.iteration = iteration
        self.learning_rate = learning_rate
        self.batch_seed = batch_seed
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at iteration {iteration} "
            f"(lr={learning_rate}, batch seed={batch_seed})"
        )


# exit codes of the command line
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ErrorHandler:
    """Centralized error handling for the pipeline"""

    @staticmethod
    def log_error(error: Exception, context: str,
                  additional_data: Optional[Dict[str, Any]] = None) -> None:
        """Log errors with context and additional data"""
        try:
            error_msg = f"Error in {context}"
            if additional_data:
                error_msg += f" | Additional data: {additional_data}"

            logger.error(f"{error_msg}: {type(error).__name__}: {error}")
            logger.debug(f"Error traceback: {traceback.format_exc()}")

        except Exception as e:
            logger.critical(f"Failed to log error: {e}")

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        """Map an exception to the process exit code"""
        if isinstance(error, (ConfigError, FileNotFoundError, NotADirectoryError)):
            return EXIT_USAGE
        return EXIT_RUNTIME

    @staticmethod
    def handle_command_error(error: Exception, command: str) -> int:
        """Log a failed command and return its exit code"""
        code = ErrorHandler.exit_code_for(error)
        if code == EXIT_USAGE:
            logger.error(f"Usage error in {command}: {error}")
        else:
            ErrorHandler.log_error(error, command)
        return code

    @staticmethod
    def safe_execute(func: Callable, *args, **kwargs):
        """Safely execute a function with error handling"""
        try:
            return func(*args, **kwargs)
        except Exception as e:
            ErrorHandler.log_error(e, f"safe_execute for {func.__name__}")
            return None
