"""Error types and recovery for the Masked AutoEncoder Purifier"""
import logging
import time
from typing import Any, Callable, Iterable, Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class PurifierError(Exception):
    """Base class for every error raised by this package"""


class ConfigValidationError(PurifierError):
    """Configuration failed validation; carries the offending field paths"""

    def __init__(self, message: str, field_paths: Optional[Iterable[str]] = None):
        self.field_paths = list(field_paths or [])
        if self.field_paths:
            message = f"{message} (fields: {', '.join(self.field_paths)})"
        super().__init__(message)


class DimensionMismatchError(PurifierError, ValueError):
    """Image or token dimensions incompatible with the patch size"""


class GridMismatchError(PurifierError, ValueError):
    """Mask does not match the patch grid of the image"""


class ShapeMismatchError(PurifierError, ValueError):
    """Two tensors that must agree in shape do not"""


class InvalidRatioError(PurifierError, ValueError):
    """Masking ratio outside [0, 1)"""


class InvalidLambdaError(PurifierError, ValueError):
    """TRADES trade-off weight must be strictly positive"""


class ResolutionUnsupportedError(PurifierError, ValueError):
    """Image resolution not divisible by the patch size"""


class WindowTooLargeError(PurifierError, ValueError):
    """SSIM window larger than the image or even-sized"""


class TilingError(PurifierError, ValueError):
    """Test resolution not divisible by the tiling window"""


class EmptyRegionError(PurifierError, ValueError):
    """A loss was asked to average over an empty pixel region"""


class NonFiniteError(PurifierError):
    """NaN or Inf appeared in activations or gradients"""


class TrainingDivergedError(PurifierError):
    """Loss became non-finite during training"""

    def __init__(self, step: int, lr: float, grad_norm: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"Non-finite loss at step {step} (last lr={lr:.3e}, last grad_norm={grad_norm:.3e})"
        )


class LoRAAttachError(PurifierError):
    """Adapters already attached"""


class FreezeViolationError(PurifierError):
    """A tensor that must stay frozen is trainable"""


class CheckpointMismatchError(PurifierError):
    """Checkpoint config hash differs from the instantiated model"""


class CacheFingerprintError(PurifierError):
    """Cached adversarial pairs were produced under a different attack setup"""


class CacheCoverageError(CacheFingerprintError):
    """Cached adversarial pairs cover fewer batches than the run asks for"""


class MissingDatasetError(PurifierError):
    """Dataset files are not present locally"""


class UnknownDatasetError(PurifierError, ValueError):
    """Dataset tag not recognised"""


class ClassCountMismatchError(PurifierError, ValueError):
    """Classifier outputs a different number of classes than the dataset has"""


class UnknownAttackError(PurifierError, KeyError):
    """Attack name not registered"""


_VALIDATION_ERRORS = (
    ConfigValidationError,
    InvalidRatioError,
    InvalidLambdaError,
    UnknownDatasetError,
    UnknownAttackError,
)


class ErrorHandler:
    """Log errors with context and map them to process exit codes"""

    def __init__(self, actor: str = "cli"):
        """Initialize error handler"""
        self.actor = actor

    def handle_error(self, error: Exception, context: str) -> int:
        """Log an error and return the exit code for it"""
        code = self.exit_code_for(error)
        if code == EXIT_VALIDATION:
            logger.error(f"Validation failed in {self.actor} ({context}): {error}")
        elif code == EXIT_RUNTIME:
            logger.error(f"Runtime failure in {self.actor} ({context}): {error}", exc_info=True)
        else:
            logger.critical(f"Unexpected error in {self.actor} ({context}): {error}", exc_info=True)
        return code

    @staticmethod
    def exit_code_for(error: Exception) -> int:
        """Classify an exception into an exit code"""
        if isinstance(error, _VALIDATION_ERRORS):
            return EXIT_VALIDATION
        if isinstance(error, PurifierError):
            return EXIT_RUNTIME
        return EXIT_UNEXPECTED

    def retry_with_backoff(self, func: Callable[[], Any], max_retries: int = 3,
                           initial_backoff: float = 1.0, max_backoff: float = 30.0,
                           retry_on: tuple = (OSError,)) -> Any:
        """Retry a function on transient I/O errors with exponential backoff"""
        backoff = initial_backoff
        last_error: Optional[BaseException] = None

        for attempt in range(max_retries):
            try:
                return func()
            except retry_on as e:
                last_error = e
                logger.warning(f"Attempt {attempt + 1} failed: {e}")

                if attempt < max_retries - 1:
                    wait_time = min(backoff, max_backoff)
                    logger.info(f"Retrying in {wait_time} seconds...")
                    time.sleep(wait_time)
                    backoff *= 2

        logger.error(f"All {max_retries} attempts failed")
        raise last_error
