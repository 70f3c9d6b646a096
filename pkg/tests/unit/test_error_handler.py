"""Unit tests for ErrorHandler"""
import logging

import pytest

from src.error_handler import (
    EXIT_RUNTIME, EXIT_UNEXPECTED, EXIT_VALIDATION, CheckpointMismatchError, ConfigValidationError,
    ErrorHandler, InvalidLambdaError, InvalidRatioError, TrainingDivergedError, UnknownAttackError,
    UnknownDatasetError
)


@pytest.fixture
def handler():
    """Create error handler instance"""
    return ErrorHandler(actor="test")


class TestExitCodes:
    """Test exception classification"""

    @pytest.mark.parametrize("error", [
        ConfigValidationError("bad", ["train.epochs"]),
        InvalidRatioError("r"),
        InvalidLambdaError("lambda"),
        UnknownDatasetError("mnist"),
        UnknownAttackError("cw"),
    ])
    def test_validation_errors(self, error):
        assert ErrorHandler.exit_code_for(error) == EXIT_VALIDATION

    @pytest.mark.parametrize("error", [
        CheckpointMismatchError("hash"),
        TrainingDivergedError(3, 1e-3, float("inf")),
    ])
    def test_runtime_errors(self, error):
        assert ErrorHandler.exit_code_for(error) == EXIT_RUNTIME

    def test_anything_else_is_unexpected(self):
        assert ErrorHandler.exit_code_for(RuntimeError("boom")) == EXIT_UNEXPECTED

    def test_field_paths_in_message(self):
        error = ConfigValidationError("Invalid configuration", ["train.mask_ratio", "model.depth"])
        assert "train.mask_ratio, model.depth" in str(error)

    def test_diverged_error_carries_state(self):
        error = TrainingDivergedError(7, 2e-4, 12.5)
        assert (error.step, error.lr, error.grad_norm) == (7, 2e-4, 12.5)
        assert "step 7" in str(error)


class TestHandleError:
    """Test logging and exit codes together"""

    def test_logs_with_context(self, handler, caplog):
        with caplog.at_level(logging.ERROR):
            code = handler.handle_error(InvalidRatioError("ratio 1.0"), "pretrain")
        assert code == EXIT_VALIDATION
        assert "Validation failed in test (pretrain)" in caplog.text

    def test_unexpected_logged_as_critical(self, handler, caplog):
        with caplog.at_level(logging.ERROR):
            handler.handle_error(ValueError("boom"), "eval")
        assert any(r.levelno == logging.CRITICAL for r in caplog.records)


class TestRetry:
    """Test retry_with_backoff"""

    def test_success_after_transient_failures(self, handler):
        calls = []

        def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise OSError("busy")
            return "ok"

        assert handler.retry_with_backoff(flaky, max_retries=3, initial_backoff=0.0) == "ok"
        assert len(calls) == 3

    def test_gives_up(self, handler):
        def broken():
            raise OSError("disk full")

        with pytest.raises(OSError):
            handler.retry_with_backoff(broken, max_retries=2, initial_backoff=0.0)

    def test_other_errors_not_retried(self, handler):
        calls = []

        def wrong():
            calls.append(1)
            raise ValueError("bad")

        with pytest.raises(ValueError):
            handler.retry_with_backoff(wrong, max_retries=3, initial_backoff=0.0)
        assert len(calls) == 1
