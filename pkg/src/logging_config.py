"""Logging configuration for the Masked AutoEncoder Purifier"""
import logging
import logging.handlers
from pathlib import Path
from typing import Optional

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
_HANDLER_TAG = "_maep_handler"


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None,
                  log_dir: str = "logs") -> Path:
    """Set up console and rotating-file logging; returns the log file path"""
    level = getattr(logging, log_level.upper())

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Re-running (several CLI invocations in one process) replaces our handlers
    for handler in list(root_logger.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            root_logger.removeHandler(handler)
            handler.close()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(_FORMAT))
    setattr(console_handler, _HANDLER_TAG, True)
    root_logger.addHandler(console_handler)

    if log_file is None:
        path = Path(log_dir) / "maep.log"
    else:
        path = Path(log_file)
    path.parent.mkdir(parents=True, exist_ok=True)

    file_handler = logging.handlers.RotatingFileHandler(
        path,
        maxBytes=10 * 1024 * 1024,  # 10MB
        backupCount=5
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(logging.Formatter(_FORMAT))
    setattr(file_handler, _HANDLER_TAG, True)
    root_logger.addHandler(file_handler)

    logging.info(f"Logging configured: level={log_level}, file={path}")
    return path
