import logging
import sys
from pathlib import Path
from datetime import datetime

ROOT_LOGGER_NAME = "MeshRegistration"


def get_logger(name: str) -> logging.Logger:
    """Child logger of the registration hierarchy"""
    short_name = name.rsplit(".", 1)[-1]
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{short_name}")


class RegistrationLogger:
    """Custom logger for registration and force estimation runs"""

    def __init__(self, name: str = ROOT_LOGGER_NAME, log_dir: Path = Path("logs"),
                 level: str = "INFO", console_level: str = "WARNING"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, level.upper(), logging.INFO))

        # handlers are process-wide; attach them once
        if self.logger.handlers:
            return

        # Create logs directory
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)

        # File handler
        log_file = log_dir / f"mesh_registration_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)

        # Console handler
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, console_level.upper(), logging.WARNING))

        # Formatter
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        file_handler.setFormatter(formatter)
        console_handler.setFormatter(formatter)

        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

    def info(self, message: str):
        """Log info message"""
        self.logger.info(message)

    def error(self, message: str):
        """Log error message"""
        self.logger.error(message)

