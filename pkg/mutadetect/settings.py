"""Settings for mutadetect."""

import os

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings

from mutadetect.utils.pylogger import get_python_logger

# Initialize logger
logger = get_python_logger()

# Load environment variables with error handling
try:
    load_dotenv(override=False)
except Exception as e:
    # Log error but don't fail - environment variables might be set directly
    logger.warning(f"Could not load .env file: {e}")


VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class Settings(BaseSettings):
    """Process-level settings for mutadetect.

    Uses Pydantic BaseSettings to load and validate configuration from environment
    variables. Run parameters (paths, hyperparameters, seed) live in the run
    config file instead, see `mutadetect.config`.
    """

    PYTHON_LOG_LEVEL: str = Field(
        default="INFO",
        json_schema_extra={
            "env": "PYTHON_LOG_LEVEL",
            "description": "Logging level for the application",
            "example": "INFO",
            "enum": VALID_LOG_LEVELS,
        },
    )
    MUTADETECT_THREADS: int = Field(
        default_factory=lambda: os.cpu_count() or 1,
        ge=1,
        json_schema_extra={
            "env": "MUTADETECT_THREADS",
            "description": "Upper bound on worker threads for trials and sampling",
            "example": 4,
        },
    )
    MUTADETECT_OUTPUT_DIR: str = Field(
        default="runs",
        json_schema_extra={
            "env": "MUTADETECT_OUTPUT_DIR",
            "description": "Default output directory when --out is not given",
            "example": "runs/h3n2",
        },
    )


def validate_config(settings: Settings) -> None:
    """Validate configuration settings.

    Args:
        settings: Settings instance to validate.

    Raises:
        ValueError: If a value is outside its accepted range.
    """
    if settings.PYTHON_LOG_LEVEL.upper() not in VALID_LOG_LEVELS:
        raise ValueError(
            f"PYTHON_LOG_LEVEL must be one of {VALID_LOG_LEVELS}, got {settings.PYTHON_LOG_LEVEL}"
        )

    if settings.MUTADETECT_THREADS < 1:
        raise ValueError(
            f"MUTADETECT_THREADS must be at least 1, got {settings.MUTADETECT_THREADS}"
        )

    if not settings.MUTADETECT_OUTPUT_DIR:
        raise ValueError("MUTADETECT_OUTPUT_DIR cannot be empty")


# Create config instance without validation (validation happens in main.py)
settings = Settings()
