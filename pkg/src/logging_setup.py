"""Process-wide logging configuration driven by ``CHE_LOG``."""

import logging
import os
from typing import Optional

from config.settings import settings
from src.errors import ConfigError

LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> int:
    """Set the root level from ``level``, else ``CHE_LOG``, else settings."""
    name = (level or os.environ.get("CHE_LOG") or settings.LOG).strip().lower()
    if name not in LEVELS:
        raise ConfigError(f"CHE_LOG must be one of {sorted(LEVELS)}, got {name!r}", ["CHE_LOG"])
    logging.basicConfig(level=LEVELS[name], format=LOG_FORMAT)
    logging.getLogger().setLevel(LEVELS[name])
    return LEVELS[name]
