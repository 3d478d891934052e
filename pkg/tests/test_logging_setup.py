"""
Tests for CHE_LOG driven logging configuration.
"""

import logging
import sys
from pathlib import Path

import pytest

_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.errors import ConfigError
from src.logging_setup import configure_logging


@pytest.fixture(autouse=True)
def restore_root_level():
    level = logging.getLogger().level
    yield
    logging.getLogger().setLevel(level)


class TestConfigureLogging:

    @pytest.mark.parametrize("name, level", [
        ("error", logging.ERROR),
        ("info", logging.INFO),
        ("debug", logging.DEBUG),
        (" DEBUG ", logging.DEBUG),
    ])
    def test_explicit_level(self, name, level):
        assert configure_logging(name) == level
        assert logging.getLogger().level == level

    def test_environment_variable(self, monkeypatch):
        monkeypatch.setenv("CHE_LOG", "error")
        assert configure_logging() == logging.ERROR

    def test_argument_wins_over_environment(self, monkeypatch):
        monkeypatch.setenv("CHE_LOG", "error")
        assert configure_logging("debug") == logging.DEBUG

    def test_unknown_level(self, monkeypatch):
        monkeypatch.setenv("CHE_LOG", "verbose")
        with pytest.raises(ConfigError) as exc:
            configure_logging()
        assert exc.value.keys == ["CHE_LOG"]
