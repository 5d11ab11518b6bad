import logging
import os
from unittest import mock

import pytest

from arcane_sim.logging_config import CycleTextFormatter, LogfmtFormatter, get_logger, setup_logging


def make_record(msg, cycle=None, name="arcane_sim.runtime"):
    record = logging.LogRecord(name, logging.INFO, __file__, 1, msg, None, None)
    if cycle is not None:
        record.cycle = cycle
    return record


class TestLogfmtFormatter:
    def test_fields(self):
        line = LogfmtFormatter().format(make_record('kernel "gemm" start', cycle=1204))
        assert " level=info logger=runtime cycle=1204 " in line
        assert line.endswith('msg="kernel \\"gemm\\" start"')

    def test_without_cycle(self):
        assert "cycle=" not in LogfmtFormatter().format(make_record("idle"))


class TestCycleTextFormatter:
    def test_prefix(self):
        formatter = CycleTextFormatter(fmt="%(message)s")
        assert formatter.format(make_record("hit", cycle=7)) == "[         7] hit"
        assert formatter.format(make_record("hit")) == "hit"


class TestSetupLogging:
    @pytest.fixture(autouse=True)
    def restore_root(self):
        root = logging.getLogger()
        handlers, level = root.handlers[:], root.level
        yield
        root.handlers[:] = handlers
        root.setLevel(level)

    def test_env_selects_logfmt(self):
        with mock.patch.dict(os.environ, {"LOG_LEVEL": "debug", "LOG_FORMAT": "logfmt"}):
            root = setup_logging()
        assert root.level == logging.DEBUG
        assert isinstance(root.handlers[0].formatter, LogfmtFormatter)

    def test_argument_wins(self):
        with mock.patch.dict(os.environ, {"LOG_LEVEL": "debug"}):
            root = setup_logging("warning", use_logfmt=False)
        assert root.level == logging.WARNING
        assert isinstance(root.handlers[0].formatter, CycleTextFormatter)

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            setup_logging("chatty")

    def test_get_logger(self):
        assert get_logger("arcane_sim.cache").name == "arcane_sim.cache"
