"""Unit tests for structured JSON logging."""

import io
import json
import logging

import pytest

from mot_hra.logging import StructuredJSONFormatter, StructuredLogger, setup_structured_logging


@pytest.fixture
def captured():
    stream = io.StringIO()
    handler = logging.StreamHandler(stream)
    handler.setFormatter(StructuredJSONFormatter())
    inner = logging.getLogger("mot-hra.test-logging")
    inner.addHandler(handler)
    inner.setLevel(logging.DEBUG)
    inner.propagate = False
    yield StructuredLogger("mot-hra.test-logging"), stream
    inner.removeHandler(handler)


def lines(stream: io.StringIO) -> list[dict]:
    return [json.loads(line) for line in stream.getvalue().splitlines()]


class TestFormatter:
    def test_structured_fields(self, captured):
        log, stream = captured
        log.info(
            "Training step",
            component="trainer",
            run_id="abc",
            step=3,
            event="train_step",
            loss_total=1.5,
        )
        (entry,) = lines(stream)
        assert entry["level"] == "INFO"
        assert entry["logger"] == "mot-hra.test-logging"
        assert entry["message"] == "Training step"
        assert entry["runId"] == "abc"
        assert entry["step"] == 3
        assert entry["event"] == "train_step"
        assert entry["loss_total"] == 1.5
        assert "run_id" not in entry and "timestamp" in entry

    def test_unset_fields_are_omitted(self, captured):
        log, stream = captured
        log.warning("bare")
        (entry,) = lines(stream)
        for name in ("component", "runId", "step", "split", "event", "reason"):
            assert name not in entry

    def test_non_json_values_are_stringified(self, captured):
        log, stream = captured
        log.debug("paths", component="cli", target=object())
        (entry,) = lines(stream)
        assert entry["target"].startswith("<object object")

    def test_exceptions_are_included(self, captured):
        _, stream = captured
        logger = logging.getLogger("mot-hra.test-logging")
        try:
            raise RuntimeError("boom")
        except RuntimeError:
            logger.exception("failed")
        (entry,) = lines(stream)
        assert "RuntimeError: boom" in entry["exception"]


class TestSetup:
    def test_log_file_receives_json_lines(self, tmp_path, restore_root_logger):
        path = tmp_path / "logs" / "run.jsonl"
        setup_structured_logging(level=logging.INFO, log_file=path)
        StructuredLogger("mot-hra").info("hello", component="cli", reason="test")
        StructuredLogger("mot-hra").debug("hidden")
        for handler in restore_root_logger.handlers:
            handler.flush()
        entries = [json.loads(line) for line in path.read_text().splitlines()]
        assert [e["message"] for e in entries] == ["hello"]
        assert entries[0]["reason"] == "test"

    def test_setup_replaces_existing_handlers(self, restore_root_logger):
        setup_structured_logging()
        setup_structured_logging()
        assert len(restore_root_logger.handlers) == 1
        assert isinstance(restore_root_logger.handlers[0].formatter, StructuredJSONFormatter)
