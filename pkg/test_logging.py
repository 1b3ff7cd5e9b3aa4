#!/usr/bin/env python3
"""
Test logging setup and the run report.
"""
import logging
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metacomps.logger import log_run_summary, log_task_outcome, setup_logging
from metacomps.results import Curve


def test_setup_logging_writes_debug_file(tmp_path):
    log_file = tmp_path / "debug.log"
    setup_logging(str(log_file))
    root = logging.getLogger()
    assert root.level == logging.DEBUG
    assert len(root.handlers) == 2

    logging.debug("a debug line")
    log_task_outcome("comps", 0, 3, 12, 7, 1)
    for handler in root.handlers:
        handler.flush()
    content = log_file.read_text()
    assert "DEBUG - test_logging:" in content
    assert "[comps seed=0] task 3: solved at episode 7, 12 episodes, 1 skipped PPO steps" in content
    root.handlers.clear()


def test_setup_logging_without_file():
    setup_logging(None)
    handlers = logging.getLogger().handlers
    assert len(handlers) == 1 and handlers[0].level == logging.INFO
    handlers.clear()


def test_run_report_contents(tmp_path):
    report = tmp_path / "run_report.txt"
    curves = {"comps": Curve([0, 1], np.array([5.0, 3.0]), np.array([1.0, 0.0]), [2, 2])}
    backward = {("comps", 0): {1: 0.5, 2: None}}
    log_run_summary(report, "experiment.n_tasks = 2\n", datetime.now(), 1.5, curves, backward,
                    records_path=tmp_path / "records.csv")
    text = report.read_text()
    assert "Status: SUCCESS" in text
    assert "comps: 5.0+/-1.0, 3.0+/-0.0" in text
    assert "comps seed 0: k=1: 0.5000, k=2: missing" in text
    assert "experiment.n_tasks = 2" in text


def test_run_report_records_error(tmp_path):
    report = tmp_path / "run_report.txt"
    log_run_summary(report, "", datetime.now(), 0.0, {}, {}, error="boom")
    text = report.read_text()
    assert "Status: ERROR" in text and "Error: boom" in text


def test_run_report_lists_backward_transfer_per_task(tmp_path):
    report = tmp_path / "run_report.txt"
    series = {("ppotl", 1): {0: {1: None}, 1: {1: 0.25}}}
    log_run_summary(report, "", datetime.now(), 0.0, {}, {("ppotl", 1): {1: 0.25}},
                    backward_series=series)
    text = report.read_text()
    assert "Backward Transfer After Each Task:" in text
    assert "ppotl seed 1 task 0: k=1: missing" in text
    assert "ppotl seed 1 task 1: k=1: 0.2500" in text


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
