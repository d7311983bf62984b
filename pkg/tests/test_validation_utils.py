import logging

import pytest

from exceptions import ParameterError
from validation_utils import check_count, check_index, sanitize_run_name

def test_sanitize_run_name_invalid():
    input_str = "run!@#name"
    assert sanitize_run_name(input_str) is None

def test_sanitize_run_name_path_traversal():
    assert sanitize_run_name("../theorem1") is None
    assert sanitize_run_name("out/theorem1") is None

def test_sanitize_run_name_valid():
    input_str = "theorem1_mixture-v2.1"
    expected = "theorem1_mixture-v2.1"
    assert sanitize_run_name(input_str) == expected

def test_sanitize_run_name_empty():
    input_str = ""
    expected = ""
    assert sanitize_run_name(input_str) == expected

def test_sanitize_run_name_too_long():
    assert sanitize_run_name("a" * 65) is None

def test_sanitize_run_name_leading_dot():
    assert sanitize_run_name(".hidden") is None
    assert sanitize_run_name("..") is None
    assert sanitize_run_name("run.v1") == "run.v1"

def test_sanitize_run_name_logs_rejection(caplog):
    with caplog.at_level(logging.WARNING, logger="validation_utils"):
        assert sanitize_run_name("bad name") is None
    assert "invalid characters" in caplog.text
    assert caplog.records[-1].run_name == "bad name"

def test_check_index_accepts_range():
    assert check_index(0, 3, "entity") == 0
    assert check_index(2, 3, "entity") == 2

def test_check_index_rejects_out_of_range():
    with pytest.raises(ParameterError) as exc:
        check_index(3, 3, "entity")
    assert exc.value.details["upper"] == 3

def test_check_index_rejects_negative_and_bool():
    with pytest.raises(ParameterError):
        check_index(-1, 3, "relation")
    with pytest.raises(ParameterError):
        check_index(True, 3, "relation")

def test_check_count():
    assert check_count(0, 0, "edits") == 0
    with pytest.raises(ParameterError):
        check_count(1, 2, "entities")
