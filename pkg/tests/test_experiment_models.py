from pathlib import Path

import pytest

from exceptions import ParseError
from experiment_models import (
    DEFAULT_SETTINGS,
    Check,
    ExperimentConfig,
    ExperimentReport,
    default_config,
    load_experiment_config,
)
from models import ArrowCombinator, EditMode, SumCombinator

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

def test_all_fixtures_load():
    for path in sorted(FIXTURES.glob("*.yaml")):
        config = load_experiment_config(path)
        assert config.seeds
        assert config.run_name

def test_theorem1_mixture_fixture():
    config = load_experiment_config(FIXTURES / "theorem1_mixture.yaml", experiment="theorem1")
    assert config.dims.m == 16384
    assert config.seeds == list(range(10))
    assert config.combinators == [SumCombinator()]
    assert config.tolerances.residual_max == 0.05
    assert config.run_name == "theorem1_mixture"

def test_edit_locality_fixture_modes():
    config = load_experiment_config(FIXTURES / "edit_locality.yaml")
    assert config.edit_modes == [EditMode.EXACT_REDIRECT, EditMode.PAPER_STRICT]
    assert config.store_two_hop is False

def test_experiment_filled_in_when_missing(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seeds: [1, 2]\n")
    config = load_experiment_config(path, experiment="kernel_convergence")
    assert config.experiment == "kernel_convergence"
    assert config.seeds == [1, 2]

def test_experiment_mismatch(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("experiment: theorem1\nseeds: [0]\n")
    with pytest.raises(ParseError) as exc:
        load_experiment_config(path, experiment="graph_library")
    assert exc.value.details["experiment"] == "theorem1"

def test_unsupported_schema_version(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("schema_version: 2\nexperiment: theorem1\nseeds: [0]\n")
    with pytest.raises(ParseError) as exc:
        load_experiment_config(path)
    assert exc.value.details["schema_version"] == 2

def test_invalid_yaml_reports_position(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("experiment: theorem1\nseeds: [0, 1\n")
    with pytest.raises(ParseError) as exc:
        load_experiment_config(path)
    assert "line" in exc.value.details

def test_invalid_field_reports_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("experiment: theorem1\nseeds: [0]\ndims: {d: 1, m: 64}\n")
    with pytest.raises(ParseError) as exc:
        load_experiment_config(path)
    assert exc.value.details["field"] == "dims.d"

def test_out_of_range_relation(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("experiment: theorem1\nseeds: [0]\nworld: {num_relations: 2}\nrelations: [0, 3]\n")
    with pytest.raises(ParseError):
        load_experiment_config(path)

def test_missing_file_and_non_mapping(tmp_path):
    with pytest.raises(ParseError):
        load_experiment_config(tmp_path / "absent.yaml")
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ParseError):
        load_experiment_config(path)

def test_seed_range_shorthand():
    config = ExperimentConfig(experiment="theorem1", seeds={"start": 5, "count": 3})
    assert config.seeds == [5, 6, 7]

def test_config_hash_is_stable_and_sensitive():
    a = default_config("theorem1")
    b = default_config("theorem1")
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 64
    shifted = a.with_seed_offset(100)
    assert shifted.seeds[0] == 100
    assert shifted.config_hash() != a.config_hash()

def test_default_configs():
    for experiment in DEFAULT_SETTINGS:
        config = default_config(experiment)
        assert config.experiment == experiment
    assert len(default_config("theorem1").seeds) == 100
    assert default_config("same_multiple").dims.d == 512
    assert isinstance(default_config("library_comparison").combinators[0], ArrowCombinator)
    with pytest.raises(ParseError):
        default_config("nonsense")

def test_report_pass_and_failures():
    report = ExperimentReport(experiment="theorem1", name="t", config_hash="0" * 64, checks=[
        Check(name="a", claim="x", value=1.0, threshold=">= 1", passed=True),
        Check(name="b", claim="y", value=None, threshold="<= 0.1", passed=False),
    ])
    assert not report.passed
    assert [c.name for c in report.failed_checks()] == ["b"]
    assert ExperimentReport(experiment="theorem1", name="t", config_hash="").passed
