from pathlib import Path

import numpy as np
import pytest

from experiment_models import ExperimentConfig, load_experiment_config
from experiment_orchestrator import (
    ExperimentOrchestrator,
    build_base_model,
    evaluate_edits,
    library_accuracy,
    train_library,
)
from models import CatCombinator, EditMode
from transformer_engine import params_digest
from world_engine import build_two_hop_library, gen_edits, sample_chains, stored_facts

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

def _config(experiment, **overrides):
    settings = {
        "experiment": experiment,
        "dims": {"d": 32, "m": 1024},
        "world": {"num_entities": 10, "num_relations": 2},
        "seeds": [0, 1],
    }
    settings.update(overrides)
    return ExperimentConfig.model_validate(settings)

def _check(report, name):
    return next(c for c in report.checks if c.name == name)

def test_build_base_model_is_deterministic():
    config = _config("edit_locality", store_two_hop=False)
    world_a, params_a, facts_a = build_base_model(config, 4)
    world_b, params_b, facts_b = build_base_model(config, 4)
    assert world_a == world_b
    assert facts_a == facts_b
    assert params_digest(params_a) == params_digest(params_b)
    assert (params_a.W == params_b.W).all()

def test_evaluate_edits_rows(fitted_params, small_world):
    facts = stored_facts(small_world)
    edits = gen_edits(small_world, rel=0, count=2, seed=1)
    rows = evaluate_edits(fitted_params, facts, edits, EditMode.PAPER_STRICT, seed=9)
    assert [r["scope"] for r in rows] == ["isolated", "isolated", "joint"]
    assert all(r["seed"] == 9 for r in rows)
    assert [r["edited_accuracy"] for r in rows[:2]] == [1.0, 1.0]
    assert max(r["closed_form_error"] for r in rows[:2]) <= 1e-10

def test_library_accuracy_routes_with_the_library_combinator(fitted_params, small_world):
    chain = sample_chains(small_world, 0, 1, count=1, rng=np.random.default_rng(4))[0]
    spec = build_two_hop_library(chain, include_oracle=True)
    adapters = train_library(fitted_params, spec)
    oracle_only = spec.model_copy(update={"adapters": [a for a in spec.adapters if a.name == "oracle"]})
    assert library_accuracy(fitted_params, adapters, oracle_only) == 1.0
    cat = oracle_only.model_copy(update={"combinator": CatCombinator()})
    assert library_accuracy(fitted_params, adapters, cat) == 1.0

def test_edit_locality_small():
    config = _config("edit_locality", store_two_hop=False, num_edits=3)
    report = ExperimentOrchestrator(threads=1).run(config)
    assert len(report.rows) == 2 * (1 + 2 * (3 + 1))
    assert _check(report, "recall").passed
    assert _check(report, "edited_accuracy").passed
    assert _check(report, "closed_form_error").passed
    assert {c.name for c in report.checks} == {"recall", "edited_accuracy", "retention", "closed_form_error"}
    assert report.config_hash == config.config_hash()

def test_edit_locality_zero_edits():
    report = ExperimentOrchestrator().run(_config("edit_locality", store_two_hop=False, num_edits=0))
    assert [r["scope"] for r in report.rows] == ["recall", "recall"]
    assert [c.name for c in report.checks] == ["recall"]

def test_rows_do_not_depend_on_thread_count():
    config = _config("edit_locality", store_two_hop=False, num_edits=2, seeds=[3, 1, 2])
    single = ExperimentOrchestrator(threads=1).run(config)
    pooled = ExperimentOrchestrator(threads=3).run(config)
    assert single.rows == pooled.rows
    assert [r["seed"] for r in single.rows if r["scope"] == "recall"] == [3, 1, 2]

def test_theorem1_small():
    config = _config("theorem1", dims={"d": 32, "m": 2048}, world={"num_entities": 12, "num_relations": 2},
                     seeds=[0], chains_per_world=2,
                     combinators=[{"strategy": "sum"}, {"strategy": "uniform"}, {"strategy": "cat"},
                                  {"strategy": "arrow"}])
    report = ExperimentOrchestrator().run(config)
    assert len(report.rows) == 2 * (4 + 4)
    assert _check(report, "oracle_accuracy").passed
    summed = [r for r in report.rows if r["combinator"] == "sum"]
    assert len(summed) == 2
    for row in summed:
        assert 0.0 < row["c1"] < 1.0
        assert "probe_c1_hat" in row
        assert row["residual_rel"] is None or row["residual_rel"] <= 1e-4
    names = {c.name for c in report.checks}
    assert {"two_hop_accuracy[sum]", "two_hop_accuracy[cat]", "mixture_residual"} <= names

def test_library_comparison_small():
    config = _config("library_comparison", dims={"d": 32, "m": 2048},
                     world={"num_entities": 12, "num_relations": 2}, seeds=[0], chains_per_world=2,
                     combinators=[{"strategy": "arrow"}, {"strategy": "uniform"}])
    report = ExperimentOrchestrator().run(config)
    assert len(report.rows) == 2 * (3 * 2 + 4)
    oracle_rows = [r for r in report.rows if r["library"] == "expert" and r["combinator"] == "oracle"]
    assert all(r["correct"] == 1.0 for r in oracle_rows)
    assert "oracle_weight_mean[arrow]" in report.extras
    assert any(c.name == "oracle_dominance[arrow]" for c in report.checks)

def test_graph_library_small():
    config = _config("graph_library", seeds=[0], graph={"partition_sizes": [12, 12, 12]},
                     combinators=[{"strategy": "sum"}, {"strategy": "cat"}])
    report = ExperimentOrchestrator().run(config)
    assert len(report.rows) == 2 * 3
    assert {r["mode"] for r in report.rows} == {"disjoint", "shared"}
    assert _check(report, "self_accuracy").passed
    assert any(c.name == "mode_gap[cat]" for c in report.checks)

def test_same_multiple_small():
    config = _config("same_multiple", store_two_hop=False)
    report = ExperimentOrchestrator().run(config)
    assert len(report.rows) == 2
    assert _check(report, "identical_probe_difference").passed
    for row in report.rows:
        assert row["subject_x"] != row["subject_u"]
        assert row["direction_norm_sq"] > 0

def test_same_multiple_direction_norm_with_distinct_entities():
    config = _config("same_multiple", store_two_hop=False, seeds=list(range(8)))
    report = ExperimentOrchestrator().run(config)
    distinct = [r for r in report.rows
                if len({r["old_target_y"], r["new_target_y"], r["old_target_v"], r["new_target_v"]}) == 4]
    assert distinct
    for row in distinct:
        assert row["direction_norm_sq"] == 4.0

def test_kernel_convergence_small():
    config = _config("kernel_convergence", dims={"d": 8}, m_sweep=[1024, 256], kernel_pairs=3)
    report = ExperimentOrchestrator().run(config)
    assert [r["m"] for r in report.rows] == [256, 1024, 256, 1024]
    assert _check(report, "self_ratio_error").passed
    assert set(report.extras["rms_ratio_error"]) == {"256", "1024"}
    assert "convergence_exponent" in report.extras

def test_kernel_convergence_single_width_skips_exponent():
    config = _config("kernel_convergence", dims={"d": 8}, m_sweep=[512], kernel_pairs=2, seeds=[0])
    report = ExperimentOrchestrator().run(config)
    assert {c.name for c in report.checks} == {"ratio_error", "self_ratio_error"}

@pytest.mark.slow
def test_edit_locality_acceptance():
    report = ExperimentOrchestrator(threads=2).run(load_experiment_config(FIXTURES / "edit_locality.yaml"))
    assert _check(report, "recall").passed
    assert _check(report, "edited_accuracy").passed
    assert _check(report, "closed_form_error").passed
    assert _check(report, "retention").passed
    assert _check(report, "retention").value >= 0.99

@pytest.mark.slow
def test_theorem1_mixture_acceptance():
    report = ExperimentOrchestrator(threads=2).run(load_experiment_config(FIXTURES / "theorem1_mixture.yaml"))
    assert report.passed, [c.name for c in report.failed_checks()]

@pytest.mark.slow
def test_kernel_convergence_acceptance():
    report = ExperimentOrchestrator(threads=2).run(load_experiment_config(FIXTURES / "kernel_convergence.yaml"))
    assert _check(report, "ratio_error").passed
    assert _check(report, "self_ratio_error").passed
    assert -0.6 <= report.extras["convergence_exponent"] <= -0.4
    assert report.passed, [c.name for c in report.failed_checks()]

@pytest.mark.slow
def test_theorem1_acceptance():
    config = load_experiment_config(FIXTURES / "theorem1.yaml")
    assert len(config.seeds) == 100
    report = ExperimentOrchestrator(threads=2).run(config)
    assert _check(report, "two_hop_accuracy[sum]").passed
    assert report.passed, [c.name for c in report.failed_checks()]

@pytest.mark.slow
def test_library_comparison_acceptance():
    report = ExperimentOrchestrator(threads=2).run(load_experiment_config(FIXTURES / "library_comparison.yaml"))
    assert report.passed, [c.name for c in report.failed_checks()]

@pytest.mark.slow
def test_graph_library_acceptance():
    config = load_experiment_config(FIXTURES / "graph_library.yaml")
    report = ExperimentOrchestrator(threads=2).run(config)
    assert {r["mode"] for r in report.rows} == {"disjoint", "shared"}
    assert {r["combinator"] for r in report.rows} == {"sum", "uniform", "arrow", "self"}
    assert report.passed, [c.name for c in report.failed_checks()]
    for check in report.checks:
        if check.name.startswith("held_out_accuracy"):
            assert check.value < config.tolerances.two_hop_accuracy_max, check.name
        if check.name.startswith("mode_gap"):
            assert check.value < config.tolerances.mode_gap_max, check.name

@pytest.mark.slow
def test_same_multiple_acceptance():
    config = load_experiment_config(FIXTURES / "same_multiple.yaml")
    assert config.dims.d == 512
    report = ExperimentOrchestrator(threads=2).run(config)
    assert _check(report, "relative_difference").value <= 0.20
    assert report.passed, [c.name for c in report.failed_checks()]
