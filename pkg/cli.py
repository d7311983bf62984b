import functools
import json
import logging
import re

import click
import numpy as np

from config import DeskDefaults, LabConfig
from exceptions import AcceptanceFailure, LabError
from experiment_models import DEFAULT_SETTINGS, default_config, load_experiment_config
from experiment_orchestrator import ExperimentOrchestrator
from lora_engine import check_compatible, load_adapter, penalty, rank_one_edit, save_adapter
from logging_config import configure_logging
from models import (
    ArrowCombinator,
    CatCombinator,
    EditMode,
    LinearMerge,
    ModelDims,
    OneHop,
    SumCombinator,
    TwoHop,
    UniformMerge,
)
from report_service import write_report
from routing_service import combine, with_fitted_weights
from transformer_engine import (
    features,
    fit_w,
    init_params,
    load_params,
    predict,
    recall_accuracy,
    save_params,
)
from world_engine import gen_world, load_world, save_world, stored_facts

logger = logging.getLogger(__name__)

EXPERIMENTS = sorted(DEFAULT_SETTINGS)


class PromptType(click.ParamType):
    """`x3 r0` (one hop) or `x3 r0 r2` (two hops)."""
    name = "prompt"
    _pattern = re.compile(r"^x(\d+) r(\d+)(?: r(\d+))?$")

    def convert(self, value, param, ctx):
        if isinstance(value, (OneHop, TwoHop)):
            return value
        match = self._pattern.match(value.strip())
        if not match:
            self.fail(f"{value!r} is not a prompt like 'x3 r0' or 'x3 r0 r2'", param, ctx)
        subject, rel1, rel2 = match.groups()
        if rel2 is None:
            return OneHop(subject=int(subject), rel=int(rel1))
        return TwoHop(subject=int(subject), rel1=int(rel1), rel2=int(rel2))


PROMPT = PromptType()


def handle_lab_errors(command):
    """Turn LabError into a one-line diagnostic and exit status 1."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except LabError as e:
            logger.error(f"{e.__class__.__name__}: {e.message}", extra={"details": e.details})
            raise click.ClickException(f"{e.__class__.__name__}: {e.message}")
    return wrapper


def build_combinator(strategy: str, weights, temperature: float):
    if strategy == "sum":
        return SumCombinator()
    if strategy == "uniform":
        return UniformMerge()
    if strategy == "linear":
        return LinearMerge(weights=list(weights))
    if strategy == "cat":
        return CatCombinator(weights=list(weights) if weights else None)
    return ArrowCombinator(temperature=temperature)


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, default=str))


@click.group()
@click.option('--seed', type=int, default=None,
              help='Seed for generators; offsets the config seed list for `run`')
@click.option('--out-dir', type=click.Path(file_okay=False), default=LabConfig.OUT_DIR, show_default=True,
              help='Directory for report files')
@click.option('--threads', type=click.IntRange(min=1), default=LabConfig.THREADS, show_default=True,
              help='Worker threads for independent trials')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Experiment config (YAML)')
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              default=LabConfig.LOG_LEVEL, show_default=True)
@click.option('--log-format', type=click.Choice(['json', 'plain']), default=LabConfig.LOG_FORMAT,
              show_default=True)
@click.pass_context
def cli(ctx, seed, out_dir, threads, config_path, log_level, log_format):
    """Low-rank adapter composition laboratory"""
    configure_logging(log_level, log_format)
    ctx.obj = {
        "seed": seed,
        "out_dir": out_dir,
        "threads": threads,
        "config_path": config_path,
    }


@cli.command('gen-world')
@click.option('--entities', type=click.IntRange(min=2), default=DeskDefaults.NUM_ENTITIES, show_default=True)
@click.option('--relations', type=click.IntRange(min=1), default=DeskDefaults.NUM_RELATIONS, show_default=True)
@click.option('--density', type=click.FloatRange(0.0, 1.0, min_open=True), default=DeskDefaults.DENSITY,
              show_default=True)
@click.option('--output', type=click.Path(dir_okay=False), required=True, help='World JSON file to write')
@click.pass_obj
@handle_lab_errors
def gen_world_command(obj, entities, relations, density, output):
    """Generate a random world of partial-function relations"""
    world = gen_world(entities, relations, density, obj["seed"] or 0)
    save_world(world, output)
    _echo_json({"world": output, "entities": entities, "facts": len(world.facts)})


@cli.command('fit')
@click.option('--world', 'world_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--d', type=click.IntRange(min=2), default=DeskDefaults.D, show_default=True)
@click.option('--m', type=click.IntRange(min=1), default=DeskDefaults.M, show_default=True)
@click.option('--ridge', type=click.FloatRange(min=0.0), default=DeskDefaults.RIDGE, show_default=True)
@click.option('--two-hop/--one-hop-only', default=True, show_default=True,
              help='Also store every defined two-hop composition')
@click.option('--output', type=click.Path(dir_okay=False), required=True, help='Params .npz file to write')
@click.pass_obj
@handle_lab_errors
def fit_command(obj, world_path, d, m, ridge, two_hop, output):
    """Draw a model and fit its output map to the world's facts"""
    world = load_world(world_path)
    dims = ModelDims(d=d, m=m, num_entities=world.num_entities, num_relations=world.num_relations)
    params = init_params(dims, obj["seed"] or 0)
    facts = stored_facts(world, include_two_hop=two_hop)
    params = params.with_output(fit_w(params, facts, ridge=ridge))
    save_params(params, output)
    _echo_json({"params": output, "facts": len(facts), "recall": recall_accuracy(params, facts)})


@cli.command('edit')
@click.option('--params', 'params_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--prompt', type=PROMPT, required=True, help="Prompt to redirect, e.g. 'x3 r0'")
@click.option('--new-target', type=click.IntRange(min=0), required=True)
@click.option('--mode', type=click.Choice([m.value for m in EditMode]), default=EditMode.EXACT_REDIRECT.value,
              show_default=True)
@click.option('--output', type=click.Path(dir_okay=False), required=True, help='Adapter .npz file to write')
@handle_lab_errors
def edit_command(params_path, prompt, new_target, mode, output):
    """Build the rank-one adapter redirecting one prompt"""
    params = load_params(params_path)
    old, _ = predict(params, [prompt])
    adapter = rank_one_edit(params, prompt, int(old[0]), new_target, EditMode(mode))
    save_adapter(adapter, output)
    _echo_json({"adapter": output, "prompt": str(prompt), "old_target": int(old[0]),
                "new_target": new_target, "rank": adapter.rank, "penalty": penalty(adapter)})


@cli.command('combine')
@click.option('--params', 'params_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--adapter', 'adapter_paths', type=click.Path(exists=True, dir_okay=False), multiple=True,
              required=True)
@click.option('--strategy', type=click.Choice(['sum', 'uniform', 'linear', 'cat', 'arrow']), default='sum',
              show_default=True)
@click.option('--weight', 'weights', type=float, multiple=True, help='Per-adapter weight (linear, cat)')
@click.option('--temperature', type=click.FloatRange(min=0.0, min_open=True), default=1.0, show_default=True)
@click.option('--prompt', type=PROMPT, default=None, help='Query prompt (required for arrow)')
@click.option('--output', type=click.Path(dir_okay=False), default=None, help='Write the combined delta (.npy)')
@handle_lab_errors
def combine_command(params_path, adapter_paths, strategy, weights, temperature, prompt, output):
    """Combine adapters and report routing weights and the prompt's prediction"""
    params = load_params(params_path)
    adapters = [load_adapter(p) for p in adapter_paths]
    for adapter in adapters:
        check_compatible(adapter, params)
    combinator = build_combinator(strategy, weights, temperature)
    if isinstance(combinator, CatCombinator):
        combinator = with_fitted_weights(params, adapters, combinator)
    routed = combine(adapters, combinator, features(params, prompt) if prompt is not None else None)
    payload = {"strategy": strategy, "weights": routed.per_adapter_weights,
               "similarities": routed.similarities}
    if prompt is not None:
        preds, ties = predict(params, [prompt], routed.delta)
        payload.update(prompt=str(prompt), prediction=int(preds[0]), tie=bool(ties[0]))
    if output:
        np.save(output, routed.delta)
        payload["delta"] = output
    _echo_json(payload)


@cli.command('eval')
@click.option('--params', 'params_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--world', 'world_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--adapter', 'adapter_paths', type=click.Path(exists=True, dir_okay=False), multiple=True,
              help='Adapters to apply, summed')
@click.option('--two-hop/--one-hop-only', default=False, show_default=True)
@handle_lab_errors
def eval_command(params_path, world_path, adapter_paths, two_hop):
    """Recall accuracy of the model, optionally with adapters applied, on a world's facts"""
    params = load_params(params_path)
    world = load_world(world_path)
    facts = stored_facts(world, include_two_hop=two_hop)
    delta = None
    if adapter_paths:
        adapters = [load_adapter(p) for p in adapter_paths]
        for adapter in adapters:
            check_compatible(adapter, params)
        delta = combine(adapters, SumCombinator()).delta
    _echo_json({"facts": len(facts), "adapters": len(adapter_paths),
                "recall": recall_accuracy(params, facts, delta)})


def _execute(obj, config, check: bool) -> None:
    if obj["seed"] is not None:
        config = config.with_seed_offset(obj["seed"])
    out_dir = config.output.dir or obj["out_dir"]
    report = ExperimentOrchestrator(threads=obj["threads"]).run(config)
    paths = write_report(report, out_dir)
    _echo_json({"experiment": report.experiment, "passed": report.passed,
                "files": {k: str(v) for k, v in paths.items()},
                "checks": {c.name: c.passed for c in report.checks}})
    if check and not report.passed:
        raise AcceptanceFailure(
            "failed checks: " + ", ".join(c.name for c in report.failed_checks()),
            {"failed": [c.model_dump() for c in report.failed_checks()]},
        )


@cli.command('run')
@click.argument('experiment', type=click.Choice(EXPERIMENTS + [e.replace('_', '-') for e in EXPERIMENTS]))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Experiment config (YAML); overrides the global --config')
@click.option('--check', is_flag=True, help='Exit 1 when any acceptance check fails')
@click.pass_obj
@handle_lab_errors
def run_command(obj, experiment, config_path, check):
    """Run a configured experiment and write CSV, JSON and markdown reports"""
    experiment = experiment.replace('-', '_')
    config_path = config_path or obj["config_path"]
    config = load_experiment_config(config_path, experiment) if config_path else default_config(experiment)
    _execute(obj, config, check)


@cli.command('kernel-check')
@click.option('--m', 'widths', type=click.IntRange(min=1), multiple=True,
              help='Feature widths to test (repeatable); defaults to the config sweep')
@click.option('--d', type=click.IntRange(min=2), default=None, help='Input dimension (default from config)')
@click.option('--check', is_flag=True, help='Exit 1 when any acceptance check fails')
@click.pass_obj
@handle_lab_errors
def kernel_check_command(obj, widths, d, check):
    """Compare finite-width feature overlaps with the arc-cosine kernel"""
    if obj["config_path"]:
        config = load_experiment_config(obj["config_path"], "kernel_convergence")
    else:
        config = default_config("kernel_convergence")
    updates = {}
    if widths:
        updates["m_sweep"] = list(widths)
    if d is not None:
        updates["dims"] = config.dims.model_copy(update={"d": d})
    if updates:
        config = config.model_copy(update=updates)
    _execute(obj, config, check)


if __name__ == '__main__':
    cli()
