import sys
from functools import wraps

import click
import torch

from src.config import MODEL_NAMES, Scenario, load_experiment_config, settings
from src.exceptions import MetaCSError
from src.logging_config import setup_logger
from src.services.evaluation import ExperimentRunner
from src.services.experiments import DEFAULT_RATIO_POINTS, ablation_grid, ratio_sweep, report
from src.utils.serialization import save_taskset

logger = setup_logger("CLI")


EXPERIMENT_OPTIONS = (
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--seed", type=int, default=None, help="Master seed (model init and task sampling)."),
    click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory."),
    click.option("--scenario", type=click.Choice([s.value for s in Scenario]), default=None),
    click.option("--shots", type=click.Choice(["1", "5"]), default=None),
    click.option("--model", type=click.Choice(MODEL_NAMES), default=None),
    click.option("--tasks-dir", type=click.Path(file_okay=False), default=None, help="Task-set directory."),
)


def with_experiment_options(fn):
    for option in reversed(EXPERIMENT_OPTIONS):
        fn = option(fn)
    return fn


def experiment_options(fn):
    """
    --config/--seed/--out/--scenario/--shots/--model/--tasks-dir, folded into
    one ExperimentConfig. Accepted before the subcommand too; values given
    after it win.
    """
    @with_experiment_options
    @wraps(fn)
    def wrapper(config_path, seed, out, scenario, shots, model, tasks_dir, **kwargs):
        given = {"config_path": config_path, "seed": seed, "out": out, "scenario": scenario,
                 "shots": shots, "model": model, "tasks_dir": tasks_dir}
        inherited = click.get_current_context().find_root().obj or {}
        opts = {k: inherited.get(k) if v is None else v for k, v in given.items()}
        overrides = {
            "seed": opts["seed"],
            "output_dir": opts["out"],
            "model": opts["model"],
            "tasks_dir": opts["tasks_dir"],
            "scenario.scenario": opts["scenario"],
            "scenario.shots": opts["shots"],
        }
        cfg = load_experiment_config(opts["config_path"], overrides)
        return fn(cfg, **kwargs)
    return wrapper


@click.group(help="Few-shot community search: task preparation, training, evaluation and reports.")
@with_experiment_options
@click.pass_context
def app(ctx, **options):
    ctx.obj = options
    if settings.TORCH_THREADS:
        torch.set_num_threads(settings.TORCH_THREADS)


@app.command("prepare-tasks")
@experiment_options
def prepare_tasks(cfg):
    """Build and serialize the train/valid/test task sets."""
    tasks_dir = cfg.tasks_dir or cfg.output_dir / "tasks"
    runner = ExperimentRunner(cfg.model_copy(update={"tasks_dir": None}))
    taskset = runner.build_tasks()
    save_taskset(taskset, tasks_dir, cfg.scenario.model_dump(mode="json"), cfg.seed)
    click.echo(f"{len(taskset.train)}/{len(taskset.valid)}/{len(taskset.test)} tasks written to {tasks_dir}")


@app.command()
@experiment_options
def train(cfg):
    """Fit the configured model and write its checkpoint."""
    runner = ExperimentRunner(cfg)
    searcher, seconds = runner.train(runner.build_tasks())
    click.echo(f"Trained {searcher.name} in {seconds:.1f}s")


@app.command()
@experiment_options
def evaluate(cfg):
    """Evaluate a trained checkpoint on the test tasks."""
    table = ExperimentRunner(cfg).run(train=False)
    click.echo(f"F1={table.means['f1']:.4f} -> {table.paths['results']}")


@app.command()
@experiment_options
def run(cfg):
    """Train then evaluate in one go."""
    table = ExperimentRunner(cfg).run()
    click.echo(f"F1={table.means['f1']:.4f} -> {table.paths['results']}")


@app.command()
@experiment_options
def baseline(cfg):
    """Evaluate an algorithmic method (ctc or kcore)."""
    if cfg.model not in ("ctc", "kcore"):
        cfg = cfg.model_copy(update={"model": "ctc"})
    table = ExperimentRunner(cfg).run()
    click.echo(f"{cfg.model}: F1={table.means['f1']:.4f} -> {table.paths['results']}")


def _points(value: str):
    try:
        return [tuple(float(x) for x in p.split(":")) for p in value.split(",") if p]
    except ValueError as e:
        raise click.BadParameter(f"expected 'pos:neg,pos:neg,...', got '{value}'") from e


@app.command("sweep-ratio")
@click.option("--points", default=",".join(f"{p}:{n}" for p, n in DEFAULT_RATIO_POINTS),
              help="Ordered pos%:neg% pairs.")
@click.option("--models", default=None, help="Comma-separated model names (default: --model).")
@experiment_options
def sweep_ratio(cfg, points, models):
    """F1 as the labelled fraction of each support query grows."""
    names = [m for m in (models or "").split(",") if m] or None
    unknown = [m for m in names or [] if m not in MODEL_NAMES]
    if unknown:
        raise click.BadParameter(f"unknown models {unknown}")
    df = ratio_sweep(cfg, _points(points), names)
    click.echo(df.to_string(index=False))


@app.command()
@experiment_options
def ablate(cfg):
    """Encoder sweep (average pooling) and combine sweep (GAT encoder)."""
    df = ablation_grid(cfg)
    click.echo(df.to_string(index=False))


@app.command("report")
@click.argument("paths", nargs=-1, required=True, type=click.Path())
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the table as CSV.")
def report_cmd(paths, out):
    """Aggregate run summaries into one comparison table."""
    df = report(paths, out)
    click.echo(df.to_string(index=False))


def cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        with click.Context(app, info_name="meta-cs") as ctx:
            click.echo(app.get_help(ctx), err=True)
        return 2
    try:
        result = app.main(args=argv, prog_name="meta-cs", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except (MetaCSError, OSError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(cli())
