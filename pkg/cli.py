import logging
from pathlib import Path
from typing import Callable, List, Optional, TypeVar

import typer
from dotenv import load_dotenv

from config_loader import load_run_config
from factories.pipeline_factory import PipelineFactory
from models.config import RunConfig

load_dotenv()

app = typer.Typer(help="Multi-task GP + causal attention risk trajectories: synth, train, predict, evaluate, importance.")

T = TypeVar("T")

CONFIG_HELP = "Run config TOML (default: $MGPMS_CONFIG, else built-in defaults)"
SET_HELP = "Override any config field, e.g. --set train.dropout=0.1 (repeatable)"


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _fail(e: Exception):
    message = " ".join(str(e).split())
    typer.echo(f"error: {type(e).__name__}: {message}", err=True)
    raise typer.Exit(code=1)


def _guarded(action: Callable[[], T]) -> T:
    """Run a command body; any failure becomes one stderr line and exit code 1"""
    try:
        return action()
    except typer.Exit:
        raise
    except Exception as e:
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        _fail(e)


def _resolve(config: Optional[str], assignments: Optional[List[str]], **overrides) -> RunConfig:
    dotted = {
        "seed": overrides.get("seed"),
        "threads": overrides.get("threads"),
        "train.epochs": overrides.get("epochs"),
        "train.mc_samples": overrides.get("mc_samples"),
    }
    return load_run_config(config, dotted, assignments or [])


@app.command()
def synth(
        out: str = typer.Option(..., "--out", help="Output directory for cohort.jsonl + manifest.toml"),
        n: Optional[int] = typer.Option(None, "--n", help="Number of patients (default from config)"),
        prevalence: Optional[float] = typer.Option(None, "--prevalence", help="Ventilation prevalence (default 0.1558)"),
        seed: Optional[int] = typer.Option(None, "--seed"),
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Generate a synthetic cohort file and its manifest."""
    def run():
        run_config = _resolve(config, assignments, seed=seed)
        factory = PipelineFactory(run_config, out)
        patients, summary = factory.synthesize(n_patients=n, prevalence=prevalence)
        typer.echo(f"Wrote {len(patients)} patients to {Path(out) / 'cohort.jsonl'}")
        typer.echo(f"Eligible after truncation: {summary.eligible} ({summary.positives} positive), "
                   f"excluded: {summary.n_excluded}")
        for reason, count in sorted(summary.excluded.items()):
            typer.echo(f"   {reason}: {count}")

    _guarded(run)


@app.command()
def train(
        cohort: str = typer.Option(..., "--cohort", help="Cohort JSON-lines file"),
        out: str = typer.Option(..., "--out", help="Output directory for model.json and train_log.jsonl"),
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        epochs: Optional[int] = typer.Option(None, "--epochs"),
        seed: Optional[int] = typer.Option(None, "--seed"),
        threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads for per-patient posteriors"),
        mc_samples: Optional[int] = typer.Option(None, "--mc-samples"),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Truncate, window, split and jointly train θ and ω."""
    def run():
        run_config = _resolve(config, assignments, seed=seed, threads=threads, epochs=epochs, mc_samples=mc_samples)
        factory = PipelineFactory(run_config, out)
        result = factory.train(cohort)
        last = result.log[-1]
        typer.echo(f"Trained {len(result.log)} epochs, final train loss {last.train_loss:.5f}"
                   + (f", val AUC {last.val_auc:.4f}" if last.val_auc is not None else ""))
        typer.echo(f"Checkpoint: {factory.output_dir / 'model.json'}")

    _guarded(run)


@app.command()
def predict(
        model: str = typer.Option(..., "--model", help="Checkpoint written by train"),
        cohort: str = typer.Option(..., "--cohort"),
        out: str = typer.Option(..., "--out"),
        online: bool = typer.Option(False, "--online", help="Score window j from observations in windows <= j only"),
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        seed: Optional[int] = typer.Option(None, "--seed"),
        threads: Optional[int] = typer.Option(None, "--threads"),
        mc_samples: Optional[int] = typer.Option(None, "--mc-samples"),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Write per-patient risk trajectories (patient_id, window, hour, logit, probability, mc_probability)."""
    def run():
        run_config = _resolve(config, assignments, seed=seed, threads=threads, mc_samples=mc_samples)
        factory = PipelineFactory(run_config, out)
        trajectories = factory.predict(model, cohort, online=online)
        typer.echo(f"Scored {len(trajectories)} patients -> {factory.output_dir / 'trajectories.csv'}")

    _guarded(run)


@app.command()
def evaluate(
        cohort: str = typer.Option(..., "--cohort", help="Labelled cohort to evaluate on (e.g. test_cohort.jsonl)"),
        out: str = typer.Option(..., "--out"),
        model: Optional[str] = typer.Option(None, "--model"),
        trajectories: Optional[List[str]] = typer.Option(None, "--trajectories",
                                                        help="External (patient_id, window, score) CSV; repeatable"),
        every_window: bool = typer.Option(False, "--every-window", help="AUC/AUPRC at every grid window"),
        svg: bool = typer.Option(False, "--svg", help="Also write SVG charts"),
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        seed: Optional[int] = typer.Option(None, "--seed"),
        threads: Optional[int] = typer.Option(None, "--threads"),
        mc_samples: Optional[int] = typer.Option(None, "--mc-samples"),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Timepoint AUC/AUPRC table, trajectory summaries and model comparison."""
    def run():
        run_config = _resolve(config, assignments, seed=seed, threads=threads, mc_samples=mc_samples)
        factory = PipelineFactory(run_config, out)
        result = factory.evaluate(cohort, model_path=model, trajectory_paths=trajectories or [],
                                  every_window=every_window, svg=svg)
        typer.echo(result["table"].to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        typer.echo(f"Outputs in {factory.output_dir}")

    _guarded(run)


@app.command()
def importance(
        cohort: str = typer.Option(..., "--cohort"),
        out: str = typer.Option(..., "--out"),
        features: Optional[str] = typer.Option(None, "--features", help="Comma-separated subset (default: all)"),
        top_k: Optional[int] = typer.Option(None, "--top-k", help="Rows in the top-k view (default 15)"),
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        epochs: Optional[int] = typer.Option(None, "--epochs", help="Epochs per retrain"),
        seed: Optional[int] = typer.Option(None, "--seed"),
        threads: Optional[int] = typer.Option(None, "--threads", help="Concurrent retrains"),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Drop-feature retraining importance ranking."""
    def run():
        run_config = _resolve(config, assignments, seed=seed, threads=threads)
        updates = {}
        if epochs is not None:
            updates["epochs"] = epochs
        if top_k is not None:
            updates["top_k"] = top_k
        if updates:
            run_config = run_config.model_copy(update={"importance": run_config.importance.model_copy(update=updates)})
        factory = PipelineFactory(run_config, out)
        selected = [f.strip() for f in features.split(",") if f.strip()] if features else None
        report = factory.importance(cohort, selected)
        typer.echo(f"Noise band (baseline loss spread): {report.noise_band:.5f}")
        for rank, row in enumerate(report.top(run_config.importance.top_k), start=1):
            typer.echo(f"{rank:>3}. {row.feature:<24} {row.importance:+.5f}")

    _guarded(run)


@app.command()
def show_config(
        config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
        assignments: Optional[List[str]] = typer.Option(None, "--set", help=SET_HELP),
):
    """Print the fully resolved run config as TOML."""
    _guarded(lambda: typer.echo(_resolve(config, assignments).to_toml()))
