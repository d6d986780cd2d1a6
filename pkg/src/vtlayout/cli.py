"""Command-line pipeline: synth, extract, train, evaluate, ablate, cv, report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime or
divergence error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .cache import FeatureCache
from .config import PipelineConfig, load_config
from .corpus import load_coco_annotations, save_corpus
from .errors import ConfigurationError, DataError, VTLayoutError
from .evaluation import (
    five_fold_cv,
    render_record,
    run_ablation,
    write_report,
)
from .fusion import TrainConfig, build_model, load_model, save_model, train
from .pipeline import ExtractionStats, evaluate_with_localizer, extract_features
from .synth import SynthSpec, generate_synthetic_corpus


def _die(exc: BaseException, code: int) -> None:
    click.echo(f"error: {exc}", err=True)
    raise SystemExit(code)


def pipeline_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigurationError as exc:
            _die(exc, 1)
        except DataError as exc:
            _die(exc, 2)
        except VTLayoutError as exc:
            _die(exc, 3)
    return wrapper


def config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      default=None, help="Pipeline config JSON.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
                      help="Override a config key, e.g. --set train.epochs=5.")(fn)
    return fn


def _config(config_path, overrides) -> PipelineConfig:
    return load_config(config_path, overrides)


def _load_corpus(path):
    p = Path(path)
    if p.is_dir():
        p = p / "annotations.json"
    return load_coco_annotations(p)


def _cache(config: PipelineConfig, cache_dir) -> FeatureCache:
    if cache_dir is not None:
        return FeatureCache(cache_dir)
    return FeatureCache(config.resolve_cache_dir())


@click.group()
def cli():
    """Two-stage document layout analysis pipeline."""


@cli.command()
@config_options
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--pages", type=int, default=None, help="Shortcut for corpus.synth.pages.")
@click.option("--force", is_flag=True, help="Overwrite an existing corpus directory.")
@pipeline_command
def synth(config_path, overrides, out_dir, pages, force):
    """Generate a synthetic corpus on disk."""
    config = _config(config_path, overrides)
    section = config.corpus.synth
    spec = SynthSpec(
        pages=pages if pages is not None else section.pages,
        width=section.width,
        height=section.height,
        val_fraction=section.val_fraction,
        category_weights=section.category_weights(),
    )
    out = Path(out_dir)
    if (out / "annotations.json").exists() and not force:
        raise ConfigurationError(f"{out} already holds a corpus; pass --force to overwrite")
    corpus = generate_synthetic_corpus(spec, seed=config.seed)
    save_corpus(corpus, out)
    click.echo(json.dumps({
        "pages": len(corpus.pages),
        "annotations": len(corpus.annotations),
        "out": str(out),
    }))


@cli.command()
@config_options
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None,
              help="Cache directory (defaults to config cache_dir or $VTLAYOUT_CACHE_DIR).")
@pipeline_command
def extract(config_path, overrides, corpus_path, cache_dir):
    """Populate the feature cache for the active extractors."""
    config = _config(config_path, overrides)
    corpus = _load_corpus(corpus_path)
    cache = _cache(config, cache_dir)
    stats = ExtractionStats()
    table, _ = extract_features(corpus, config, config.train.mask, cache=cache, stats=stats)
    click.echo(json.dumps({
        "blocks": len(table),
        "computed": stats.computed,
        "skipped": stats.skipped,
        "cache": str(cache.root),
    }, sort_keys=True))


def _train_config(config: PipelineConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=config.train.lr,
        batch_size=config.train.batch_size,
        epochs=config.train.epochs,
        seed=config.train_seed,
        class_weights=config.train.class_weights,
        weight_decay=config.train.weight_decay,
    )


@cli.command(name="train")
@config_options
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)
@click.option("--out", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None)
@pipeline_command
def train_cmd(config_path, overrides, corpus_path, cache_dir, model_path, trace_path):
    """Train the fusion classifier from cached features."""
    config = _config(config_path, overrides)
    corpus = _load_corpus(corpus_path)
    cache = _cache(config, cache_dir)
    table, computer = extract_features(corpus, config, config.train.mask,
                                       cache=cache, compute=False)
    train_idx = table.indices_for_split("train")
    if train_idx.size == 0:
        raise DataError("corpus has no blocks in the train split")
    model = build_model(config.train.mask, channels=computer.channels,
                        vocab_size=computer.vocab_size, seed=config.train_seed,
                        se_ratio=config.dvfe.se_ratio)
    model.config_fingerprint = config.fingerprint()
    _, trace = train(model, table.bundles(train_idx, config.train.mask), _train_config(config))
    save_model(model, model_path)
    if trace_path:
        Path(trace_path).write_text(json.dumps({
            "loss": trace,
            "config_fingerprint": model.config_fingerprint,
        }, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(json.dumps({
        "model": str(model_path),
        "final_loss": trace[-1],
        "epochs": len(trace),
        "train_blocks": int(train_idx.size),
    }, sort_keys=True))


@cli.command()
@config_options
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@pipeline_command
def evaluate(config_path, overrides, corpus_path, model_path, cache_dir, out_dir):
    """Localize, match, classify, and report on the evaluation split."""
    config = _config(config_path, overrides)
    corpus = _load_corpus(corpus_path)
    model = load_model(model_path)
    if model.config_fingerprint and model.config_fingerprint != config.fingerprint():
        raise ConfigurationError(
            f"model was trained under config fingerprint {model.config_fingerprint}, "
            f"current config is {config.fingerprint()}")
    cache = None
    try:
        cache = _cache(config, cache_dir)
    except ConfigurationError:
        pass  # evaluation can run uncached
    report = evaluate_with_localizer(corpus, config, model, cache=cache)
    txt_path, json_path = write_report(report, out_dir, "evaluation")
    click.echo(json.dumps({
        "macro_f1": report.macro_f1,
        "matched": report.matched_total,
        "unmatched_gt": report.unmatched_gt_total,
        "unmatched_pred": report.unmatched_pred_total,
        "report_txt": str(txt_path),
        "report_json": str(json_path),
    }, sort_keys=True))


@cli.command()
@config_options
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@pipeline_command
def ablate(config_path, overrides, corpus_path, cache_dir, out_dir):
    """Run the seven-row extractor ablation."""
    config = _config(config_path, overrides)
    corpus = _load_corpus(corpus_path)
    cache = _cache(config, cache_dir)
    stats = ExtractionStats()
    table, computer = extract_features(corpus, config, ("dvfe", "svfe", "tfe"),
                                       cache=cache, stats=stats)
    train_idx = table.indices_for_split("train")
    eval_idx = table.indices_for_split(config.eval.split)
    if train_idx.size == 0 or eval_idx.size == 0:
        raise DataError("ablation needs non-empty train and evaluation splits")
    result = run_ablation(
        lambda mask: table.bundles(train_idx, mask),
        lambda mask: table.bundles(eval_idx, mask),
        channels=computer.channels,
        vocab_size=computer.vocab_size,
        train_cfg=_train_config(config),
        seed=config.train_seed,
        se_ratio=config.dvfe.se_ratio,
        config_fingerprint=config.fingerprint(),
    )
    txt_path, json_path = write_report(result, out_dir, "ablation")
    click.echo(json.dumps({
        "rows": [{"mask": label, "macro_f1": rep.macro_f1} for label, rep in result.rows],
        "extracted": stats.computed,
        "skipped": stats.skipped,
        "report_txt": str(txt_path),
        "report_json": str(json_path),
    }, sort_keys=True))


@cli.command()
@config_options
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@pipeline_command
def cv(config_path, overrides, corpus_path, cache_dir, out_dir):
    """Five-fold cross-validation over all labeled blocks."""
    config = _config(config_path, overrides)
    corpus = _load_corpus(corpus_path)
    cache = _cache(config, cache_dir)
    stats = ExtractionStats()
    table, computer = extract_features(corpus, config, config.train.mask,
                                       cache=cache, stats=stats)
    result = five_fold_cv(
        table.bundles(range(len(table)), config.train.mask),
        channels=computer.channels,
        vocab_size=computer.vocab_size,
        train_cfg=_train_config(config),
        seed=config.train_seed,
        mask=frozenset(config.train.mask),
        se_ratio=config.dvfe.se_ratio,
        config_fingerprint=config.fingerprint(),
    )
    txt_path, json_path = write_report(result, out_dir, "cv")
    click.echo(json.dumps({
        "fold_macro_f1": [r.macro_f1 for r in result.fold_reports],
        "average_macro_f1": result.average_macro_f1,
        "extracted": stats.computed,
        "report_txt": str(txt_path),
        "report_json": str(json_path),
    }, sort_keys=True))


@cli.command()
@click.option("--in", "record_path", required=True, type=click.Path(exists=True, dir_okay=False))
@pipeline_command
def report(record_path):
    """Render a machine-readable report record as an aligned table."""
    record = json.loads(Path(record_path).read_text(encoding="utf-8"))
    click.echo(render_record(record))


def main(argv=None):
    try:
        cli(args=argv, standalone_mode=False)
    except SystemExit:
        raise
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(130)
    except ConfigurationError as exc:
        _die(exc, 1)
    except DataError as exc:
        _die(exc, 2)
    except VTLayoutError as exc:
        _die(exc, 3)
    return 0


if __name__ == "__main__":
    main()
