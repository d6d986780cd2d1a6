"""Metrics and the experiment matrix: per-category precision/recall/F1,
ablations over extractor masks, five-fold cross-validation, and the
small-dataset stability sample, plus text/JSON report rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .categories import CATEGORIES, CATEGORY_LABELS, NUM_CATEGORIES, Category
from .corpus import BlockAnnotation, Corpus
from .errors import ConfigurationError, DataError
from .fusion import (
    FeatureBundle,
    FusionModel,
    TrainConfig,
    build_model,
    predict_batch,
    train,
)

# The seven ablation rows, in fixed presentation order.
ABLATION_ROWS: tuple[tuple[str, frozenset[str]], ...] = (
    ("DVFE+SVFE+TFE", frozenset({"dvfe", "svfe", "tfe"})),
    ("DVFE+SVFE", frozenset({"dvfe", "svfe"})),
    ("DVFE+TFE", frozenset({"dvfe", "tfe"})),
    ("SVFE+TFE", frozenset({"svfe", "tfe"})),
    ("DVFE", frozenset({"dvfe"})),
    ("TFE", frozenset({"tfe"})),
    ("SVFE", frozenset({"svfe"})),
)

N_FOLDS = 5

# Per-category sample sizes of the small-dataset stability protocol.
BASE_SAMPLE_COUNTS = {
    Category.TEXT: 25000,
    Category.TITLE: 25000,
    Category.FIGURE: 10000,
    Category.LIST: 10000,
    Category.TABLE: 10000,
}


def macro_average(values) -> float:
    """Unweighted mean, the aggregate used for every macro metric."""
    values = np.asarray(list(values), dtype=np.float64)
    return float(values.mean())


@dataclass
class ConfusionMatrix:
    """5x5 counts (rows ground truth, columns predicted) plus per-category
    tallies of unmatched ground-truth and unmatched predicted blocks."""

    counts: np.ndarray
    unmatched_gt: np.ndarray
    unmatched_pred: np.ndarray

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls(
            counts=np.zeros((NUM_CATEGORIES, NUM_CATEGORIES), dtype=np.int64),
            unmatched_gt=np.zeros(NUM_CATEGORIES, dtype=np.int64),
            unmatched_pred=np.zeros(NUM_CATEGORIES, dtype=np.int64),
        )

    @property
    def matched_total(self) -> int:
        return int(self.counts.sum())


def confusion(matched, unmatched_gt=(), unmatched_pred=()) -> ConfusionMatrix:
    """Tally (gt, pred) category pairs and the unmatched leftovers.

    An unmatched ground-truth block of class c is a false negative for c; an
    unmatched prediction classified as k is a false positive for k.
    """
    m = ConfusionMatrix.empty()
    for gt, pred in matched:
        m.counts[int(gt), int(pred)] += 1
    for gt in unmatched_gt:
        m.unmatched_gt[int(gt)] += 1
    for pred in unmatched_pred:
        m.unmatched_pred[int(pred)] += 1
    return m


@dataclass
class EvalReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    matched_total: int
    unmatched_gt: tuple[int, ...] = (0,) * NUM_CATEGORIES
    unmatched_pred: tuple[int, ...] = (0,) * NUM_CATEGORIES
    zero_denominator: tuple[str, ...] = ()
    config_fingerprint: str | None = None
    confusion_counts: list[list[int]] | None = None

    @property
    def unmatched_gt_total(self) -> int:
        return sum(self.unmatched_gt)

    @property
    def unmatched_pred_total(self) -> int:
        return sum(self.unmatched_pred)

    def to_dict(self) -> dict:
        return {
            "per_category": {
                label: {"precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]}
                for i, label in enumerate(CATEGORY_LABELS)
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "matched_total": self.matched_total,
            "unmatched_gt": list(self.unmatched_gt),
            "unmatched_pred": list(self.unmatched_pred),
            "zero_denominator": list(self.zero_denominator),
            "config_fingerprint": self.config_fingerprint,
            "confusion_counts": self.confusion_counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = d["per_category"]
        return cls(
            precision=tuple(per[label]["precision"] for label in CATEGORY_LABELS),
            recall=tuple(per[label]["recall"] for label in CATEGORY_LABELS),
            f1=tuple(per[label]["f1"] for label in CATEGORY_LABELS),
            macro_precision=d["macro"]["precision"],
            macro_recall=d["macro"]["recall"],
            macro_f1=d["macro"]["f1"],
            matched_total=d["matched_total"],
            unmatched_gt=tuple(d.get("unmatched_gt", (0,) * NUM_CATEGORIES)),
            unmatched_pred=tuple(d.get("unmatched_pred", (0,) * NUM_CATEGORIES)),
            zero_denominator=tuple(d.get("zero_denominator", ())),
            config_fingerprint=d.get("config_fingerprint"),
            confusion_counts=d.get("confusion_counts"),
        )


def prf(matrix: ConfusionMatrix, config_fingerprint: str | None = None) -> EvalReport:
    """Per-category precision/recall/F1 and their unweighted macro means.

    False positives for class c include unmatched predictions of class c;
    false negatives include unmatched ground truth of class c. Zero
    denominators yield 0 and are flagged.
    """
    precision, recall, f1, flags = [], [], [], []
    for c in range(NUM_CATEGORIES):
        tp = float(matrix.counts[c, c])
        fp = float(matrix.counts[:, c].sum() - matrix.counts[c, c] + matrix.unmatched_pred[c])
        fn = float(matrix.counts[c, :].sum() - matrix.counts[c, c] + matrix.unmatched_gt[c])
        if tp + fp > 0:
            p = tp / (tp + fp)
        else:
            p = 0.0
            flags.append(f"{CATEGORY_LABELS[c]}:precision")
        if tp + fn > 0:
            r = tp / (tp + fn)
        else:
            r = 0.0
            flags.append(f"{CATEGORY_LABELS[c]}:recall")
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return EvalReport(
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        macro_precision=macro_average(precision),
        macro_recall=macro_average(recall),
        macro_f1=macro_average(f1),
        matched_total=matrix.matched_total,
        unmatched_gt=tuple(int(v) for v in matrix.unmatched_gt),
        unmatched_pred=tuple(int(v) for v in matrix.unmatched_pred),
        zero_denominator=tuple(flags),
        config_fingerprint=config_fingerprint,
        confusion_counts=matrix.counts.tolist(),
    )


# ---------------------------------------------------------------------------
# Experiment harness

def evaluate_classification(model: FusionModel, bundles: list[FeatureBundle],
                            config_fingerprint: str | None = None) -> EvalReport:
    """Score a classifier on labeled bundles (every block counts as matched)."""
    if not bundles:
        raise DataError("no bundles to evaluate")
    preds = predict_batch(model, bundles)
    pairs = [(b.label, p.category) for b, p in zip(bundles, preds)]
    return prf(confusion(pairs), config_fingerprint=config_fingerprint)


@dataclass
class AblationResult:
    rows: list[tuple[str, EvalReport]]
    train_config: TrainConfig
    seed: int

    def report_for(self, label: str) -> EvalReport:
        for row_label, report in self.rows:
            if row_label == label:
                return report
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "kind": "ablation",
            "seed": self.seed,
            "rows": [{"mask": label, "report": rep.to_dict()} for label, rep in self.rows],
        }


def run_ablation(train_bundles_by_mask, eval_bundles_by_mask, channels: int,
                 vocab_size: int, train_cfg: TrainConfig, seed: int = 0,
                 se_ratio: int = 16, config_fingerprint: str | None = None) -> AblationResult:
    """Train and score one model per ablation row with identical seed/splits.

    The bundle providers are callables mask -> list[FeatureBundle] so the
    caller controls feature caching.
    """
    rows = []
    for label, mask in ABLATION_ROWS:
        model = build_model(mask, channels=channels, vocab_size=vocab_size,
                            seed=seed, se_ratio=se_ratio)
        train(model, train_bundles_by_mask(mask), train_cfg)
        report = evaluate_classification(model, eval_bundles_by_mask(mask),
                                         config_fingerprint=config_fingerprint)
        rows.append((label, report))
    return AblationResult(rows=rows, train_config=train_cfg, seed=seed)


def stratified_folds(labels: np.ndarray, seed: int, n_folds: int = N_FOLDS) -> np.ndarray:
    """Assign each labeled block to one of n_folds folds, stratified by
    category: per category the shuffled items go round-robin across folds,
    so fold sizes differ by at most one within every category."""
    labels = np.asarray(labels)
    assignment = np.full(labels.shape[0], -1, dtype=np.int64)
    for cat in CATEGORIES:
        idx = np.flatnonzero(labels == int(cat))
        if idx.size < n_folds:
            raise ConfigurationError(
                f"five-fold CV needs at least {n_folds} blocks per category; "
                f"{cat.label} has {idx.size}")
        rng = np.random.default_rng([seed, int(cat)])
        shuffled = idx[rng.permutation(idx.size)]
        for i, block in enumerate(shuffled):
            assignment[block] = i % n_folds
    return assignment


@dataclass
class CvResult:
    fold_reports: list[EvalReport]
    average_f1: tuple[float, ...]
    average_macro_f1: float
    assignment: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {
            "kind": "five_fold_cv",
            "seed": self.seed,
            "folds": [r.to_dict() for r in self.fold_reports],
            "average_f1": {label: self.average_f1[i] for i, label in enumerate(CATEGORY_LABELS)},
            "average_macro_f1": self.average_macro_f1,
            "fold_assignment": self.assignment.tolist(),
        }


def five_fold_cv(bundles: list[FeatureBundle], channels: int, vocab_size: int,
                 train_cfg: TrainConfig, seed: int = 0, mask=frozenset({"dvfe", "svfe", "tfe"}),
                 se_ratio: int = 16, config_fingerprint: str | None = None) -> CvResult:
    """Stratified five-fold cross-validation; each fold is the test set once.

    Fold averages are unweighted means over the five fold reports.
    """
    labels = np.array([int(b.label) for b in bundles])
    assignment = stratified_folds(labels, seed)
    fold_reports = []
    for fold in range(N_FOLDS):
        test_idx = np.flatnonzero(assignment == fold)
        train_idx = np.flatnonzero(assignment != fold)
        model = build_model(mask, channels=channels, vocab_size=vocab_size,
                            seed=seed, se_ratio=se_ratio)
        train(model, [bundles[i] for i in train_idx], train_cfg)
        fold_reports.append(evaluate_classification(
            model, [bundles[i] for i in test_idx], config_fingerprint=config_fingerprint))
    avg_f1 = tuple(macro_average(r.f1[c] for r in fold_reports) for c in range(NUM_CATEGORIES))
    return CvResult(
        fold_reports=fold_reports,
        average_f1=avg_f1,
        average_macro_f1=macro_average(r.macro_f1 for r in fold_reports),
        assignment=assignment,
        seed=seed,
    )


@dataclass
class SampleResult:
    corpus: Corpus
    scale: float
    targets: dict[Category, int]
    taken: dict[Category, int]
    ann_ids: tuple[str, ...]


def sample_annotations(annotations: list[BlockAnnotation], seed: int,
                       base_counts=None) -> tuple[list[BlockAnnotation], float, dict, dict]:
    """Per-category random sample at the small-dataset protocol ratios.

    The scale factor is base Text count over available Text count (floored
    at 1); per-category targets are base/scale, capped by availability.
    """
    base = dict(BASE_SAMPLE_COUNTS if base_counts is None else base_counts)
    by_cat: dict[Category, list[int]] = {c: [] for c in CATEGORIES}
    for i, ann in enumerate(annotations):
        if ann.category is not None:
            by_cat[ann.category].append(i)
    avail_text = len(by_cat[Category.TEXT])
    if avail_text == 0:
        raise DataError("cannot scale the sample: corpus has no Text blocks")
    scale = max(1.0, base[Category.TEXT] / avail_text)
    targets, taken, chosen = {}, {}, []
    for cat in CATEGORIES:
        targets[cat] = int(round(base[cat] / scale))
        pool = by_cat[cat]
        k = min(targets[cat], len(pool))
        taken[cat] = k
        rng = np.random.default_rng([seed, int(cat), 0x5a])
        picked = rng.permutation(len(pool))[:k]
        chosen.extend(pool[i] for i in picked)
    chosen.sort()
    return [annotations[i] for i in chosen], scale, targets, taken


def small_dataset_sample(corpus: Corpus, seed: int, base_counts=None) -> SampleResult:
    """Sub-corpus sampled at the 25k:25k:10k:10k:10k category ratios."""
    sampled, scale, targets, taken = sample_annotations(corpus.annotations, seed, base_counts)
    keep = {a.ann_id for a in sampled}
    texts = None
    if corpus.block_texts is not None:
        texts = {k: v for k, v in corpus.block_texts.items() if k in keep}
    sub = Corpus(pages=corpus.pages, annotations=sampled, splits=dict(corpus.splits),
                 block_texts=texts)
    return SampleResult(corpus=sub, scale=scale, targets=targets, taken=taken,
                        ann_ids=tuple(a.ann_id for a in sampled if a.ann_id is not None))


# ---------------------------------------------------------------------------
# Rendering

def _format_row(cells, widths):
    return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()


def render_eval_report(report: EvalReport) -> str:
    widths = (10, 10, 10, 10)
    lines = [_format_row(("category", "precision", "recall", "f1"), widths)]
    for i, label in enumerate(CATEGORY_LABELS):
        lines.append(_format_row(
            (label, f"{report.precision[i]:.4f}", f"{report.recall[i]:.4f}", f"{report.f1[i]:.4f}"),
            widths))
    lines.append(_format_row(
        ("macro", f"{report.macro_precision:.4f}", f"{report.macro_recall:.4f}",
         f"{report.macro_f1:.4f}"), widths))
    lines.append(f"matched={report.matched_total} unmatched_gt={report.unmatched_gt_total} "
                 f"unmatched_pred={report.unmatched_pred_total}")
    return "\n".join(lines)


def render_ablation(result: AblationResult) -> str:
    widths = (16,) + (8,) * NUM_CATEGORIES + (8,)
    lines = [_format_row(("mask",) + CATEGORY_LABELS + ("average",), widths)]
    for label, report in result.rows:
        cells = (label,) + tuple(f"{v:.4f}" for v in report.f1) + (f"{report.macro_f1:.4f}",)
        lines.append(_format_row(cells, widths))
    return "\n".join(lines)


def render_cv(result: CvResult) -> str:
    widths = (8,) + (8,) * NUM_CATEGORIES + (8,)
    lines = [_format_row(("fold",) + CATEGORY_LABELS + ("macro",), widths)]
    for i, report in enumerate(result.fold_reports, start=1):
        cells = (f"fold{i}",) + tuple(f"{v:.4f}" for v in report.f1) + (f"{report.macro_f1:.4f}",)
        lines.append(_format_row(cells, widths))
    cells = ("average",) + tuple(f"{v:.4f}" for v in result.average_f1) + (f"{result.average_macro_f1:.4f}",)
    lines.append(_format_row(cells, widths))
    return "\n".join(lines)


def render_report(obj) -> tuple[str, dict]:
    """Human-readable table plus a full-precision machine-readable record."""
    if isinstance(obj, EvalReport):
        return render_eval_report(obj), {"kind": "evaluation", "report": obj.to_dict()}
    if isinstance(obj, AblationResult):
        return render_ablation(obj), obj.to_dict()
    if isinstance(obj, CvResult):
        return render_cv(obj), obj.to_dict()
    raise TypeError(f"cannot render {type(obj).__name__}")


def write_report(obj, out_dir, stem: str) -> tuple:
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text, record = render_report(obj)
    txt_path = out_dir / f"{stem}.txt"
    json_path = out_dir / f"{stem}.json"
    txt_path.write_text(text + "\n", encoding="utf-8")
    json_path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return txt_path, json_path


def parse_report(path) -> dict:
    from pathlib import Path
    return json.loads(Path(path).read_text(encoding="utf-8"))


def render_record(record: dict) -> str:
    """Re-render a machine-readable report record as its text table."""
    kind = record.get("kind")
    if kind == "evaluation":
        return render_eval_report(EvalReport.from_dict(record["report"]))
    if kind == "ablation":
        rows = [(row["mask"], EvalReport.from_dict(row["report"])) for row in record["rows"]]
        return render_ablation(AblationResult(rows=rows, train_config=None, seed=record.get("seed", 0)))
    if kind == "five_fold_cv":
        folds = [EvalReport.from_dict(d) for d in record["folds"]]
        avg = tuple(record["average_f1"][label] for label in CATEGORY_LABELS)
        return render_cv(CvResult(
            fold_reports=folds,
            average_f1=avg,
            average_macro_f1=record["average_macro_f1"],
            assignment=np.array(record.get("fold_assignment", []), dtype=np.int64),
            seed=record.get("seed", 0),
        ))
    raise DataError(f"unknown report kind {kind!r}")
