"""Threshold-free ROC/AUC and the benchmark experiment matrix.

For each known-anomaly digit the runner trains the classifier (the VAE sees
only the normal class and is trained once and shared), scores the evaluation
set with all four methods, and tabulates AUROC with the anomaly side positive.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    ClassRole,
    NoiseConfig,
    SourceCorpus,
    SplitSpec,
    build_splits,
    cap_source,
    partition_source,
)
from .detector import METHODS, ModelSet, score_corpus
from .models import CnnConfig, TrainConfig, VaeConfig, train_cnn, train_vae

REPORT_SCHEMA_VERSION = 1
DEFAULT_KNOWN_DIGITS = (1, 3, 5, 7, 9)


@dataclass(frozen=True)
class RocResult:
    """ROC curve (thresholds descending from +inf) and its area.

    ``auc`` is the Mann-Whitney rank statistic (the probability that a random
    anomaly outscores a random normal, ties counting half), which equals the
    trapezoidal area of the stored curve.
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the mean rank of their block."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, is_anomaly) -> RocResult:
    """ROC curve and AUC for higher-is-anomalous scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_anomaly, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one normal and one anomalous sample")

    ranks = _average_ranks(scores)
    u_stat = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u_stat / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = labels[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) if len(scores) > 1 else np.array([], dtype=int)
    last = np.concatenate([boundaries, [len(scores) - 1]])
    tp = np.cumsum(sorted_pos)[last]
    fp = (last + 1) - tp
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[last]])
    return RocResult(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=float(auc))


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def default_vae_train() -> TrainConfig:
    # the reconstruction model needs far more epochs than the classifier to
    # saturate at desk-scale corpus sizes; it is trained once and shared
    return TrainConfig(max_epochs=200, convergence_patience=10)


def default_cnn_train() -> TrainConfig:
    return TrainConfig(max_epochs=80, convergence_patience=8)


@dataclass(frozen=True)
class ExperimentConfig:
    digits: tuple[int, ...] = DEFAULT_KNOWN_DIGITS
    methods: tuple[str, ...] = METHODS
    normal_digit: int = 0
    train_fraction: float = 0.8
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    vae_train: TrainConfig = field(default_factory=default_vae_train)
    cnn_train: TrainConfig = field(default_factory=default_cnn_train)
    vae_arch: VaeConfig = field(default_factory=VaeConfig)
    cnn_arch: CnnConfig = field(default_factory=CnnConfig)
    max_train_per_class: int | None = None
    max_eval_per_digit: int | None = None
    jobs: int = 1
    verbose: bool = True

    def to_dict(self) -> dict:
        # JSON-canonical (tuples become lists) so report echoes round-trip equal
        return json.loads(json.dumps(asdict(self)))


@dataclass
class ExperimentReport:
    """AUROC matrix over (method, known digit) with averages and run metadata."""

    normal_digit: int
    digits: list[int]
    methods: list[str]
    cells: dict  # method -> {str(digit): auc or None}
    averages: dict  # method -> mean over completed cells
    curves: dict  # method -> {str(digit): {"thresholds": [...], "fpr": [...], "tpr": [...]}}
    errors: dict  # "digit" -> message, for failed cells
    wall_clock: dict  # str(digit) -> seconds
    cnn_holdout_accuracy: dict  # str(digit) -> held-out accuracy of the cell's classifier
    seed: int
    config: dict
    complete: bool
    schema_version: int = REPORT_SCHEMA_VERSION

    _KEYS = (
        "normal_digit", "digits", "methods", "cells", "averages", "curves",
        "errors", "wall_clock", "cnn_holdout_accuracy", "seed", "config", "complete",
    )

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version}
        out.update({k: getattr(self, k) for k in self._KEYS})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {data.get('schema_version')!r}")
        return cls(schema_version=data["schema_version"], **{k: data[k] for k in cls._KEYS})


def _recompute_averages(cells: dict, methods) -> dict:
    averages = {}
    for method in methods:
        vals = [v for v in cells[method].values() if v is not None]
        averages[method] = float(np.mean(vals)) if vals else None
    return averages


def run_experiment_cells(
    split_for,
    config: ExperimentConfig,
    shared_vae=None,
    cnn_for=None,
    config_echo: dict | None = None,
) -> ExperimentReport:
    """Experiment core over any split provider (generated in memory or loaded
    from disk). ``split_for(digit)`` yields the cell's DatasetSplit; ``cnn_for``
    may supply a pre-trained classifier per digit. The VAE depends only on the
    normal class, identical across cells, so one model is trained (or passed
    in) and reused. Failed cells are recorded in ``errors`` and leave the
    report marked incomplete.
    """
    vae = shared_vae
    if vae is None:
        first = split_for(config.digits[0])
        if config.verbose:
            print(f"[experiment] training shared VAE on {len(first.train_normal)} normal images")
        vae = train_vae(first, config.vae_train, config.vae_arch, verbose=config.verbose)

    cells = {m: {} for m in config.methods}
    curves = {m: {} for m in config.methods}
    errors: dict[str, str] = {}
    wall_clock: dict[str, float] = {}
    accuracies: dict[str, float] = {}

    def run_cell(digit: int):
        start = time.perf_counter()
        split = split_for(digit)
        cnn = cnn_for(digit) if cnn_for is not None else None
        if cnn is None:
            if config.verbose:
                print(f"[experiment] digit {digit}: training CNN on "
                      f"{len(split.train_normal)}+{len(split.train_known_anomaly)} images")
            cnn = train_cnn(split, config.cnn_train, config.cnn_arch, verbose=config.verbose)
        if cnn.holdout_accuracy is not None:
            accuracies[str(digit)] = cnn.holdout_accuracy
        models = ModelSet(vae=vae, cnn=cnn)
        out = {}
        for method in config.methods:
            records = score_corpus(models, split, method)
            labels = [r.role != ClassRole.NORMAL for r in records]
            out[method] = roc_auc([r.score for r in records], labels)
        return out, time.perf_counter() - start

    def handle(digit: int):
        key = str(digit)
        try:
            results, elapsed = run_cell(digit)
            wall_clock[key] = elapsed
            for method, roc in results.items():
                cells[method][key] = roc.auc
                curves[method][key] = {
                    "thresholds": [None if np.isinf(t) else float(t) for t in roc.thresholds],
                    "fpr": roc.fpr.tolist(),
                    "tpr": roc.tpr.tolist(),
                }
            if config.verbose:
                summary = "  ".join(f"{m}={results[m].auc:.3f}" for m in config.methods)
                print(f"[experiment] digit {digit}: {summary}  ({elapsed:.1f}s)")
        except Exception as e:  # noqa: BLE001 - a failed cell must not sink the matrix
            errors[key] = f"{type(e).__name__}: {e}"
            for method in config.methods:
                cells[method][key] = None

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            list(pool.map(handle, config.digits))
    else:
        for digit in config.digits:
            handle(digit)

    return ExperimentReport(
        normal_digit=config.normal_digit,
        digits=list(config.digits),
        methods=list(config.methods),
        cells=cells,
        averages=_recompute_averages(cells, config.methods),
        curves=curves,
        errors=errors,
        wall_clock=wall_clock,
        cnn_holdout_accuracy=accuracies,
        seed=config.seed,
        config=config_echo if config_echo is not None else config.to_dict(),
        complete=not errors,
    )


def run_table1_experiment(
    source: SourceCorpus,
    config: ExperimentConfig | None = None,
    shared_vae=None,
    config_echo: dict | None = None,
) -> ExperimentReport:
    """Run the full matrix from a source corpus, generating splits in memory."""
    config = config or ExperimentConfig()
    source = partition_source(source, config.train_fraction, config.seed)
    source = cap_source(
        source,
        max_train_per_digit=config.max_train_per_class,
        max_eval_per_digit=config.max_eval_per_digit,
    )

    def split_for(digit: int):
        spec = SplitSpec(
            normal_digit=config.normal_digit,
            known_anomaly_digit=digit,
            train_fraction=config.train_fraction,
            seed=config.seed,
        )
        return build_splits(source, spec, config.noise)

    return run_experiment_cells(split_for, config, shared_vae=shared_vae, config_echo=config_echo)


# ---------------------------------------------------------------------------
# Report export: JSON + text table + ROC plots.
# ---------------------------------------------------------------------------


def format_report_table(report: ExperimentReport) -> str:
    """Text table: one row per method, one column per known digit plus the average."""
    header = ["method"] + [str(d) for d in report.digits] + ["avg"]
    rows = [header]
    for method in report.methods:
        row = [method]
        for d in report.digits:
            v = report.cells[method][str(d)]
            row.append("-" if v is None else f"{v:.3f}")
        avg = report.averages[method]
        row.append("-" if avg is None else f"{avg:.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if not report.complete:
        lines.append("")
        lines.append("INCOMPLETE: " + "; ".join(f"digit {k}: {v}" for k, v in report.errors.items()))
    return "\n".join(lines) + "\n"


def export_report(report: ExperimentReport, out_dir: str | Path, plots: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "report.txt").write_text(format_report_table(report))
    if plots:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for method in report.methods:
            for d in report.digits:
                curve = report.curves.get(method, {}).get(str(d))
                if curve is None:
                    continue
                fig, ax = plt.subplots(figsize=(4, 4))
                ax.plot(curve["fpr"], curve["tpr"])
                ax.plot([0, 1], [0, 1], linestyle=":", linewidth=1)
                auc = report.cells[method][str(d)]
                ax.set_xlabel("false positive rate")
                ax.set_ylabel("true positive rate")
                ax.set_title(f"{method}, known digit {d} (AUC {auc:.3f})")
                fig.tight_layout()
                fig.savefig(out / f"roc_{d}_{method}.png", dpi=100)
                plt.close(fig)
    return out


def load_report(path: str | Path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))
