"""Metrics, paired significance testing and the cross-validated model comparison."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import model as M
from .nn import Params
from .reactions import FoldPlan, PropertyDataset, make_fold_plan
from .training import (
    TrainConfig,
    fit_property_model,
    lr_search,
    metric_higher_is_better,
    predict_property,
    score_predictions,
    tuning_objective,
)

EXACT_MAX_N = 20

log = logging.getLogger(__name__)


class DegenerateComparisonError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def rmse(preds, targets) -> float:
    p = np.asarray(preds, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("rmse needs non-empty arrays of equal length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if s.size == 0 or s.shape != y.shape:
        raise ValueError("scores and labels must be non-empty and of equal length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise ValueError("undefined metric: labels contain a single class")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form of the ROC area; tied scores count one half."""
    s, y = _binary(scores, labels)
    ranks = sps.rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def prc_auc(scores, labels) -> float:
    """Average precision: precision at each distinct threshold weighted by the recall gained."""
    s, y = _binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # evaluate only at the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / tp[-1]
    gained = np.diff(np.r_[0.0, recall])
    return float(np.sum(gained * precision))


def multi_task_average(values: Sequence[float | None]) -> float:
    defined = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not defined:
        raise ValueError("undefined metric for every task")
    return float(np.mean(defined))


# ---------------------------------------------------------------------------
# paired statistics


@dataclass
class WilcoxonOutcome:
    w_plus: float
    w_minus: float
    p_value: float
    n_effective: int
    n_zero: int
    method: str
    alternative: str


def signed_differences(pairs, direction: str) -> np.ndarray:
    """Per-pair differences, positive when the treated value is better."""
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if not np.isfinite(arr).all():
        raise ValueError("paired values must be finite")
    if direction == "higher":
        return arr[:, 1] - arr[:, 0]
    if direction == "lower":
        return arr[:, 0] - arr[:, 1]
    raise ValueError(f"direction must be 'higher' or 'lower', got {direction!r}")


def _signed_ranks(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nz = d[d != 0]
    if nz.size == 0:
        raise DegenerateComparisonError("degenerate comparison: every difference is zero")
    return nz, sps.rankdata(np.abs(nz))


def _exact_upper_tail(doubled_ranks: np.ndarray, observed: int) -> tuple[float, float]:
    """P(W+ >= w) and P(W+ <= w) under random signs, on doubled (integer) ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    denom = 2.0 ** doubled_ranks.size
    return float(counts[observed:].sum() / denom), float(counts[: observed + 1].sum() / denom)


def wilcoxon_signed_rank(pairs, direction: str = "higher", alternative: str = "greater") -> WilcoxonOutcome:
    """Wilcoxon signed-rank test on ``(baseline, treated)`` pairs.

    Zero differences are dropped, ties share average ranks. ``alternative``
    "greater" tests whether treated is better; "two-sided" is also
    available. Exact for up to 20 non-zero pairs, normal approximation with
    tie correction beyond.
    """
    d = signed_differences(pairs, direction)
    nz, ranks = _signed_ranks(d)
    n = nz.size
    w_plus = float(ranks[nz > 0].sum())
    w_minus = float(ranks[nz < 0].sum())
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        upper, lower = _exact_upper_tail(doubled, int(round(2 * w_plus)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - (tie_counts**3 - tie_counts).sum() / 48
        z = (w_plus - mean) / math.sqrt(var)
        upper, lower = float(sps.norm.sf(z)), float(sps.norm.cdf(z))
        method = "normal-approximation"
    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2 * min(upper, lower))
    return WilcoxonOutcome(w_plus, w_minus, p, n, int(d.size - n), method, alternative)


def rank_biserial(pairs, direction: str = "higher", zero_method: str = "wilcox") -> float:
    """Matched-pairs rank-biserial correlation ``(W+ - W-) / (W+ + W-)``.

    ``zero_method="wilcox"`` drops zero differences before ranking;
    ``"rank-zeros"`` ranks them too but credits them to neither side, which
    keeps their ranks in the denominator.
    """
    d = signed_differences(pairs, direction)
    if zero_method == "wilcox":
        nz, ranks = _signed_ranks(d)
        w_plus, w_minus, total = ranks[nz > 0].sum(), ranks[nz < 0].sum(), ranks.sum()
    elif zero_method == "rank-zeros":
        if not (d != 0).any():
            raise DegenerateComparisonError("degenerate comparison: every difference is zero")
        ranks = sps.rankdata(np.abs(d))
        w_plus, w_minus, total = ranks[d > 0].sum(), ranks[d < 0].sum(), ranks.sum()
    else:
        raise ValueError(f"unknown zero_method {zero_method!r}")
    return float((w_plus - w_minus) / total)


def bonferroni_level(alpha: float, m: int) -> float:
    if not 0 < alpha < 1 or m < 1:
        raise ValueError("need 0 < alpha < 1 and m >= 1")
    return alpha / m


# ---------------------------------------------------------------------------
# comparison


@dataclass
class PairedFoldResults:
    dataset: str
    metric: str
    direction: str
    pairs: list[tuple[float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "baseline", "treated"])
        for k, (b, t) in enumerate(self.pairs):
            w.writerow([k, repr(float(b)), repr(float(t))])
        return buf.getvalue()


@dataclass
class ComparisonRow:
    dataset: str
    metric: str
    direction: str
    baseline_mean: float
    baseline_std: float
    treated_mean: float
    treated_std: float
    p_value: float
    rank_biserial: float
    level: float
    significant: bool
    n_folds: int
    method: str


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    alpha: float
    alternative: str = "greater"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"alpha": self.alpha, "alternative": self.alternative, "meta": self.meta,
                           "rows": [dataclasses.asdict(r) for r in self.rows]}, indent=2)

    def to_text(self) -> str:
        header = ["Data set", "Metric", "Without pre-training", "With pre-training", "Wilcoxon p", "Rank-biserial"]
        lines = [header]
        for r in self.rows:
            arrow = "↑" if r.direction == "higher" else "↓"
            mark = "*" if r.significant else ""
            lines.append([
                r.dataset, f"{r.metric.upper().replace('_', '-')} {arrow}",
                f"{r.baseline_mean:.3f} ± {r.baseline_std:.3f}", f"{r.treated_mean:.3f} ± {r.treated_std:.3f}",
                f"{r.p_value:.3f}{mark}", f"{r.rank_biserial:.3f}",
            ])
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in lines]
        level = self.rows[0].level if self.rows else self.alpha
        out.append(f"* significant at alpha/m = {level:.5f} ({self.alternative})")
        return "\n".join(out) + "\n"


def summarize(results: Sequence[PairedFoldResults], alpha: float = 0.05, alternative: str = "greater",
              meta: dict | None = None) -> ComparisonReport:
    """Table rows for each dataset, flagged at the Bonferroni level ``alpha / len(results)``."""
    level = bonferroni_level(alpha, len(results))
    rows = []
    for res in results:
        arr = np.asarray(res.pairs, dtype=float)
        test = wilcoxon_signed_rank(res.pairs, res.direction, alternative)
        rows.append(ComparisonRow(
            res.dataset, res.metric, res.direction,
            float(arr[:, 0].mean()), float(arr[:, 0].std(ddof=1)) if len(arr) > 1 else 0.0,
            float(arr[:, 1].mean()), float(arr[:, 1].std(ddof=1)) if len(arr) > 1 else 0.0,
            test.p_value, rank_biserial(res.pairs, res.direction), level, test.p_value < level,
            len(arr), test.method,
        ))
    return ComparisonReport(rows, alpha, alternative, dict(meta or {}))


@dataclass
class ArmResult:
    lr: float
    test_metric: float
    best_val: float | None
    final_val_loss: float
    trials: list[tuple[float, float]]


@dataclass
class CrossValResult:
    dataset: str
    metric: str
    arms: dict[str, list[ArmResult]]

    def paired(self, baseline: str = "random", treated: str = "pretrained") -> PairedFoldResults:
        direction = "higher" if metric_higher_is_better(self.metric) else "lower"
        pairs = [(b.test_metric, t.test_metric) for b, t in zip(self.arms[baseline], self.arms[treated])]
        return PairedFoldResults(self.dataset, self.metric, direction, pairs)


def default_metric(dataset: PropertyDataset) -> str:
    return "rmse" if dataset.task_type == "regression" else "roc_auc"


def run_fold(
    dataset: PropertyDataset,
    plan: FoldPlan,
    rotation: int,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    init: Params | None,
    metric: str,
    search: bool = True,
) -> ArmResult:
    """LR search on the tuning fold, final fit with early stopping, score on the test fold."""
    cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + 7919 * rotation)
    trials: list[tuple[float, float]] = []
    if search:
        objective = tuning_objective(dataset, plan, rotation, model_cfg, cfg, init, metric)
        lr, trials = lr_search(objective, cfg.search_runs, (cfg.search_low, cfg.search_high), seed=cfg.seed)
    else:
        lr = cfg.lr if cfg.lr is not None else cfg.max_lr
    roles = plan.roles(rotation)
    res = fit_property_model(dataset.subset(roles["training"]), dataset.subset(roles["validation"]),
                             model_cfg, cfg, init, lr)
    test = dataset.subset(roles["test"])
    pred = predict_property([r.smiles for r in test.records], res.params, model_cfg)
    value = score_predictions(pred, test.label_matrix(), test.task_type, metric)
    return ArmResult(lr, value, res.log.best_value, res.extra["final_val_loss"], trials)


def run_crossval(
    dataset: PropertyDataset,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    arms: dict[str, Params | None],
    n_folds: int = 10,
    metric: str | None = None,
    seed: int = 0,
    search: bool = True,
    plan: FoldPlan | None = None,
) -> CrossValResult:
    """Every rotation of an ``n_folds`` plan for each arm (name -> encoder init or None)."""
    metric = metric or default_metric(dataset)
    if plan is None:
        stratify = 0 if dataset.task_type == "classification" and len(dataset.tasks) == 1 else None
        plan = make_fold_plan(dataset.records, n_folds, stratify=stratify, seed=seed)
    out: dict[str, list[ArmResult]] = {name: [] for name in arms}
    for k in range(plan.n_folds):
        for name, init in arms.items():
            try:
                out[name].append(run_fold(dataset, plan, k, model_cfg, train_cfg, init, metric, search))
            except Exception:
                log.error("failed on %s, rotation %d, arm %r", dataset.name, k, name)
                raise
    return CrossValResult(dataset.name, metric, out)


def run_crossval_comparison(
    datasets: Sequence[PropertyDataset] | PropertyDataset,
    pretrained: Params,
    model_cfg: M.ModelConfig,
    train_cfg: TrainConfig,
    alpha: float = 0.05,
    n_folds: int = 10,
    alternative: str = "greater",
    seed: int = 0,
    metrics: Sequence[str | None] | None = None,
    search: bool = True,
) -> tuple[ComparisonReport, list[CrossValResult]]:
    """Pre-trained vs randomly initialised encoder on every dataset, Table-1 style.

    Both arms see the same fold plan and seeds; each gets its own LR search
    per rotation. The significance level is ``alpha / len(datasets)``.
    """
    if pretrained is None:
        raise ValueError("comparison requires a pre-trained arm")
    if isinstance(datasets, PropertyDataset):
        datasets = [datasets]
    metrics = list(metrics) if metrics is not None else [None] * len(datasets)
    results = []
    for ds, metric in zip(datasets, metrics):
        results.append(run_crossval(ds, model_cfg, train_cfg, {"random": None, "pretrained": pretrained},
                                    n_folds, metric, seed, search))
    report = summarize([r.paired() for r in results], alpha, alternative)
    return report, results


def write_report(report: ComparisonReport, results: Sequence[CrossValResult], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "report.json", out_dir / "report.txt"]
    paths[0].write_text(report.to_json())
    paths[1].write_text(report.to_text())
    for res in results:
        p = out_dir / f"folds_{res.dataset}.csv"
        p.write_text(res.paired().to_csv())
        paths.append(p)
    return paths
