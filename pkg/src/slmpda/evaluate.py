"""Target accuracy, selector quality, domain distances, ablations, feature export."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import PdaTask

log = logging.getLogger(__name__)


def evaluate_accuracy(probs_or_pred, labels) -> float:
    """Fraction of argmax predictions equal to the labels; rows with label -1 are skipped."""
    labels = np.asarray(labels)
    pred = np.asarray(probs_or_pred)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    keep = labels >= 0
    if not np.any(keep):
        raise ValueError("no labelled samples to evaluate")
    return float(np.mean(pred[keep] == labels[keep]))


@dataclass
class SelectorMetrics:
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    fn: int
    tn: int


def selector_metrics(decisions, oracle) -> SelectorMetrics:
    """Positive class = shared-class source sample."""
    d = np.asarray(decisions).astype(bool)
    o = np.asarray(oracle).astype(bool)
    if d.shape != o.shape:
        raise ValueError("decisions must cover the whole source set")
    tp = int(np.sum(d & o)); fp = int(np.sum(d & ~o))
    fn = int(np.sum(~d & o)); tn = int(np.sum(~d & ~o))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return SelectorMetrics(precision, recall, tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# sliced Wasserstein


def wasserstein_1d(x, y) -> float:
    """Exact W1 between two 1-D empirical distributions (quantile functions integrated piecewise)."""
    xs = np.sort(np.asarray(x, dtype=np.float64).ravel())
    ys = np.sort(np.asarray(y, dtype=np.float64).ravel())
    n, m = xs.size, ys.size
    if n == 0 or m == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    if n == m:
        return float(np.mean(np.abs(xs - ys)))
    u = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    lo = np.concatenate([[0.0], u[:-1]])
    mid = 0.5 * (lo + u)
    ix = np.minimum((mid * n).astype(np.int64), n - 1)
    iy = np.minimum((mid * m).astype(np.int64), m - 1)
    return float(np.sum((u - lo) * np.abs(xs[ix] - ys[iy])))


def random_directions(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(X, Y, n_projections: int = 128, rng: np.random.Generator | None = None,
                       directions: np.ndarray | None = None) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("sliced_wasserstein needs non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("feature widths differ")
    if directions is None:
        if n_projections < 1:
            raise ValueError("n_projections must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = random_directions(n_projections, X.shape[1], rng)
    px, py = X @ directions.T, Y @ directions.T
    return float(np.mean([wasserstein_1d(px[:, k], py[:, k]) for k in range(directions.shape[0])]))


@dataclass
class DistanceReport:
    d_sel_T: float | None
    d_dis_T: float | None
    d_all_T: float
    normalized_sel: float | None
    normalized_dis: float | None


def distance_report(sel_feats, dis_feats, all_feats, tgt_feats, n_projections: int = 128,
                    seed: int = 0) -> DistanceReport:
    """Sliced-W of selected / discarded / all source features to the target, normalised by the last."""
    dim = np.asarray(all_feats).shape[1]
    dirs = random_directions(n_projections, dim, np.random.default_rng(seed))
    d_all = sliced_wasserstein(all_feats, tgt_feats, directions=dirs)

    def one(f):
        return sliced_wasserstein(f, tgt_feats, directions=dirs) if len(f) else None

    d_sel, d_dis = one(sel_feats), one(dis_feats)

    def norm(v):
        return v / d_all if v is not None and d_all > 0 else None

    return DistanceReport(d_sel, d_dis, d_all, norm(d_sel), norm(d_dis))


# ---------------------------------------------------------------------------
# model-level helpers


def source_decisions(view, task: PdaTask, use_select: bool = True) -> np.ndarray:
    """Deterministic selector decisions over the full source set (argmax, no Gumbel noise)."""
    n = len(task.train.source_x)
    if not use_select:
        return np.ones(n, dtype=bool)
    return view.select_proba(task.train.source_x) >= 0.5


def make_evaluator(task: PdaTask, use_select: bool = True):
    """Closure over the held-out store; the trainer only sees the EvalView it is handed."""
    store = task.evaluation

    def evaluator(view) -> dict:
        probs = view.predict_proba(task.train.target_x, "target")
        out = {"target_accuracy": evaluate_accuracy(probs, store.target_y)}
        sm = selector_metrics(source_decisions(view, task, use_select), store.oracle)
        out["selector_precision"] = sm.precision
        out["selector_recall"] = sm.recall
        return out

    return evaluator


def model_distance_report(view, task: PdaTask, use_select: bool = True, n_projections: int = 128,
                          seed: int = 0) -> DistanceReport:
    dec = source_decisions(view, task, use_select)
    fs = view.features(task.train.source_x, "source")
    ft = view.features(task.train.target_x, "target")
    return distance_report(fs[dec], fs[~dec], fs, ft, n_projections, seed)


def export_features(view, task: PdaTask, path, use_select: bool = True) -> int:
    """Write ``domain,label,selected,g0..`` rows for both domains; returns the row count."""
    fs = view.features(task.train.source_x, "source")
    ft = view.features(task.train.target_x, "target")
    dec = source_decisions(view, task, use_select)
    k = fs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label", "selected"] + [f"g{i}" for i in range(k)])
        for f, y, s in zip(fs, task.train.source_y, dec):
            w.writerow(["source", int(y), int(s)] + [repr(float(v)) for v in f])
        for f, y in zip(ft, task.evaluation.target_y):
            w.writerow(["target", int(y), -1] + [repr(float(v)) for v in f])
    return len(fs) + len(ft)


# ---------------------------------------------------------------------------
# ablations

CANONICAL_ROWS = ("vanilla", "select", "select+label", "slm")
OPTIONAL_ROWS = ("hard-pl", "no-mix-dom", "no-mix-cls", "no-hausdorff")


def row_config(base, row: str):
    """TrainConfig for a named ablation row; only module toggles change."""
    toggles = {
        "vanilla": (False, False, False),
        "select": (True, False, False),
        "select+label": (True, True, False),
    }
    if row in toggles:
        s, lab, m = toggles[row]
        return replace(base, use_select=s, use_label=lab, use_mix=m)
    full = replace(base, use_select=True, use_label=True, use_mix=True)
    if row == "slm":
        return full
    if row == "hard-pl":
        return replace(full, label=replace(full.label, hard=True))
    if row == "no-mix-dom":
        return replace(full, mix=replace(full.mix, use_dom=False))
    if row == "no-mix-cls":
        return replace(full, mix=replace(full.mix, use_cls=False))
    if row == "no-hausdorff":
        return replace(full, select=replace(full.select, use_hausdorff=False))
    raise ValueError(f"unknown ablation row {row!r}; known: {CANONICAL_ROWS + OPTIONAL_ROWS}")


@dataclass
class AblationRow:
    name: str
    select: bool
    label: bool
    mix: bool
    seeds: list[int]
    accuracies: list[float]
    mean: float
    std: float

    def to_dict(self) -> dict:
        return asdict(self)


def _run_one(args):
    cfg, task, seed = args
    from .trainer import train

    cfg = replace(cfg, seed=seed)
    rep = train(cfg, task, evaluator=make_evaluator(task, cfg.use_select))
    return rep.final["target_accuracy"]


def run_ablation(base, task: PdaTask, seeds, rows=CANONICAL_ROWS, workers: int = 1) -> list[AblationRow]:
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("run_ablation needs at least two seeds")
    base = replace(base, eval_every=0)
    out = []
    for row in rows:
        cfg = row_config(base, row)
        jobs = [(cfg, task, s) for s in seeds]
        try:
            if workers > 1:
                with ProcessPoolExecutor(workers) as pool:
                    accs = list(pool.map(_run_one, jobs))
            else:
                accs = [_run_one(j) for j in jobs]
        except Exception as exc:
            raise RuntimeError(f"ablation row '{row}' failed: {exc}") from exc
        accs = [float(a) for a in accs]
        out.append(AblationRow(row, cfg.use_select, cfg.use_label, cfg.use_mix, seeds, accs,
                               float(np.mean(accs)), float(np.std(accs))))
        log.info("ablation %-13s mean=%.4f std=%.4f", row, out[-1].mean, out[-1].std)
    return out
