"""Eval-Fix splits, classification metrics and the model comparison runner."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .config import ConfigError, DataError
from .dataset import DriftDataset

log = logging.getLogger(__name__)

TRAIN_SHARE = (0.3, 0.8)
ID_FRACTION = 0.1
SPLIT_SEEDS = (11, 22, 33)
VARIANTS = ("all_dom_w_ind", "all_dom_wo_ind", "last_dom_wo_ind")
METRICS = ("accuracy", "f1", "roc_auc", "ece")
REPORT_HEADER = ("dataset", "variant", "split", "metric", "mean", "ci95", "n_seeds")
_EPS = 1e-12


class SplitError(DataError):
    """No boundary satisfies the Eval-Fix constraints."""


@dataclass(frozen=True)
class EvalFixSplit:
    """Row indices into the source dataset.

    ``train`` and ``id_test`` partition the rows up to and including the
    boundary domain; ``ood_test`` holds every later row. ``id_repairs``
    counts rows moved between train and ID per domain to restore class
    coverage.
    """

    train: np.ndarray
    id_test: np.ndarray
    ood_test: np.ndarray
    boundary: float
    boundary_index: int
    seed: int | None = None
    id_repairs: dict | None = None


def _round_half_up(v):
    return int(np.floor(v + 0.5))


def feasible_boundaries(ds: DriftDataset):
    """Numbers of leading domains ``t`` whose domain and sample shares lie in [0.3, 0.8]."""
    counts = ds.schedule.samples_per_domain
    total_d, total_n = len(counts), counts.sum()
    cum = np.cumsum(counts)
    lo, hi = TRAIN_SHARE
    out = []
    for t in range(1, total_d):
        fd, fn = t / total_d, cum[t - 1] / total_n
        if lo - _EPS <= fd <= hi + _EPS and lo - _EPS <= fn <= hi + _EPS:
            out.append(t)
    return out


def _split_for_boundary(ds: DriftDataset, t, rng):
    slices = ds.domain_slices()
    cut = slices[t - 1].stop
    ood = np.arange(cut, len(ds))
    id_parts, train_parts = [], []
    for sl in slices[:t]:
        rows = np.arange(sl.start, sl.stop)
        k = _round_half_up(ID_FRACTION * len(rows))
        picked = np.sort(rng.choice(rows, size=k, replace=False)) if k else np.array([], dtype=int)
        id_parts.append(picked)
        train_parts.append(np.setdiff1d(rows, picked))
    id_test = np.concatenate(id_parts)
    train = np.concatenate(train_parts)
    labels = ds.labels
    pre_classes = set(np.unique(labels[:cut]).tolist())
    if pre_classes != set(np.unique(labels[ood]).tolist()):
        return None
    repairs = {}
    domain_of = np.searchsorted(np.cumsum(ds.schedule.samples_per_domain), np.arange(len(ds)), side="right")
    for cls in sorted(pre_classes):
        in_train = train[labels[train] == cls]
        in_id = id_test[labels[id_test] == cls]
        if len(in_id) == 0:
            if len(in_train) < 2:
                return None
            row = int(rng.choice(in_train))
            train = train[train != row]
            id_test = np.sort(np.append(id_test, row))
        elif len(in_train) == 0:
            if len(in_id) < 2:
                return None
            row = int(rng.choice(in_id))
            id_test = id_test[id_test != row]
            train = np.sort(np.append(train, row))
        else:
            continue
        d = int(domain_of[row])
        repairs[d] = repairs.get(d, 0) + (1 if len(in_id) == 0 else -1)
    return train, id_test, ood, repairs


def eval_fix_split(ds: DriftDataset, rng, seed=None) -> EvalFixSplit:
    """Sample an Eval-Fix split with a uniformly chosen feasible boundary.

    Candidates failing bidirectional class coverage are skipped; when all
    fail, :class:`SplitError` is raised.
    """
    if ds.schedule.num_domains < 2:
        raise SplitError("Eval-Fix needs at least two domains")
    candidates = feasible_boundaries(ds)
    if not candidates:
        raise SplitError("no boundary satisfies the 30-80% rule")
    for t in rng.permutation(candidates):
        got = _split_for_boundary(ds, int(t), rng)
        if got is not None:
            train, id_test, ood, repairs = got
            return EvalFixSplit(train, id_test, ood, float(ds.schedule.domains[t - 1]),
                                int(t), seed, repairs)
    raise SplitError("no feasible boundary keeps every class on both sides")


def check_split(ds: DriftDataset, split: EvalFixSplit):
    """List of violated split invariants (empty when the split conforms)."""
    problems = []
    c, y = ds.domains, ds.labels
    pre = np.concatenate([split.train, split.id_test])
    if len(np.intersect1d(split.train, split.id_test)) or len(np.intersect1d(pre, split.ood_test)):
        problems.append("overlapping parts")
    if len(pre) + len(split.ood_test) != len(ds) or len(np.unique(np.concatenate([pre, split.ood_test]))) != len(ds):
        problems.append("parts do not cover the dataset")
    if np.any(c[pre] > split.boundary) or np.any(c[split.ood_test] <= split.boundary):
        problems.append("boundary ordering")
    t, total = split.boundary_index, ds.schedule.num_domains
    fd, fn = t / total, len(pre) / len(ds)
    for name, f in (("domain", fd), ("sample", fn)):
        if not (TRAIN_SHARE[0] - _EPS <= f <= TRAIN_SHARE[1] + _EPS):
            problems.append(f"{name} share {f:.3f} outside 30-80%")
    repairs = split.id_repairs or {}
    for k, sl in enumerate(ds.domain_slices()[:t]):
        n_id = int(np.sum((split.id_test >= sl.start) & (split.id_test < sl.stop)))
        expected = _round_half_up(ID_FRACTION * (sl.stop - sl.start)) + repairs.get(k, 0)
        if n_id != expected:
            problems.append(f"domain {k}: {n_id} ID rows, expected {expected}")
    sets = [set(np.unique(y[p]).tolist()) for p in (split.train, split.id_test, split.ood_test)]
    if not (sets[0] == sets[1] == sets[2]):
        problems.append(f"class coverage differs: {sets}")
    return problems


# --- metrics ---------------------------------------------------------------

def accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty input")
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred):
    """Per-class F1 averaged over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if len(y_true) == 0:
        raise ValueError("empty input")
    scores = []
    for k in np.unique(y_true):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = np.sum((y_pred != k) & (y_true == k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def _binary_auc(pos, neg):
    """Mann-Whitney statistic from rank sums, ties counting one half."""
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    n1, n0 = len(pos), len(neg)
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def roc_auc(y_true, scores, average="macro"):
    """Binary AUC for 1-d scores; one-vs-rest AUC for a probability matrix.

    A two-column matrix is treated as binary with column 1 as the positive
    score. Multiclass averages over classes present in ``y_true``
    (``average="weighted"`` weights them by support).
    """
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=float)
    if s.ndim == 2 and s.shape[1] == 2:
        s = s[:, 1]
    if s.ndim == 1:
        pos, neg = s[y == 1], s[y != 1]
        if len(pos) == 0 or len(neg) == 0:
            return float("nan")
        return _binary_auc(pos, neg)
    aucs, weights = [], []
    for k in np.unique(y):
        pos, neg = s[y == k, k], s[y != k, k]
        if len(neg) == 0:
            continue
        aucs.append(_binary_auc(pos, neg))
        weights.append(len(pos))
    if not aucs:
        return float("nan")
    if average == "weighted":
        return float(np.average(aucs, weights=weights))
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    return float(np.mean(aucs))


def ece(y_true, prob_matrix, num_bins=10):
    """Expected calibration error with equal-width confidence bins."""
    y = np.asarray(y_true)
    p = np.asarray(prob_matrix, dtype=float)
    if len(y) == 0:
        raise ValueError("empty input")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(float)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, num_bins - 1)
    n = len(y)
    total = 0.0
    for b in np.unique(bins):
        m = bins == b
        total += m.sum() / n * abs(correct[m].mean() - conf[m].mean())
    return float(total)


@dataclass(frozen=True)
class MetricsReport:
    split: str
    n: int
    accuracy: float
    f1: float
    roc_auc: float
    ece: float

    def as_dict(self):
        return {m: getattr(self, m) for m in METRICS}


def evaluate_probs(y_true, probs, split, num_bins=10, average="macro"):
    y = np.asarray(y_true)
    pred = np.asarray(probs).argmax(axis=1)
    return MetricsReport(split, len(y), accuracy(y, pred), macro_f1(y, pred),
                         roc_auc(y, probs, average=average), ece(y, probs, num_bins))


# --- comparison runner -----------------------------------------------------

def variant_inputs(ds: DriftDataset, split: EvalFixSplit, variant: str):
    """Context rows ``(x, y, c)`` and query domain maps for one input variant.

    Returns ``(x_ctx, y_ctx, c_ctx, query_domains)`` where ``query_domains``
    maps row indices to the domain value fed to the model.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    ctx = split.train
    if variant == "last_dom_wo_ind":
        ctx = ctx[ds.domains[ctx] == split.boundary]
    x, y, c = ds.features[ctx], ds.labels[ctx], ds.domains[ctx]
    if variant == "all_dom_w_ind":
        return x, y, c, lambda rows: ds.domains[rows]
    return x, y, np.zeros_like(c), lambda rows: np.zeros(len(rows))


def ci95(values):
    """Half-width of the two-sided 95% Student-t interval of the mean."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, len(v) - 1) * v.std(ddof=1) / np.sqrt(len(v)))


def run_comparison(models: dict, datasets: dict, variants=VARIANTS, seeds=SPLIT_SEEDS,
                   predict_fn=None, num_bins=10, average="macro"):
    """Evaluate each model on every dataset x variant x split seed.

    ``models`` maps a model name to any object accepted by ``predict_fn``
    (default: :func:`driftpfn.model.predict` with an ``IclModel``).
    Returns ``(rows, raw)``: aggregated report rows and the per-seed records.
    """
    if predict_fn is None:
        from .model import predict as predict_fn
    raw = []
    for dname, ds in datasets.items():
        for seed in seeds:
            split = eval_fix_split(ds, np.random.default_rng(seed), seed=seed)
            for variant in variants:
                x, y, c, qdom = variant_inputs(ds, split, variant)
                for mname, model in models.items():
                    for part, rows in (("ID", split.id_test), ("OOD", split.ood_test)):
                        probs = predict_fn(model, x, y, c, ds.features[rows], qdom(rows))
                        rep = evaluate_probs(ds.labels[rows], probs, part, num_bins, average)
                        for metric, value in rep.as_dict().items():
                            raw.append(dict(dataset=dname, model=mname, variant=variant,
                                            split=part, metric=metric, seed=seed, value=value))
                log.info("evaluated %s seed %d variant %s", dname, seed, variant)
    return aggregate(raw), raw


def aggregate(raw):
    groups = {}
    for r in raw:
        key = (r["dataset"], f"{r['model']}/{r['variant']}", r["split"], r["metric"])
        groups.setdefault(key, []).append(r["value"])
    rows = []
    for (dname, variant, part, metric), values in groups.items():
        rows.append(dict(dataset=dname, variant=variant, split=part, metric=metric,
                         mean=float(np.mean(values)), ci95=ci95(values), n_seeds=len(values)))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r["dataset"], r["variant"], r["split"], r["metric"],
                        f"{r['mean']:.6f}", f"{r['ci95']:.6f}", r["n_seeds"]])
