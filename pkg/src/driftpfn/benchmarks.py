"""Seeded synthetic drift benchmarks and the delimited-text dataset format.

File format: UTF-8, comma separated, header ``f0,...,f{d-1},label,domain``;
labels are non-negative integers and domains decimal reals.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.datasets import make_moons

from .config import ConfigError, DataError
from .dataset import DriftDataset


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    num_domains: int
    samples_per_domain: int
    feature_dim: int
    num_classes: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if min(self.num_domains, self.samples_per_domain, self.feature_dim) < 1:
            raise ConfigError("benchmark counts must be positive")
        if self.num_classes < 2:
            raise ConfigError("benchmarks need at least two classes")


def _assemble(xs, ys, num_classes):
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.int64)
    c = np.concatenate([np.full(len(v), float(k)) for k, v in enumerate(ys)])
    return DriftDataset.from_rows(x, y, c, num_classes)


def rotation(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


MOONS_CENTROID = np.array([0.5, 0.25])


def gen_rotated_two_moons(seed=0, num_domains=10, per_domain=220, step_deg=18.0, noise=0.1):
    """Two interleaved half-moons; domain ``i`` is rotated by ``i * step_deg``
    degrees counter-clockwise about the centroid of the unrotated layout."""
    xs, ys = [], []
    for i in range(num_domains):
        x, y = make_moons(n_samples=per_domain, noise=noise, random_state=seed * 1000 + i)
        xs.append((x - MOONS_CENTROID) @ rotation(step_deg * i).T + MOONS_CENTROID)
        ys.append(y)
    return _assemble(xs, ys, 2)


# Blob centres per class at a few key domains; linear interpolation in between.
BLOB_KEYFRAMES = {
    0: ([-3.0, 0.0], [3.0, 0.0], [0.0, 3.0]),
    5: ([-0.6, 0.4], [0.6, 0.4], [0.0, 1.2]),
    13: ([-1.5, -3.0], [3.5, 2.0], [-3.0, 3.5]),
}
BLOB_STD = {0: 0.5, 5: 0.35, 13: 0.7}


def blob_centers(domain):
    keys = sorted(BLOB_KEYFRAMES)
    d = float(np.clip(domain, keys[0], keys[-1]))
    for a, b in zip(keys[:-1], keys[1:]):
        if d <= b:
            t = (d - a) / (b - a)
            ca, cb = np.array(BLOB_KEYFRAMES[a]), np.array(BLOB_KEYFRAMES[b])
            return (1 - t) * ca + t * cb, (1 - t) * BLOB_STD[a] + t * BLOB_STD[b]
    raise AssertionError("unreachable")


def gen_intersecting_blobs(seed=0, num_domains=14, per_class=40):
    """Three Gaussian blobs whose centres converge near domains 4-6 and then
    separate along new directions; spreads change with them."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_domains):
        centers, std = blob_centers(k)
        pts = [rng.normal(centers[j], std, size=(per_class, 2)) for j in range(3)]
        xs.append(np.concatenate(pts))
        ys.append(np.repeat(np.arange(3), per_class))
    return _assemble(xs, ys, 3)


LABEL_SHIFT_MEANS = np.array([[-1.5, 0.0], [1.5, 0.0]])


def label_shift_prior(k, num_domains=10, start=0.95, end=0.05):
    return start + (end - start) * k / (num_domains - 1)


def gen_binary_label_shift(seed=0, num_domains=10, per_domain=200):
    """Class-1 share falls linearly from 0.95 to 0.05; P(x | y) is fixed."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_domains):
        n1 = int(round(per_domain * label_shift_prior(k, num_domains)))
        y = np.concatenate([np.zeros(per_domain - n1, dtype=int), np.ones(n1, dtype=int)])
        y = rng.permutation(y)
        xs.append(LABEL_SHIFT_MEANS[y] + rng.standard_normal((per_domain, 2)))
        ys.append(y)
    return _assemble(xs, ys, 2)


CIRCLE_R = 1.0
SLIDER_R = 0.5
SLIDER_STEP_DEG = 30.0


def slider_center(k):
    a = math.radians(SLIDER_STEP_DEG * k)
    return (CIRCLE_R - SLIDER_R) * np.array([math.cos(a), math.sin(a)])


def sliding_circle_labels(x, k):
    return (np.linalg.norm(x - slider_center(k), axis=1) <= SLIDER_R).astype(int)


def gen_sliding_circle(seed=0, num_domains=10, per_domain=200):
    """Uniform points in the unit disc; label 1 inside a radius-0.5 circle
    whose centre moves 30 degrees along the inner perimeter per domain."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_domains):
        r = CIRCLE_R * np.sqrt(rng.random(per_domain))
        t = rng.uniform(0, 2 * np.pi, per_domain)
        x = np.column_stack([r * np.cos(t), r * np.sin(t)])
        xs.append(x)
        ys.append(sliding_circle_labels(x, k))
    return _assemble(xs, ys, 2)


HYPERPLANE_STEP_DEG = 12.0


def hyperplane_normal(k):
    """Normal of the domain-``k`` hyperplane; the first three entries drift."""
    a = math.radians(HYPERPLANE_STEP_DEG * k)
    return np.array([math.cos(a), math.sin(a), 0.5 + 0.05 * k, 0.4, -0.3])


def hyperplane_labels(x, k):
    return ((x - 0.5) @ hyperplane_normal(k) > 0).astype(int)


def gen_rotating_hyperplane(seed=0, num_domains=15, per_domain=100):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_domains):
        x = rng.random((per_domain, 5))
        xs.append(x)
        ys.append(hyperplane_labels(x, k))
    return _assemble(xs, ys, 2)


def gen_moving_blobs(seed=0, num_domains=6, per_class=100, num_classes=2,
                     start=None, velocity=None, std=0.5):
    """Clusters moving along straight lines, one class per cluster.

    The default is two clusters travelling in opposite directions along
    parallel diagonals.
    """
    rng = np.random.default_rng(seed)
    start = np.array([[-2.0, -1.0], [-1.0, -2.0]] if start is None else start, dtype=float)
    velocity = np.array([[0.6, 0.6], [-0.6, -0.6]] if velocity is None else velocity, dtype=float)
    if start.shape != (num_classes, 2) or velocity.shape != (num_classes, 2):
        raise ConfigError("start and velocity need one 2-d row per class")
    xs, ys = [], []
    for k in range(num_domains):
        centers = start + k * velocity
        xs.append(np.concatenate([rng.normal(c, std, size=(per_class, 2)) for c in centers]))
        ys.append(np.repeat(np.arange(num_classes), per_class))
    return _assemble(xs, ys, num_classes)


BENCHMARKS = {
    "rotated_two_moons": gen_rotated_two_moons,
    "intersecting_blobs": gen_intersecting_blobs,
    "binary_label_shift": gen_binary_label_shift,
    "sliding_circle": gen_sliding_circle,
    "rotating_hyperplane": gen_rotating_hyperplane,
    "moving_blobs": gen_moving_blobs,
}


def load_benchmark(name, seed=0):
    try:
        gen = BENCHMARKS[name]
    except KeyError:
        raise ConfigError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None
    return gen(seed=seed)


def save_csv(ds: DriftDataset, path):
    header = [f"f{j}" for j in range(ds.num_features)] + ["label", "domain"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y, c in zip(ds.features.tolist(), ds.labels.tolist(), ds.domains.tolist()):
            w.writerow([repr(v) for v in x] + [str(y), repr(c)])


def _as_float(value, row, col):
    try:
        v = float(value)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: non-numeric value {value!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {value!r}")
    return v


def load_csv(path, domain_column="domain", target_column="label", delimiter=","):
    """Read a delimited file into a domain-sorted dataset.

    Every column other than the domain and target columns is a feature.
    Class ids follow the sorted order of the distinct labels (numeric order
    when all labels parse as numbers).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    for col in (domain_column, target_column):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r} (have {header})")
    di, ti = header.index(domain_column), header.index(target_column)
    fcols = [j for j in range(len(header)) if j not in (di, ti)]
    if not fcols:
        raise DataError(f"{path}: no feature columns")
    x = np.empty((len(rows), len(fcols)))
    c = np.empty(len(rows))
    raw_labels = []
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        for jj, j in enumerate(fcols):
            x[i - 2, jj] = _as_float(r[j], i, header[j])
        c[i - 2] = _as_float(r[di], i, domain_column)
        if r[ti] == "":
            raise DataError(f"row {i}, column {target_column!r}: missing label")
        raw_labels.append(r[ti])
    try:
        keys = [float(v) for v in raw_labels]
    except ValueError:
        keys = raw_labels
    distinct = sorted(set(keys))
    if len(distinct) < 2:
        raise DataError(f"{path}: need at least two classes, found {len(distinct)}")
    ids = {v: k for k, v in enumerate(distinct)}
    y = np.array([ids[v] for v in keys], dtype=np.int64)
    # canonical order: by domain, then by full row content
    order = np.lexsort(tuple(x[:, j] for j in reversed(range(x.shape[1]))) + (y, c))
    return DriftDataset.from_rows(x[order], y[order], c[order], len(distinct))
