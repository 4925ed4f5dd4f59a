"""Temporal domain schedules and drift datasets."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import DataError


@dataclass(frozen=True)
class TemporalDomainSchedule:
    domains: np.ndarray
    samples_per_domain: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.domains, dtype=float)
        n = np.asarray(self.samples_per_domain, dtype=int)
        if d.ndim != 1 or d.shape != n.shape or len(d) == 0:
            raise DataError("domains and samples_per_domain must be aligned non-empty vectors")
        if np.any(np.diff(d) <= 0):
            raise DataError("domain indices must be strictly increasing")
        if np.any(n < 1):
            raise DataError("every domain needs at least one sample")
        if not np.all(np.isfinite(d)):
            raise DataError("domain indices must be finite")
        object.__setattr__(self, "domains", d)
        object.__setattr__(self, "samples_per_domain", n)

    @property
    def num_domains(self):
        return len(self.domains)

    @property
    def total(self):
        return int(self.samples_per_domain.sum())

    @property
    def mean_gap(self):
        return float(np.mean(np.diff(self.domains))) if len(self.domains) > 1 else 1.0


@dataclass(frozen=True)
class DriftDataset:
    """Labeled rows grouped by ascending temporal domain."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    schedule: TemporalDomainSchedule

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise DataError("labels must be integer class ids")
        y = y.astype(np.int64)
        c = np.asarray(self.domains, dtype=float)
        if not (len(x) == len(y) == len(c)):
            raise DataError("features, labels and domains must have equal length")
        if not np.all(np.isfinite(x)):
            raise DataError("feature values must be finite")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("class id out of range")
        if len(np.unique(y)) != self.num_classes:
            raise DataError("every class must appear at least once")
        expected = np.repeat(self.schedule.domains, self.schedule.samples_per_domain)
        if len(expected) != len(c) or not np.array_equal(expected, c):
            raise DataError("rows are not grouped by domain in schedule order")
        for name, arr in (("features", x), ("labels", y), ("domains", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_rows(cls, features, labels, domains, num_classes=None):
        """Build a dataset from unordered rows; sorts stably by domain."""
        x = np.asarray(features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(labels, dtype=np.int64)
        c = np.asarray(domains, dtype=float)
        order = np.argsort(c, kind="stable")
        x, y, c = x[order], y[order], c[order]
        values, counts = np.unique(c, return_counts=True)
        if num_classes is None:
            num_classes = int(y.max()) + 1 if len(y) else 0
        return cls(x, y, c, int(num_classes), TemporalDomainSchedule(values, counts))

    def __len__(self):
        return len(self.labels)

    @property
    def num_features(self):
        return self.features.shape[1]

    def domain_slices(self):
        ends = np.cumsum(self.schedule.samples_per_domain)
        starts = ends - self.schedule.samples_per_domain
        return [slice(int(a), int(b)) for a, b in zip(starts, ends)]

    def rows_in(self, domain_values):
        return np.flatnonzero(np.isin(self.domains, np.asarray(domain_values, dtype=float)))

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.domains):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()
