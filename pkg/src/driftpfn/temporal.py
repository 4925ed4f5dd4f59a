"""Time2Vec domain encoding and train-only normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DataError


@dataclass(frozen=True)
class Time2VecParams:
    omega: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if omega.shape != phi.shape or omega.ndim != 1 or len(omega) < 1:
            raise ValueError("omega and phi must be equal-length non-empty vectors")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "phi", phi)

    @property
    def m(self):
        return len(self.omega)

    @classmethod
    def initial(cls, m=8, rng=None):
        """Frequencies log-spaced over [0.1, 10], phases uniform on [0, 2*pi)."""
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(np.logspace(-1, 1, m), rng.uniform(0.0, 2 * np.pi, size=m))


def time2vec(c, p: Time2VecParams):
    """Linear component first, ``m - 1`` sinusoidal components after it.

    ``c`` may be a scalar or an array; the encoding is appended as a last axis.
    """
    z = np.multiply.outer(np.asarray(c, dtype=float), p.omega) + p.phi
    out = np.sin(z)
    out[..., 0] = z[..., 0]
    return out


@dataclass(frozen=True)
class Normalizer:
    """Column standardisation and an affine domain map fitted on training rows.

    Zero-variance columns keep std 1 and are listed in ``flagged``; they map
    to zero on the training rows.
    """

    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray
    domain_shift: float
    domain_scale: float

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse_transform(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def transform_domains(self, c):
        return (np.asarray(c, dtype=float) - self.domain_shift) / self.domain_scale

    def inverse_transform_domains(self, u):
        return np.asarray(u, dtype=float) * self.domain_scale + self.domain_shift


_MIN_STD = 1e-12


def fit_normalizer(train_rows, train_domains) -> Normalizer:
    x = np.asarray(train_rows, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    c = np.asarray(train_domains, dtype=float)
    if len(x) == 0 or len(c) != len(x):
        raise DataError("normalizer needs a non-empty, aligned set of training rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flagged = std <= _MIN_STD * np.maximum(1.0, np.abs(mean))
    std = np.where(flagged, 1.0, std)
    c_mean, c_std = float(c.mean()), float(c.std())
    if c_std <= _MIN_STD * max(1.0, abs(c_mean)):
        c_std = 1.0
    return Normalizer(mean, std, flagged, c_mean, c_std)


def apply_normalizer(norm: Normalizer, rows, domains):
    return norm.transform(rows), norm.transform_domains(domains)
