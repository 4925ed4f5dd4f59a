"""Prior configuration and the package's exception hierarchy."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class DriftPFNError(Exception):
    """Base class for all package errors."""


class ConfigError(DriftPFNError, ValueError):
    """Invalid configuration ranges or options."""


class SamplingError(DriftPFNError, RuntimeError):
    """A prior draw was degenerate; the caller should resample."""

    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts


class DataError(DriftPFNError, ValueError):
    """Malformed or invalid dataset input."""


class CapacityError(DriftPFNError, ValueError):
    """Input exceeds the model's feature or class capacity."""


class TrainingFault(DriftPFNError, RuntimeError):
    """Non-finite loss or other unrecoverable training failure."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


def _check_range(name, lo_hi, low=None, integer=False):
    lo, hi = lo_hi
    if integer and (int(lo) != lo or int(hi) != hi):
        raise ConfigError(f"{name} must be integers, got {lo_hi}")
    if lo > hi:
        raise ConfigError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    if low is not None and lo < low:
        raise ConfigError(f"{name}: lower bound {lo} below minimum {low}")


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the drifting SCM prior.

    Every range is inclusive. Log-uniform ranges are marked in the field
    comments; everything else is uniform.
    """

    min_nodes: int = 2
    max_nodes: int = 6
    density_range: tuple = (0.2, 0.7)
    subnode_count_range: tuple = (1, 3)
    intermediate_count_range: tuple = (1, 4)
    weight_std_range: tuple = (0.3, 3.0)  # log-uniform, per dataset
    noise_scale_range: tuple = (1e-3, 0.3)  # log-uniform, per non-root subnode
    root_noise_scale: float = 1.0
    activations: tuple = ("identity", "tanh", "abs", "sin", "softplus")
    clip_bound: float = 1e4
    feature_count_range: tuple = (2, 4)
    max_classes: int = 10
    class_jitter: float = 0.3

    # temporal domains
    min_domains: int = 2
    max_domains: int = 20
    min_total_samples: int = 50
    max_total_samples: int = 300
    gap_irregularity_range: tuple = (0.0, 1.5)
    gap_scale_range: tuple = (0.1, 10.0)  # log-uniform
    domain_size_concentration_range: tuple = (0.5, 10.0)  # log-uniform

    # edge shifts
    shift_sparsity_range: tuple = (0.05, 0.4)
    shift_scale_range: tuple = (0.05, 2.0)  # log-uniform
    sscm_min_nodes: int = 2
    sscm_max_nodes: int = 4

    degenerate_probe: int = 32
    reject_independent_target: bool = True
    max_attempts: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.min_nodes < 1:
            raise ConfigError("min_nodes must be >= 1")
        if self.max_nodes < self.min_nodes:
            raise ConfigError("max_nodes must be >= min_nodes")
        _check_range("density_range", self.density_range, low=0.0)
        if self.density_range[1] > 1.0:
            raise ConfigError("density_range must lie in [0, 1]")
        _check_range("subnode_count_range", self.subnode_count_range, low=1, integer=True)
        _check_range("intermediate_count_range", self.intermediate_count_range, low=1, integer=True)
        _check_range("weight_std_range", self.weight_std_range, low=1e-12)
        _check_range("noise_scale_range", self.noise_scale_range, low=0.0)
        _check_range("feature_count_range", self.feature_count_range, low=1, integer=True)
        if self.max_classes < 2:
            raise ConfigError("max_classes must be >= 2")
        if not self.activations:
            raise ConfigError("activations must be non-empty")
        if self.clip_bound <= 0:
            raise ConfigError("clip_bound must be positive")
        if self.min_domains < 1 or self.max_domains < self.min_domains:
            raise ConfigError("need 1 <= min_domains <= max_domains")
        if self.min_total_samples > self.max_total_samples:
            raise ConfigError("min_total_samples exceeds max_total_samples")
        if self.max_total_samples < self.min_domains:
            raise ConfigError("max_total_samples must allow at least one row per domain")
        _check_range("gap_irregularity_range", self.gap_irregularity_range, low=0.0)
        _check_range("gap_scale_range", self.gap_scale_range, low=1e-12)
        _check_range("domain_size_concentration_range", self.domain_size_concentration_range, low=1e-12)
        _check_range("shift_sparsity_range", self.shift_sparsity_range, low=0.0)
        if self.shift_sparsity_range[1] > 1.0:
            raise ConfigError("shift_sparsity_range must lie in [0, 1]")
        _check_range("shift_scale_range", self.shift_scale_range, low=0.0)
        if self.sscm_min_nodes < 2 or self.sscm_max_nodes < self.sscm_min_nodes:
            raise ConfigError("second-order SCM needs at least 2 nodes")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown prior options: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def log_uniform(rng, lo, hi):
    if lo == hi:
        return float(lo)
    if lo <= 0:
        raise ConfigError(f"log-uniform range must be positive, got ({lo}, {hi})")
    return float(lo * (hi / lo) ** rng.uniform(0.0, 1.0))
