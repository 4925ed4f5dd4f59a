"""Drifting SCM prior.

A dataset is drawn by sampling a causal graph and its functional expansion,
picking a sparse set of causal relationships to drift, and building a
second-order SCM that maps each domain value to additive weight deltas for
every functional edge of those relationships. Rows for domain ``c_k`` are
then propagated through the graph with its shifted weights.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ConfigError, PriorConfig, SamplingError, log_uniform
from .dataset import DriftDataset, TemporalDomainSchedule
from .scm import (
    FunctionalGraph,
    ScmGraph,
    expand_to_functional,
    forward,
    sample_scm,
)

_ZERO_STD = 1e-12


@dataclass(frozen=True)
class SecondOrderSCM:
    """Deterministic map from a domain value to per-edge weight deltas.

    ``edge_ids`` index functional edges of the data-generating graph and
    ``outputs`` holds the subnode of ``graph`` that drives each of them.
    Domain values are mapped through ``(c - c_offset) / c_scale`` before
    being clamped onto ``input_subnode``.
    """

    graph: FunctionalGraph
    input_subnode: int
    edge_ids: tuple
    outputs: tuple
    frozen_noise: np.ndarray
    shift_scale: float
    c_offset: float = 0.0
    c_scale: float = 1.0

    def __post_init__(self):
        if len(self.edge_ids) != len(self.outputs):
            raise ValueError("every shifted edge needs exactly one output subnode")
        if self.shift_scale < 0:
            raise ValueError("shift_scale must be non-negative")
        if self.c_scale <= 0:
            raise ValueError("c_scale must be positive")

    @property
    def output_map(self):
        return dict(zip(self.edge_ids, self.outputs))

    def normalized_for(self, schedule: TemporalDomainSchedule):
        """Copy whose input map sends the schedule's span onto [-1, 1]."""
        lo, hi = float(schedule.domains[0]), float(schedule.domains[-1])
        half = (hi - lo) / 2.0
        return replace(self, c_offset=(lo + hi) / 2.0, c_scale=half if half > 0 else 1.0)

    def response(self, cs):
        """Output-subnode values for a vector of domain values, shape (len(cs), n_edges)."""
        cs = np.atleast_1d(np.asarray(cs, dtype=float))
        u = (cs - self.c_offset) / self.c_scale
        vals = forward(self.graph, None, n=len(cs), noise=self.frozen_noise,
                       fixed={self.input_subnode: u})
        return vals.array[:, list(self.outputs)]


def sample_schedule(cfg: PriorConfig, rng) -> TemporalDomainSchedule:
    """Irregular domain grid with a random split of the samples across domains."""
    if cfg.max_total_samples < cfg.min_domains:
        raise ConfigError("max_total_samples cannot cover min_domains")
    t = int(rng.integers(cfg.min_domains, cfg.max_domains + 1))
    total = int(rng.integers(max(cfg.min_total_samples, t), cfg.max_total_samples + 1))
    sigma = rng.uniform(*cfg.gap_irregularity_range)
    base = log_uniform(rng, *cfg.gap_scale_range)
    gaps = base * np.exp(sigma * rng.standard_normal(t - 1))
    start = base * rng.uniform(0.0, 10.0)
    domains = start + np.concatenate([[0.0], np.cumsum(gaps)])
    alpha = log_uniform(rng, *cfg.domain_size_concentration_range)
    share = rng.dirichlet(np.full(t, alpha))
    counts = 1 + rng.multinomial(total - t, share)
    return TemporalDomainSchedule(domains, counts)


def select_shifted_edges(scm: ScmGraph, fg: FunctionalGraph, cfg: PriorConfig, rng) -> frozenset:
    """Causal edge ids chosen to drift; at least one is always selected.

    The functional edges that follow a selection are ``fg.edges_of(result)``.
    """
    m = len(scm.edges)
    if m == 0:
        raise SamplingError("cannot select shifted edges in an edgeless SCM")
    p = rng.uniform(*cfg.shift_sparsity_range)
    picked = np.flatnonzero(rng.random(m) < p)
    if len(picked) == 0:
        picked = np.array([rng.integers(0, m)])
    return frozenset(int(e) for e in picked)


def _descendants(fg: FunctionalGraph, start):
    seen = {start}
    for j in range(start + 1, fg.num_subnodes):
        pe = fg.parent_lists[j]
        if len(pe) and any(int(s) in seen for s in fg.edge_src[pe]):
            seen.add(j)
    return sorted(seen)


def build_second_order_scm(shifted_functional_edges, cfg: PriorConfig, rng) -> SecondOrderSCM:
    edges = tuple(int(e) for e in shifted_functional_edges)
    if not edges:
        raise ValueError("second-order SCM needs at least one shifted edge")
    scm = sample_scm(cfg, rng, cfg.sscm_min_nodes, cfg.sscm_max_nodes)
    graph = expand_to_functional(scm, cfg, rng, select=False)
    # input: a subnode of a causal root that has children, so outputs can depend on it
    sources = sorted({a for a, _ in scm.edges} - {b for _, b in scm.edges})
    root = sources[int(rng.integers(0, len(sources)))]
    group = graph.subnode_groups[root]
    input_subnode = int(group[int(rng.integers(0, len(group)))])
    candidates = np.asarray(_descendants(graph, input_subnode))
    n = len(edges)
    if n <= len(candidates):
        outputs = rng.choice(candidates, size=n, replace=False)
    else:
        extra = rng.choice(candidates, size=n - len(candidates), replace=True)
        outputs = rng.permutation(np.concatenate([candidates, extra]))
    frozen = rng.standard_normal(graph.num_subnodes) * graph.noise_scales
    scale = log_uniform(rng, *cfg.shift_scale_range) if cfg.shift_scale_range[1] > 0 else 0.0
    return SecondOrderSCM(
        graph=graph,
        input_subnode=input_subnode,
        edge_ids=edges,
        outputs=tuple(int(o) for o in outputs),
        frozen_noise=frozen,
        shift_scale=scale,
    )


def compute_edge_shifts(sscm: SecondOrderSCM, c: float) -> dict:
    if sscm.shift_scale == 0.0:
        return {e: 0.0 for e in sscm.edge_ids}
    out = sscm.shift_scale * sscm.response([c])[0]
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite edge shift")
    return {e: float(v) for e, v in zip(sscm.edge_ids, out)}


def apply_shifts(fg: FunctionalGraph, deltas: dict) -> FunctionalGraph:
    """Graph copy with ``w_e + delta_e`` on the given edges; ``fg`` is untouched."""
    if not deltas:
        return fg
    idx = np.fromiter(deltas.keys(), dtype=int, count=len(deltas))
    if np.any(idx < 0) or np.any(idx >= fg.num_edges):
        raise KeyError("delta refers to an edge outside the graph")
    w = fg.weights.copy()
    w[idx] += np.fromiter(deltas.values(), dtype=float, count=len(deltas))
    return fg.with_weights(w)


def discretize_target(raw_targets, num_classes: int, rng=None, jitter: float = 0.0):
    """Quantile-bin continuous targets into ``num_classes`` non-empty classes.

    Bin boundaries sit at the ``k/K`` quantiles of all values, each moved by
    up to ``jitter/(2K)`` in probability.
    """
    raw = np.asarray(raw_targets, dtype=float)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if len(np.unique(raw)) < num_classes:
        raise SamplingError(f"need {num_classes} distinct target values, got {len(np.unique(raw))}")
    probs = np.arange(1, num_classes) / num_classes
    if jitter > 0:
        probs = probs + jitter * rng.uniform(-0.5, 0.5, size=len(probs)) / num_classes
        probs = np.sort(np.clip(probs, 1e-6, 1 - 1e-6))
    cuts = np.quantile(raw, probs)
    labels = np.searchsorted(cuts, raw, side="right")
    if len(np.unique(labels)) < num_classes:
        raise SamplingError("quantile binning produced an empty class")
    return labels.astype(np.int64)


def _has_zero_variance(values):
    return bool(np.any(np.std(values, axis=0) <= _ZERO_STD))


def draw_rows(fg: FunctionalGraph, sscm: SecondOrderSCM, schedule: TemporalDomainSchedule, rng):
    """Per-domain loop: shift, update weights, sample ``n_k`` rows."""
    xs, ys = [], []
    for c, n in zip(schedule.domains, schedule.samples_per_domain):
        deltas = compute_edge_shifts(sscm, float(c))
        shifted = apply_shifts(fg, deltas)
        vals = forward(shifted, rng, n=int(n))
        xs.append(vals.array[:, list(fg.feature_subnodes)])
        ys.append(vals[fg.target_subnode])
    return np.concatenate(xs), np.concatenate(ys)


def sample_dataset(cfg: PriorConfig, rng, static: bool = False) -> DriftDataset:
    """Draw one drifting classification dataset.

    With ``static=True`` the second-order SCM is built with zero shift scale,
    which yields an i.i.d. dataset over the same domain schedule.
    """
    last = None
    for attempt in range(1, cfg.max_attempts + 1):
        try:
            num_classes = int(rng.integers(2, cfg.max_classes + 1))
            scm = sample_scm(cfg, rng)
            if not scm.edges:
                raise SamplingError("single-node SCM has no relationship to drift")
            fg = expand_to_functional(scm, cfg, rng)
            probe = forward(fg, rng, n=cfg.degenerate_probe).array
            if _has_zero_variance(probe[:, list(fg.feature_subnodes) + [fg.target_subnode]]):
                raise SamplingError("constant feature or target")
            if cfg.reject_independent_target and not fg.target_depends_on_features:
                raise SamplingError("target shares no noise source with any feature")
            chosen = select_shifted_edges(scm, fg, cfg, rng)
            sscm = build_second_order_scm(fg.edges_of(chosen), cfg, rng)
            if static:
                sscm = replace(sscm, shift_scale=0.0)
            schedule = sample_schedule(cfg, rng)
            sscm = sscm.normalized_for(schedule)
            x, y_raw = draw_rows(fg, sscm, schedule, rng)
            labels = discretize_target(y_raw, num_classes, rng, jitter=cfg.class_jitter)
            labels = rng.permutation(num_classes)[labels]
            domains = np.repeat(schedule.domains, schedule.samples_per_domain)
            return DriftDataset(x, labels, domains, num_classes, schedule)
        except (SamplingError, FloatingPointError) as exc:
            last = exc
    raise SamplingError(f"prior sampling failed after {cfg.max_attempts} attempts: {last}",
                        attempts=cfg.max_attempts)


PERTURB_MODES = ("boundary_shift", "merge", "noise")


def perturb_domains(ds: DriftDataset, mode: str, strength: float, rng, window: float = 0.1) -> DriftDataset:
    """Corrupt domain indices; features and labels are carried over unchanged.

    ``boundary_shift`` moves rows in the outer ``window`` fraction of each
    domain to the neighbouring domain with probability ``strength``;
    ``merge`` collapses each adjacent pair with probability ``strength``;
    ``noise`` adds Gaussian noise of std ``strength * mean_gap`` per domain.
    """
    if mode not in PERTURB_MODES:
        raise ConfigError(f"unknown perturbation mode {mode!r}")
    if not np.isfinite(strength) or strength < 0 or (mode != "noise" and strength > 1):
        raise ConfigError(f"invalid perturbation strength {strength}")
    sched = ds.schedule
    if mode in ("boundary_shift", "merge") and sched.num_domains < 2:
        raise ConfigError(f"{mode} needs at least two domains")
    if strength == 0:
        return ds
    values = sched.domains
    new_c = ds.domains.copy()
    if mode == "boundary_shift":
        slices = ds.domain_slices()
        for k, sl in enumerate(slices):
            n = sl.stop - sl.start
            w = int(np.floor(window * n))
            if w == 0:
                continue
            if k + 1 < len(slices):
                tail = np.arange(sl.stop - w, sl.stop)
                new_c[tail[rng.random(w) < strength]] = values[k + 1]
            if k > 0:
                head = np.arange(sl.start, sl.start + w)
                new_c[head[rng.random(w) < strength]] = values[k - 1]
    elif mode == "merge":
        target = values.copy()
        for k in range(1, len(values)):
            if rng.random() < strength:
                target[k] = target[k - 1]
        lookup = dict(zip(values.tolist(), target.tolist()))
        new_c = np.array([lookup[v] for v in ds.domains.tolist()])
    else:
        noisy = values + rng.normal(0.0, strength * sched.mean_gap, size=len(values))
        lookup = dict(zip(values.tolist(), noisy.tolist()))
        new_c = np.array([lookup[v] for v in ds.domains.tolist()])
    return DriftDataset.from_rows(ds.features, ds.labels, new_c, ds.num_classes)


# --- shift-type witnesses -------------------------------------------------

def _chain_graph(acts, edges, noise, features, target, origins):
    src = np.array([a for a, _, _ in edges])
    dst = np.array([b for _, b, _ in edges])
    w = np.array([v for _, _, v in edges], dtype=float)
    n = len(acts)
    return FunctionalGraph(
        num_subnodes=n,
        subnode_groups={i: (i,) for i in range(n)},
        intermediate_groups={},
        edge_src=src,
        edge_dst=dst,
        weights=w,
        origin=np.array(origins),
        activations=tuple(acts),
        noise_scales=np.array(noise, dtype=float),
        feature_subnodes=tuple(features),
        target_subnode=target,
    )


def linear_second_order_scm(edge_ids, scale):
    """Single-subnode second-order SCM: every delta equals ``scale`` times the normalised domain."""
    g = FunctionalGraph(
        num_subnodes=1, subnode_groups={0: (0,)}, intermediate_groups={},
        edge_src=np.array([], dtype=int), edge_dst=np.array([], dtype=int),
        weights=np.array([]), origin=np.array([], dtype=int),
        activations=("identity",), noise_scales=np.array([0.0]),
    )
    edge_ids = tuple(int(e) for e in edge_ids)
    return SecondOrderSCM(g, 0, edge_ids, (0,) * len(edge_ids), np.zeros(1), float(scale))


@dataclass(frozen=True)
class ShiftWitness:
    kind: str
    graph: FunctionalGraph
    sscm: SecondOrderSCM
    schedule: TemporalDomainSchedule

    def sample(self, rng, num_classes=2):
        sscm = self.sscm.normalized_for(self.schedule)
        x, y_raw = draw_rows(self.graph, sscm, self.schedule, rng)
        labels = discretize_target(y_raw, num_classes)
        domains = np.repeat(self.schedule.domains, self.schedule.samples_per_domain)
        return DriftDataset(x, labels, domains, num_classes, self.schedule)


def shift_witness(kind: str, num_domains: int = 5, per_domain: int = 200) -> ShiftWitness:
    """Handcrafted three-node SCMs whose single drifting edge realises one shift type.

    covariate: A -> X -> Y with Y thresholding X; the A->X weight scales in
        ``[0.5, 1.5]`` so P(X) moves while P(Y|X) and P(Y) stay put.
    concept: roots X1, X2 -> Y; only the X1->Y weight drifts (sign flips), so
        P(X) is fixed while P(Y|X) changes.
    prior: R -> Y -> X with R >= 0; drifting R->Y moves the mass of Y.
    """
    schedule = TemporalDomainSchedule(np.arange(num_domains, dtype=float),
                                      np.full(num_domains, per_domain))
    if kind == "covariate":
        g = _chain_graph(["identity", "identity", "identity"],
                         [(0, 1, 1.0), (1, 2, 1.0)], [1.0, 0.0, 0.0], [1], 2, [0, 1])
        sscm = linear_second_order_scm([0], 0.5)
    elif kind == "concept":
        g = _chain_graph(["identity", "identity", "identity"],
                         [(0, 2, 0.0), (1, 2, 1.0)], [1.0, 1.0, 0.1], [0, 1], 2, [0, 1])
        sscm = linear_second_order_scm([0], 2.0)
    elif kind == "prior":
        g = _chain_graph(["abs", "identity", "identity"],
                         [(0, 1, 0.0), (1, 2, 1.0)], [1.0, 0.3, 0.3], [2], 1, [0, 1])
        sscm = linear_second_order_scm([0], 2.0)
    else:
        raise ConfigError(f"unknown witness kind {kind!r}")
    return ShiftWitness(kind, g, sscm, schedule)
