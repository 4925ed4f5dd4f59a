"""Causal graphs, their scalar functional expansion, and noise propagation.

A causal node ``z_i`` expands into ``k_i`` scalar subnodes. Every node ``z_j``
with parents also gets ``l_j`` intermediate subnodes ``F_j``; the parents'
subnodes feed ``F_j`` and ``F_j`` feeds ``Z_j``. Each subnode computes an
activation of a weighted sum of its inputs plus freshly drawn noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .config import ConfigError, PriorConfig, SamplingError, log_uniform

ACTIVATIONS = {
    "identity": lambda v: v,
    "tanh": np.tanh,
    "abs": np.abs,
    "sin": np.sin,
    "softplus": lambda v: np.logaddexp(0.0, v),
}

NO_ORIGIN = -1


@dataclass(frozen=True)
class ScmGraph:
    nodes: tuple
    edges: tuple
    topo_order: tuple

    def __post_init__(self):
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges")
        pos = {v: i for i, v in enumerate(self.topo_order)}
        if sorted(pos) != sorted(self.nodes):
            raise ValueError("topo_order is not a permutation of nodes")
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if pos[a] >= pos[b]:
                raise ValueError(f"edge {a}->{b} violates topological order")

    def parents(self, node):
        return tuple(a for a, b in self.edges if b == node)

    @property
    def num_nodes(self):
        return len(self.nodes)


@dataclass(frozen=True)
class FunctionalGraph:
    """Scalar-node DAG. Subnode ids are ``0..num_subnodes-1`` and that order
    is topological, which :func:`forward` relies on."""

    num_subnodes: int
    subnode_groups: dict
    intermediate_groups: dict
    edge_src: np.ndarray
    edge_dst: np.ndarray
    weights: np.ndarray
    origin: np.ndarray
    activations: tuple
    noise_scales: np.ndarray
    feature_subnodes: tuple = ()
    target_subnode: int | None = None
    clip_bound: float = 1e4

    def __post_init__(self):
        for name in ("edge_src", "edge_dst", "weights", "origin", "noise_scales"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.edge_src >= self.edge_dst):
            raise ValueError("subnode ids must follow a topological order")
        if self.target_subnode is not None and self.target_subnode in self.feature_subnodes:
            raise ValueError("target subnode is also a feature")

    @property
    def num_edges(self):
        return len(self.weights)

    @property
    def edges(self):
        return list(zip(self.edge_src.tolist(), self.edge_dst.tolist(),
                        self.weights.tolist(), self.origin.tolist()))

    @property
    def noise_specs(self):
        return {i: ("normal", float(s)) for i, s in enumerate(self.noise_scales)}

    @cached_property
    def weight_matrix(self):
        w = np.zeros((self.num_subnodes, self.num_subnodes))
        w[self.edge_src, self.edge_dst] = self.weights
        return w

    @cached_property
    def parent_lists(self):
        parents = [[] for _ in range(self.num_subnodes)]
        for e, (a, b) in enumerate(zip(self.edge_src.tolist(), self.edge_dst.tolist())):
            parents[b].append(e)
        return [np.array(p, dtype=int) for p in parents]

    @cached_property
    def z_subnodes(self):
        return tuple(sorted(s for group in self.subnode_groups.values() for s in group))

    def ancestors(self, subnode):
        """``subnode`` together with every subnode that has a path into it."""
        seen, stack = {int(subnode)}, [int(subnode)]
        while stack:
            for e in self.parent_lists[stack.pop()]:
                s = int(self.edge_src[e])
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        return frozenset(seen)

    @property
    def target_depends_on_features(self):
        """Whether the target shares a noise source with at least one feature.

        Every subnode injects its own noise, so a target without a common
        ancestor is statistically independent of all features.
        """
        if self.target_subnode is None:
            return False
        t = self.ancestors(self.target_subnode)
        return any(self.ancestors(f) & t for f in self.feature_subnodes)

    def edges_of(self, causal_edge_ids):
        """Indices of functional edges whose origin is in ``causal_edge_ids``."""
        wanted = np.asarray(sorted(causal_edge_ids), dtype=int)
        return np.flatnonzero(np.isin(self.origin, wanted))

    def with_weights(self, weights):
        return replace(self, weights=np.asarray(weights, dtype=float))


@dataclass
class NodeValues:
    """Propagated values, one row per sample and one column per subnode."""

    array: np.ndarray

    def __getitem__(self, subnode):
        return self.array[:, subnode]

    @property
    def values(self):
        if self.array.shape[0] != 1:
            raise ValueError("values mapping is only defined for a single sample")
        return {i: float(v) for i, v in enumerate(self.array[0])}


def _randint(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def sample_scm(cfg: PriorConfig, rng, min_nodes=None, max_nodes=None) -> ScmGraph:
    """Random DAG over ``[min_nodes, max_nodes]`` nodes.

    Node ids follow a topological order; each forward pair becomes an edge
    with a per-graph probability drawn from ``cfg.density_range``. A graph
    with two or more nodes always has at least one edge.
    """
    lo = cfg.min_nodes if min_nodes is None else min_nodes
    hi = cfg.max_nodes if max_nodes is None else max_nodes
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid node range ({lo}, {hi})")
    n = int(rng.integers(lo, hi + 1))
    density = rng.uniform(*cfg.density_range)
    edges = []
    for b in range(1, n):
        mask = rng.random(b) < density
        edges.extend((a, b) for a in np.flatnonzero(mask).tolist())
    if n >= 2 and not edges:
        b = int(rng.integers(1, n))
        a = int(rng.integers(0, b))
        edges.append((a, b))
    edges.sort(key=lambda e: (e[1], e[0]))
    nodes = tuple(range(n))
    return ScmGraph(nodes=nodes, edges=tuple(edges), topo_order=nodes)


def expand_to_functional(scm: ScmGraph, cfg: PriorConfig, rng, select=True) -> FunctionalGraph:
    counts = {i: _randint(rng, cfg.subnode_count_range) for i in scm.topo_order}
    parents = {j: scm.parents(j) for j in scm.topo_order}
    edge_index = {e: k for k, e in enumerate(scm.edges)}

    z_groups, f_groups = {}, {}
    next_id = 0
    for j in scm.topo_order:
        if parents[j]:
            l_j = _randint(rng, cfg.intermediate_count_range)
            f_groups[j] = tuple(range(next_id, next_id + l_j))
            next_id += l_j
        z_groups[j] = tuple(range(next_id, next_id + counts[j]))
        next_id += counts[j]

    src, dst, origin = [], [], []
    for j in scm.topo_order:
        if not parents[j]:
            continue
        for i in parents[j]:
            for a in z_groups[i]:
                for f in f_groups[j]:
                    src.append(a)
                    dst.append(f)
                    origin.append(edge_index[(i, j)])
        # F_j -> Z_j edges belong to a single relationship only when j has one parent
        tag = edge_index[(parents[j][0], j)] if len(parents[j]) == 1 else NO_ORIGIN
        for f in f_groups[j]:
            for b in z_groups[j]:
                src.append(f)
                dst.append(b)
                origin.append(tag)

    std = log_uniform(rng, *cfg.weight_std_range)
    weights = rng.normal(0.0, std, size=len(src))
    names = tuple(cfg.activations)
    acts = tuple(names[k] for k in rng.integers(0, len(names), size=next_id))
    has_parent = np.zeros(next_id, dtype=bool)
    has_parent[np.asarray(dst, dtype=int)] = True
    noise = np.where(
        has_parent,
        [log_uniform(rng, *cfg.noise_scale_range) for _ in range(next_id)],
        cfg.root_noise_scale,
    )
    fg = FunctionalGraph(
        num_subnodes=next_id,
        subnode_groups=z_groups,
        intermediate_groups=f_groups,
        edge_src=np.asarray(src, dtype=int),
        edge_dst=np.asarray(dst, dtype=int),
        weights=weights,
        origin=np.asarray(origin, dtype=int),
        activations=acts,
        noise_scales=noise,
        clip_bound=cfg.clip_bound,
    )
    if select:
        fg = select_features_target(fg, cfg, rng)
    return fg


def select_features_target(fg: FunctionalGraph, cfg: PriorConfig, rng, num_features=None) -> FunctionalGraph:
    """Draw a random feature subset of the causal subnodes and a disjoint target."""
    candidates = np.asarray(fg.z_subnodes)
    k = _randint(rng, cfg.feature_count_range) if num_features is None else int(num_features)
    if len(candidates) < k + 1:
        raise SamplingError(f"{len(candidates)} subnodes cannot hold {k} features plus a target")
    picked = rng.choice(candidates, size=k + 1, replace=False)
    features = tuple(int(v) for v in picked[:k])
    target = int(picked[k])
    return replace(fg, feature_subnodes=features, target_subnode=target)


def forward(fg: FunctionalGraph, rng, n=1, noise=None, fixed=None) -> NodeValues:
    """Propagate ``n`` independent noise draws through the graph.

    ``noise`` overrides the sampled noise with an ``(n, num_subnodes)`` array.
    ``fixed`` maps subnode ids to values that replace the computed ones
    (used to clamp the drift-input subnode).
    """
    s = fg.num_subnodes
    if noise is None:
        noise = rng.standard_normal((n, s)) * fg.noise_scales
    else:
        noise = np.broadcast_to(np.asarray(noise, dtype=float), (n, s))
    values = np.zeros((n, s))
    bound = fg.clip_bound
    w = fg.weights
    src = fg.edge_src
    for j in range(s):
        if fixed is not None and j in fixed:
            values[:, j] = fixed[j]
            continue
        pe = fg.parent_lists[j]
        pre = noise[:, j]
        if len(pe):
            pre = values[:, src[pe]] @ w[pe] + pre
        out = ACTIVATIONS[fg.activations[j]](pre)
        values[:, j] = np.clip(out, -bound, bound)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite value during forward propagation")
    return NodeValues(values)
