from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftpfn.config import ConfigError, PriorConfig, SamplingError
from driftpfn.scm import (
    NO_ORIGIN,
    FunctionalGraph,
    ScmGraph,
    expand_to_functional,
    forward,
    sample_scm,
    select_features_target,
)


def has_cycle_dfs(nodes, edges):
    """Exhaustive DFS over all paths; independent of the topological ids."""
    adj = {v: [b for a, b in edges if a == v] for v in nodes}

    def walk(v, path):
        for w in adj[v]:
            if w in path or walk(w, path | {w}):
                return True
        return False

    return any(walk(v, {v}) for v in nodes)


def kahn_is_dag(n, src, dst):
    indeg = np.zeros(n, dtype=int)
    for b in dst:
        indeg[b] += 1
    ready = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while ready:
        v = ready.pop()
        seen += 1
        for a, b in zip(src, dst):
            if a == v:
                indeg[b] -= 1
                if indeg[b] == 0:
                    ready.append(b)
    return seen == n


def test_two_node_scm_has_the_edge():
    cfg = PriorConfig(min_nodes=2, max_nodes=2, density_range=(1.0, 1.0))
    g = sample_scm(cfg, np.random.default_rng(0))
    assert g.nodes == (0, 1)
    assert g.edges == ((0, 1),)


def test_single_node_scm():
    cfg = PriorConfig(min_nodes=1, max_nodes=1)
    g = sample_scm(cfg, np.random.default_rng(0))
    assert g.nodes == (0,) and g.edges == ()


def test_eight_node_scm_is_acyclic():
    cfg = PriorConfig(min_nodes=8, max_nodes=8, density_range=(0.5, 0.5))
    g = sample_scm(cfg, np.random.default_rng(3))
    assert len(g.nodes) == 8
    assert not has_cycle_dfs(g.nodes, g.edges)


def test_invalid_node_range_raises():
    with pytest.raises(ConfigError):
        PriorConfig(min_nodes=4, max_nodes=3)
    with pytest.raises(ConfigError):
        sample_scm(PriorConfig(), np.random.default_rng(0), min_nodes=0, max_nodes=2)


def test_scm_graph_rejects_cycles_and_self_loops():
    with pytest.raises(ValueError):
        ScmGraph((0, 1), ((1, 0),), (0, 1))
    with pytest.raises(ValueError):
        ScmGraph((0,), ((0, 0),), (0,))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lo=st.integers(2, 6), extra=st.integers(0, 4))
def test_sampled_scm_properties(seed, lo, extra):
    cfg = PriorConfig(min_nodes=lo, max_nodes=lo + extra)
    g = sample_scm(cfg, np.random.default_rng(seed))
    assert lo <= g.num_nodes <= lo + extra
    assert any(g.parents(v) for v in g.nodes)
    assert not has_cycle_dfs(g.nodes, g.edges)


def _fixed_counts_cfg(k, l):
    return PriorConfig(subnode_count_range=(k, k), intermediate_count_range=(l, l),
                       feature_count_range=(1, 1))


def test_expansion_edge_count_for_single_relationship():
    scm = ScmGraph((0, 1), ((0, 1),), (0, 1))
    # search seeds for k1 = 2, k2 = 1 with l2 fixed at 3
    cfg = PriorConfig(subnode_count_range=(1, 2), intermediate_count_range=(3, 3), feature_count_range=(1, 1))
    for seed in range(200):
        fg = expand_to_functional(scm, cfg, np.random.default_rng(seed))
        if len(fg.subnode_groups[0]) == 2 and len(fg.subnode_groups[1]) == 1:
            break
    else:
        pytest.fail("no seed gave the wanted subnode counts")
    assert len(fg.intermediate_groups[1]) == 3
    assert fg.num_edges == 2 * 3 + 3 * 1 == 9
    assert set(fg.origin.tolist()) == {0}


def test_single_node_expansion():
    scm = ScmGraph((0,), (), (0,))
    fg = expand_to_functional(scm, _fixed_counts_cfg(3, 2), np.random.default_rng(0))
    assert fg.num_subnodes == 3
    assert fg.num_edges == 0
    assert fg.intermediate_groups == {}


def check_functional_structure(scm, fg):
    """Bipartite edge sets, cardinality, origin mapping, acyclicity."""
    z_of = {s: i for i, grp in fg.subnode_groups.items() for s in grp}
    f_of = {s: j for j, grp in fg.intermediate_groups.items() for s in grp}
    parents = {j: scm.parents(j) for j in scm.nodes}
    for a, b, _, origin in fg.edges:
        if a in z_of and b in f_of:
            assert z_of[a] in parents[f_of[b]]
            assert origin == scm.edges.index((z_of[a], f_of[b]))
        elif a in f_of and b in z_of:
            assert f_of[a] == z_of[b]
            ps = parents[z_of[b]]
            assert origin == (scm.edges.index((ps[0], z_of[b])) if len(ps) == 1 else NO_ORIGIN)
        else:
            raise AssertionError(f"edge {a}->{b} is not Z->F or F->Z")
    for j in scm.nodes:
        if not parents[j]:
            assert j not in fg.intermediate_groups
            continue
        z_in = sum(len(fg.subnode_groups[i]) for i in parents[j])
        l_j = len(fg.intermediate_groups[j])
        expected = z_in * l_j + l_j * len(fg.subnode_groups[j])
        members = set(fg.intermediate_groups[j]) | set(fg.subnode_groups[j])
        got = sum(1 for a, b, _, _ in fg.edges if b in members)
        assert got == expected
    assert kahn_is_dag(fg.num_subnodes, fg.edge_src.tolist(), fg.edge_dst.tolist())
    assert fg.target_subnode not in fg.feature_subnodes


def test_random_five_node_expansion_structure():
    cfg = PriorConfig(min_nodes=5, max_nodes=5)
    rng = np.random.default_rng(11)
    scm = sample_scm(cfg, rng)
    fg = expand_to_functional(scm, cfg, rng)
    check_functional_structure(scm, fg)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_expansion_properties(seed):
    cfg = PriorConfig()
    rng = np.random.default_rng(seed)
    scm = sample_scm(cfg, rng)
    try:
        fg = expand_to_functional(scm, cfg, rng)
    except SamplingError:
        return
    check_functional_structure(scm, fg)


def _bare_graph(n):
    return FunctionalGraph(n, {i: (i,) for i in range(n)}, {}, np.array([], int), np.array([], int),
                           np.array([]), np.array([], int), ("identity",) * n, np.ones(n))


def test_forced_feature_target_assignment():
    fg = _bare_graph(2)
    cfg = PriorConfig(feature_count_range=(1, 1))
    out = select_features_target(fg, cfg, np.random.default_rng(0))
    assert len(out.feature_subnodes) == 1
    assert {out.feature_subnodes[0], out.target_subnode} == {0, 1}


def test_feature_target_disjoint():
    fg = _bare_graph(10)
    out = select_features_target(fg, PriorConfig(feature_count_range=(3, 3)), np.random.default_rng(5))
    assert len(out.feature_subnodes) == 3
    assert out.target_subnode not in out.feature_subnodes


def test_too_few_subnodes_is_a_sampling_error():
    with pytest.raises(SamplingError):
        select_features_target(_bare_graph(2), PriorConfig(feature_count_range=(2, 2)), np.random.default_rng(0))


def test_target_choice_is_uniform():
    fg = _bare_graph(6)
    cfg = PriorConfig(feature_count_range=(2, 2))
    rng = np.random.default_rng(2024)
    hits = np.zeros(6)
    for _ in range(1000):
        hits[select_features_target(fg, cfg, rng).target_subnode] += 1
    assert np.all(np.abs(hits / 1000 - 1 / 6) < 0.05)


def _chain_with_bystander():
    # 0 -> 1 -> 2 and an unconnected subnode 3
    return FunctionalGraph(4, {i: (i,) for i in range(4)}, {}, np.array([0, 1]), np.array([1, 2]),
                           np.array([1.0, 1.0]), np.array([0, 1]), ("identity",) * 4, np.ones(4))


def test_ancestors_follow_paths():
    fg = _chain_with_bystander()
    assert fg.ancestors(2) == {0, 1, 2}
    assert fg.ancestors(3) == {3}


@pytest.mark.parametrize("features, target, expected", [
    ((0,), 2, True),  # cause of the target
    ((2,), 0, True),  # effect of the target
    ((3,), 2, False),
    ((3, 1), 0, True),
    ((3,), 0, False),
])
def test_target_dependence(features, target, expected):
    fg = replace(_chain_with_bystander(), feature_subnodes=features, target_subnode=target)
    assert fg.target_depends_on_features is expected


def test_common_cause_counts_as_dependence():
    # 0 -> 1 and 0 -> 2: siblings share the noise of 0
    fg = FunctionalGraph(3, {i: (i,) for i in range(3)}, {}, np.array([0, 0]), np.array([1, 2]),
                         np.array([1.0, 1.0]), np.array([0, 1]), ("identity",) * 3, np.ones(3),
                         feature_subnodes=(1,), target_subnode=2)
    assert fg.target_depends_on_features


def test_forward_single_noiseless_identity():
    fg = FunctionalGraph(1, {0: (0,)}, {}, np.array([], int), np.array([], int), np.array([]),
                         np.array([], int), ("identity",), np.array([0.0]))
    assert forward(fg, np.random.default_rng(0)).values == {0: 0.0}


def test_forward_linear_chain():
    fg = FunctionalGraph(2, {0: (0,), 1: (1,)}, {}, np.array([0]), np.array([1]), np.array([2.0]),
                         np.array([0]), ("identity", "identity"), np.array([1.0, 0.0]))
    vals = forward(fg, None, noise=np.array([[1.5, 0.0]]))
    assert vals[1][0] == 3.0


def test_forward_determinism_and_variation():
    cfg = PriorConfig(min_nodes=4, max_nodes=4)
    rng = np.random.default_rng(8)
    fg = expand_to_functional(sample_scm(cfg, rng), cfg, rng)
    a = forward(fg, np.random.default_rng(1), n=4).array
    b = forward(fg, np.random.default_rng(1), n=4).array
    c = forward(fg, np.random.default_rng(2), n=4).array
    assert a.tobytes() == b.tobytes()
    noisy = fg.noise_scales > 0
    assert np.all(a[:, noisy] != c[:, noisy])


def test_forward_clips_values():
    fg = FunctionalGraph(2, {0: (0,), 1: (1,)}, {}, np.array([0]), np.array([1]), np.array([1e6]),
                         np.array([0]), ("identity", "identity"), np.array([1.0, 0.0]), clip_bound=10.0)
    vals = forward(fg, np.random.default_rng(0), n=200).array
    assert np.all(np.abs(vals) <= 10.0)
    assert np.abs(vals[:, 1]).max() == 10.0
