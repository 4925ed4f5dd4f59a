import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from driftpfn import evaluation as ev
from driftpfn.config import ConfigError, PriorConfig
from driftpfn.dataset import DriftDataset
from driftpfn.drift_prior import sample_dataset


def equal_domains(t, per, k=2, seed=0):
    rng = np.random.default_rng(seed)
    n = t * per
    y = np.arange(n) % k
    return DriftDataset.from_rows(rng.normal(size=(n, 2)), y, np.repeat(np.arange(t, dtype=float), per))


# --- splits ----------------------------------------------------------------

def test_ten_equal_domains_feasible_boundaries():
    assert ev.feasible_boundaries(equal_domains(10, 20)) == [3, 4, 5, 6, 7, 8]


def test_two_balanced_domains_single_boundary():
    ds = equal_domains(2, 30)
    assert ev.feasible_boundaries(ds) == [1]
    split = ev.eval_fix_split(ds, np.random.default_rng(0))
    assert split.boundary == 0.0 and len(split.ood_test) == 30


def test_boundary_choice_is_uniform():
    ds = equal_domains(10, 20)
    rng = np.random.default_rng(0)
    hits = np.bincount([ev.eval_fix_split(ds, rng).boundary_index for _ in range(1200)], minlength=10)
    assert np.all(np.abs(hits[3:9] / 1200 - 1 / 6) < 0.04)
    assert hits[:3].sum() == hits[9:].sum() == 0


def test_id_counts_match_counting_oracle():
    counts = [4, 5, 15, 25, 35, 6]
    rng = np.random.default_rng(1)
    c = np.repeat(np.arange(6.0), counts)
    y = np.arange(len(c)) % 2
    ds = DriftDataset.from_rows(rng.normal(size=(len(c), 1)), y, c)
    for seed in range(50):
        split = ev.eval_fix_split(ds, np.random.default_rng(seed))
        assert oracles.split_violations(ds, split) == []
        for k in range(split.boundary_index):
            n_id = np.sum(ds.domains[split.id_test] == k)
            want = int(np.floor(0.1 * counts[k] + 0.5))
            assert n_id == want + (split.id_repairs or {}).get(k, 0)


def test_coverage_repair_adds_rare_class_to_id():
    # class 2 has a single pre-boundary row besides one more: repair must move one of them to ID
    c = np.repeat(np.arange(4.0), 10)
    y = np.zeros(40, dtype=int)
    y[::2] = 1
    y[[3, 7, 33]] = 2
    ds = DriftDataset.from_rows(np.arange(40.0)[:, None], y, c)
    for seed in range(30):
        split = ev.eval_fix_split(ds, np.random.default_rng(seed))
        assert oracles.split_violations(ds, split) == []
        assert 2 in ds.labels[split.id_test]


def test_unsplittable_datasets():
    with pytest.raises(ev.SplitError):
        ev.eval_fix_split(equal_domains(1, 20), np.random.default_rng(0))
    c = np.repeat([0.0, 1.0, 2.0], 10)
    y = np.array([0] * 20 + [1] * 10)  # class 1 only after every boundary
    with pytest.raises(ev.SplitError):
        ev.eval_fix_split(DriftDataset.from_rows(np.zeros((30, 1)), y, c), np.random.default_rng(0))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_invariants_on_prior_datasets(seed):
    rng = np.random.default_rng(seed)
    ds = sample_dataset(PriorConfig(min_domains=3), rng)
    try:
        split = ev.eval_fix_split(ds, rng)
    except ev.SplitError:
        return
    assert oracles.split_violations(ds, split) == []
    assert ev.check_split(ds, split) == []


def test_train_rows_do_not_depend_on_test_features():
    ds = equal_domains(10, 20)
    split = ev.eval_fix_split(ds, np.random.default_rng(3))
    x = ds.features.copy()
    x[split.ood_test] = 1e9
    x[split.id_test] += 7.0
    mutated = DriftDataset(x, ds.labels, ds.domains, ds.num_classes, ds.schedule)
    again = ev.eval_fix_split(mutated, np.random.default_rng(3))

    def digest(d, rows):
        return hashlib.sha256(d.features[rows].tobytes() + d.labels[rows].tobytes()).hexdigest()

    assert np.array_equal(again.train, split.train)
    assert digest(ds, split.train) == digest(mutated, again.train)


# --- metrics ---------------------------------------------------------------

def test_metric_examples():
    y = np.array([0, 1, 2, 1])
    assert ev.accuracy(y, y) == 1.0 and ev.macro_f1(y, y) == 1.0
    # TP=1 FP=1 FN=1 TN=1 for class 1
    yt, yp = np.array([1, 0, 1, 0]), np.array([1, 1, 0, 0])
    f1_class1 = 2 * 1 / (2 * 1 + 1 + 1)
    assert f1_class1 == 0.5
    assert ev.macro_f1(yt, yp) == pytest.approx(0.5)
    assert ev.roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert ev.roc_auc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5
    assert ev.ece([0, 1], np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.0
    assert ev.ece([0, 0], np.array([[0.8, 0.2], [0.4, 0.6]]), num_bins=1) == pytest.approx(0.2, abs=1e-15)


def test_macro_f1_counts_missing_predictions_as_zero():
    assert ev.macro_f1([0, 1], [0, 0]) == pytest.approx((2 / 3 + 0.0) / 2)


def random_instance(rng):
    n = int(rng.integers(2, 51))
    k = int(rng.integers(2, 6))
    y = rng.integers(0, k, n)
    y[:2] = [0, 1]
    probs = rng.dirichlet(np.ones(k), n)
    if rng.random() < 0.3:
        probs = np.round(probs, 1)  # ties in scores and confidences
        probs /= probs.sum(axis=1, keepdims=True)
    return y, probs


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        y, probs = random_instance(rng)
        pred = probs.argmax(axis=1)
        assert abs(ev.accuracy(y, pred) - oracles.accuracy(y, pred)) <= 1e-12
        assert abs(ev.macro_f1(y, pred) - oracles.macro_f1(y, pred)) <= 1e-12
        assert abs(ev.ece(y, probs) - oracles.ece(y, probs.tolist())) <= 1e-12
        yb = (y == 1).astype(int)
        assert abs(ev.roc_auc(yb, probs[:, 1]) - oracles.binary_auc(yb, probs[:, 1])) <= 1e-12
        if len(np.unique(y)) > 1 and probs.shape[1] > 2:
            p = probs.tolist()
            assert abs(ev.roc_auc(y, probs) - oracles.ovr_auc(y, p)) <= 1e-12
            assert abs(ev.roc_auc(y, probs, average="weighted") - oracles.ovr_auc(y, p, weighted=True)) <= 1e-12


def test_ece_merge_equals_pooled_bins():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y1, p1 = random_instance(rng)
        y2, p2 = rng.integers(0, p1.shape[1], 30), rng.dirichlet(np.ones(p1.shape[1]), 30)
        t1, t2 = oracles.ece_bins(y1, p1.tolist()), oracles.ece_bins(y2, p2.tolist())
        pooled = [[a[i] + b[i] for i in range(3)] for a, b in zip(t1, t2)]
        merged = ev.ece(np.concatenate([y1, y2]), np.vstack([p1, p2]))
        assert abs(merged - oracles.ece_from_bins(pooled)) <= 1e-12


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_lie_in_unit_interval(seed):
    y, probs = random_instance(np.random.default_rng(seed))
    rep = ev.evaluate_probs(y, probs, "OOD")
    for v in rep.as_dict().values():
        assert 0.0 <= v <= 1.0 or np.isnan(v)


def test_roc_auc_rejects_unknown_average():
    with pytest.raises(ValueError):
        ev.roc_auc([0, 1, 2], np.eye(3), average="micro")


# --- runner ----------------------------------------------------------------

def prior_predictor(model, x, y, c, xq, cq):
    """Class frequencies of the context, optionally tilted by domain."""
    k = 3
    freq = np.bincount(y, minlength=k) + model
    p = np.tile(freq / freq.sum(), (len(xq), 1))
    p[:, np.bincount(y, minlength=k) == 0] = 0
    return p / p.sum(axis=1, keepdims=True)


def three_class(seed=0):
    rng = np.random.default_rng(seed)
    c = np.repeat(np.arange(10.0), 30)
    y = np.tile(np.arange(3), 100)
    return DriftDataset.from_rows(rng.normal(size=(300, 2)), y, c)


def test_identical_models_identical_tables():
    rows, _ = ev.run_comparison({"a": 1.0, "b": 1.0}, {"toy": three_class()}, predict_fn=prior_predictor)
    by = {}
    for r in rows:
        model, variant = r["variant"].split("/")
        by.setdefault(model, {})[(variant, r["split"], r["metric"])] = (r["mean"], r["ci95"])
    assert by["a"] == by["b"]


def test_last_domain_context_size():
    ds = three_class()
    split = ev.eval_fix_split(ds, np.random.default_rng(11))
    x, y, c, qdom = ev.variant_inputs(ds, split, "last_dom_wo_ind")
    boundary_rows = np.flatnonzero(ds.domains == split.boundary)
    assert len(y) == len(np.setdiff1d(boundary_rows, split.id_test))
    assert np.all(c == 0) and np.all(qdom(split.ood_test) == 0)
    x, y, c, qdom = ev.variant_inputs(ds, split, "all_dom_w_ind")
    assert len(y) == len(split.train)
    assert np.array_equal(qdom(split.ood_test), ds.domains[split.ood_test])
    with pytest.raises(ConfigError):
        ev.variant_inputs(ds, split, "future")


def test_ci_matches_t_interval():
    _, raw = ev.run_comparison({"m": 0.5}, {"toy": three_class(1)}, variants=["all_dom_wo_ind"],
                               predict_fn=lambda m, x, y, c, xq, cq: np.random.default_rng(len(y)).dirichlet(
                                   np.ones(3), len(xq)))
    rows = ev.aggregate(raw)
    for r in rows:
        values = [v["value"] for v in raw if v["split"] == r["split"] and v["metric"] == r["metric"]]
        assert r["n_seeds"] == 3
        assert r["ci95"] == pytest.approx(oracles.t_half_width(values), rel=1e-9)


def test_report_header(tmp_path):
    rows, _ = ev.run_comparison({"m": 1.0}, {"toy": three_class()}, variants=["all_dom_w_ind"],
                                predict_fn=prior_predictor)
    path = tmp_path / "report.csv"
    ev.write_report(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "dataset,variant,split,metric,mean,ci95,n_seeds"
    assert len(lines) == 1 + 2 * 4
