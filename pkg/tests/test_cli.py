import csv
import json

import numpy as np
import pytest

from driftpfn import cli
from driftpfn.benchmarks import load_benchmark, load_csv
from driftpfn.checkpoint import load_checkpoint
from driftpfn.model import predict

TINY = {
    "model": {"max_features": 4, "max_classes": 4, "embed_dim": 16, "num_layers": 1, "num_heads": 2, "t2v_dim": 4},
    "prior": {"max_classes": 4, "feature_count_range": [1, 4], "max_total_samples": 80},
    "optim": {"batch_size": 2},
    "train": {"steps": 4},
    "eval": {"benchmarks": ["binary_label_shift"], "variants": ["all_dom_w_ind", "last_dom_wo_ind"],
             "max_context": 60},
    "boundary": {"dataset": "rotated_two_moons", "grid": 3, "domains": [0.0, 9.0, 10.0], "max_context": 60},
}


def write_config(path, out, seed=0, **overrides):
    cfg = json.loads(json.dumps(TINY))
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    cfg.update(seed=seed, out=str(out))
    path.write_text(json.dumps(cfg))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_init_template_round_trips(tmp_path):
    path = tmp_path / "config.json"
    assert cli.main(["init", "--out", str(path), "--seed", "5"]) == 0
    raw = json.loads(path.read_text())
    assert raw["seed"] == 5
    assert set(raw) == {"seed", "out", "prior", "model", "optim", "gen", "train", "eval", "boundary"}
    assert raw["prior"]["max_attempts"] == 16 and raw["model"]["embed_dim"] == 128
    cfg = cli.RunConfig.from_dict(raw)
    assert cfg.to_dict() == raw


@pytest.mark.parametrize("mutate", [
    lambda c: c.pop("seed"),
    lambda c: c.update(seed="7"),
    lambda c: c.update(bogus={}),
    lambda c: c["model"].update(depth=3),
    lambda c: c["prior"].update(min_nodes=0),
    lambda c: c["train"].update(models=["drift", "fancy"]),
    lambda c: c["model"].update(max_classes=2),
])
def test_config_errors_exit_2(tmp_path, mutate, capsys):
    raw = json.loads(json.dumps(TINY))
    raw.update(seed=0, out=str(tmp_path / "run"))
    mutate(raw)
    (tmp_path / "c.json").write_text(json.dumps(raw))
    assert cli.main(["gen", "--config", str(tmp_path / "c.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_or_broken_config_exit_2(tmp_path):
    assert cli.main(["gen", "--config", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert cli.main(["gen", "--config", str(tmp_path / "bad.json")]) == 2


def test_gen_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", tmp_path / name, seed=3, gen={"num_datasets": 3})
        assert cli.main(["gen", "--config", str(cfg)]) == 0
        outs.append(tmp_path / name)
    for f in ["manifest.json"] + [f"datasets/prior_{i:05d}.csv" for i in range(3)]:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert (outs[0] / "run.log").exists()


def test_gen_workers_do_not_change_output(tmp_path):
    a = write_config(tmp_path / "a.json", tmp_path / "a", gen={"num_datasets": 2})
    b = write_config(tmp_path / "b.json", tmp_path / "b", gen={"num_datasets": 2})
    assert cli.main(["gen", "--config", str(a)]) == 0
    assert cli.main(["gen", "--config", str(b), "--workers", "2"]) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_gen_zero_datasets(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run", gen={"num_datasets": 0})
    assert cli.main(["gen", "--config", str(cfg)]) == 0
    manifest = json.loads((tmp_path / "run/manifest.json").read_text())
    assert manifest["files"] == {} and manifest["commands"]["gen"]["files"] == []


def test_generated_files_reload(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run", gen={"num_datasets": 2})
    assert cli.main(["gen", "--config", str(cfg)]) == 0
    for i in range(2):
        ds = load_csv(tmp_path / f"run/datasets/prior_{i:05d}.csv")
        assert set(ds.labels.tolist()) == set(range(ds.num_classes))
        assert ds.schedule.total == len(ds)


def test_gen_benchmark(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run")
    assert cli.main(["gen", "--config", str(cfg), "--benchmark", "sliding_circle"]) == 0
    ds = load_csv(tmp_path / "run/sliding_circle.csv")
    assert len(ds) == 2000
    assert ds.digest() == load_csv(tmp_path / "run/sliding_circle.csv").digest()


def test_train_single_step_and_hash(tmp_path):
    hashes = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", tmp_path / name, train={"models": ["drift"]})
        assert cli.main(["train", "--config", str(cfg), "--steps", "1"]) == 0
        model, state, meta = load_checkpoint(tmp_path / name / "drift.ckpt")
        assert state.step == 1 and meta["step"] == "1"
        hashes.append(json.loads((tmp_path / name / "manifest.json").read_text())["files"]["drift.ckpt"])
    assert hashes[0] == hashes[1]


class Crash(Exception):
    pass


def test_resume_after_interruption_is_exact(tmp_path, monkeypatch):
    full = write_config(tmp_path / "full.json", tmp_path / "full", train={"models": ["static"]})
    part = write_config(tmp_path / "part.json", tmp_path / "part",
                        train={"models": ["static"], "checkpoint_every": 3})
    assert cli.main(["train", "--config", str(full), "--steps", "6"]) == 0
    real = cli._write_trace

    def crash_after_snapshot(path, losses):
        real(path, losses)
        raise Crash

    monkeypatch.setattr(cli, "_write_trace", crash_after_snapshot)
    with pytest.raises(Crash):
        cli.main(["train", "--config", str(part), "--steps", "6"])
    monkeypatch.setattr(cli, "_write_trace", real)
    assert load_checkpoint(tmp_path / "part/static.ckpt")[1].step == 3
    assert cli.main(["train", "--config", str(part), "--steps", "6", "--resume"]) == 0
    assert (tmp_path / "part/static_loss.csv").read_bytes() == (tmp_path / "full/static_loss.csv").read_bytes()
    assert (tmp_path / "part/static.ckpt").read_bytes() == (tmp_path / "full/static.ckpt").read_bytes()


def test_extending_a_finished_run_is_continuous(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run", train={"models": ["drift"]})
    assert cli.main(["train", "--config", str(cfg), "--steps", "20"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--steps", "40", "--resume"]) == 0
    trace = np.array([float(r[1]) for r in read_rows(tmp_path / "run/drift_loss.csv")[1:]])
    assert len(trace) == 40
    recent = np.abs(np.diff(trace[10:20])).max()
    assert abs(trace[20] - trace[19]) <= 3 * recent


def test_resume_is_a_no_op_when_done(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run", train={"models": ["drift"]})
    assert cli.main(["train", "--config", str(cfg), "--steps", "2"]) == 0
    before = (tmp_path / "run/drift.ckpt").read_bytes()
    assert cli.main(["train", "--config", str(cfg), "--steps", "2", "--resume"]) == 0
    assert (tmp_path / "run/drift.ckpt").read_bytes() == before


def test_eval_missing_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "run")
    assert cli.main(["eval", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "drift.ckpt" in err and "driftpfn train" in err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "c.json", root / "run")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return root, cfg


def test_eval_report(trained_run):
    root, cfg = trained_run
    assert cli.main(["eval", "--config", str(cfg)]) == 0
    rows = read_rows(root / "run/report.csv")
    assert rows[0] == ["dataset", "variant", "split", "metric", "mean", "ci95", "n_seeds"]
    # 2 models x 2 variants x 2 splits x 4 metrics
    assert len(rows) == 1 + 32
    assert {r[1] for r in rows[1:]} == {"drift/all_dom_w_ind", "drift/last_dom_wo_ind",
                                         "static/all_dom_w_ind", "static/last_dom_wo_ind"}
    assert all(r[6] == "3" for r in rows[1:])


def test_boundary_grid_rows(trained_run):
    root, cfg = trained_run
    assert cli.main(["boundary", "--config", str(cfg)]) == 0
    rows = read_rows(root / "run/boundary.csv")
    assert rows[0] == ["x0", "x1", "domain", "argmax", "maxprob"]
    assert len(rows) - 1 == 3 * 3 * 3
    assert all(0.0 <= float(r[4]) <= 1.0 for r in rows[1:])


def test_boundary_small_grid(trained_run, tmp_path):
    root, _ = trained_run
    cfg = write_config(tmp_path / "c.json", root / "run", boundary={"grid": 2, "domains": [1.0, 2.0]})
    assert cli.main(["boundary", "--config", str(cfg)]) == 0
    assert len(read_rows(root / "run/boundary.csv")) - 1 == 4 * 2


def test_boundary_cell_matches_point_prediction(trained_run):
    root, _ = trained_run
    model = load_checkpoint(root / "run/drift.ckpt")[0]
    ds = load_benchmark("rotated_two_moons")
    # with zero padding the lattice corners are the feature-wise extremes; add a row sitting on one
    corner = ds.features.min(axis=0)
    x = np.vstack([ds.features[:200], corner])
    y = np.append(ds.labels[:200], 1)
    c = np.append(ds.domains[:200], 0.0)
    rows = cli.boundary_grid(model, x, y, c, [0.0], grid=4, padding=0.0)
    cell = next(r for r in rows if (r[0], r[1]) == (corner[0], corner[1]))
    point = predict(model, x, y, c, corner[None, :], [0.0])[0]
    assert cell[3] == int(point.argmax())
    # float32 attention: batch composition moves the result by a few ulps
    assert cell[4] == pytest.approx(float(point.max()), abs=1e-6)


def test_boundary_needs_two_features(trained_run, tmp_path):
    root, _ = trained_run
    cfg = write_config(tmp_path / "c.json", root / "run", boundary={"dataset": "rotating_hyperplane"})
    assert cli.main(["boundary", "--config", str(cfg)]) == 3
