"""Command-line runner: init, gen, train, eval, boundary.

Every command reads one JSON run config. Artifacts go to a single output
directory together with ``manifest.json`` (sha256 of every artifact);
timestamps appear only in ``run.log``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .benchmarks import BENCHMARKS, load_benchmark, load_csv, save_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, DataError, PriorConfig, SamplingError, TrainingFault
from .drift_prior import sample_dataset
from .evaluation import SPLIT_SEEDS, VARIANTS, run_comparison, write_report
from .model import DOMAIN_ENCODINGS, IclModel, predict
from .training import OptimConfig, train_stream

log = logging.getLogger("driftpfn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4
MODEL_KINDS = {"drift": 0.0, "static": 1.0}

MODEL_DEFAULTS = dict(max_features=8, max_classes=10, embed_dim=128, num_layers=4, num_heads=4,
                      ff_dim=None, t2v_dim=8, domain_encoding="t2v", train_t2v=True, init_seed=0)
OPTIM_DEFAULTS = {f.name: f.default for f in dataclasses.fields(OptimConfig) if f.name != "static_fraction"}
OPTIM_DEFAULTS["betas"] = list(OPTIM_DEFAULTS["betas"])
SECTION_DEFAULTS = {
    "gen": dict(num_datasets=10, benchmark=None),
    "train": dict(steps=1000, models=["drift", "static"], checkpoint_every=0),
    "eval": dict(benchmarks=["rotated_two_moons", "sliding_circle", "binary_label_shift"],
                 datasets=[], variants=list(VARIANTS), seeds=list(SPLIT_SEEDS), max_context=300,
                 num_bins=10, auc_average="macro", checkpoints={}),
    "boundary": dict(dataset="rotated_two_moons", checkpoint="drift", grid=50, domains=None,
                     context_domains=None, padding=0.5, max_context=300),
}


@dataclasses.dataclass
class RunConfig:
    seed: int
    out: str
    prior: PriorConfig
    model: dict
    optim: dict
    gen: dict
    train: dict
    eval: dict
    boundary: dict

    @classmethod
    def template(cls, seed=0, out="run"):
        return cls(seed, out, PriorConfig(), dict(MODEL_DEFAULTS), dict(OPTIM_DEFAULTS),
                   *(dict(SECTION_DEFAULTS[k]) for k in ("gen", "train", "eval", "boundary")))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["prior"] = self.prior.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if "seed" not in raw or not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("config needs an integer 'seed'")
        sections = {}
        for name, defaults in [("model", MODEL_DEFAULTS), ("optim", OPTIM_DEFAULTS), *SECTION_DEFAULTS.items()]:
            given = raw.get(name, {})
            extra = set(given) - set(defaults)
            if extra:
                raise ConfigError(f"unknown options in '{name}': {sorted(extra)}")
            sections[name] = {**defaults, **given}
        cfg = cls(raw["seed"], str(raw.get("out", "run")), PriorConfig.from_dict(raw.get("prior", {})), **sections)
        cfg.validate()
        return cfg

    def validate(self):
        m = self.model
        if m["domain_encoding"] not in DOMAIN_ENCODINGS:
            raise ConfigError(f"model.domain_encoding must be one of {DOMAIN_ENCODINGS}")
        for key in ("max_features", "max_classes", "embed_dim", "num_layers", "num_heads", "t2v_dim"):
            if not isinstance(m[key], int) or m[key] < 1:
                raise ConfigError(f"model.{key} must be a positive integer")
        if m["embed_dim"] % m["num_heads"]:
            raise ConfigError("model.embed_dim must be divisible by model.num_heads")
        if self.prior.max_classes > m["max_classes"]:
            raise ConfigError("prior.max_classes exceeds model.max_classes")
        if self.prior.feature_count_range[1] > m["max_features"]:
            raise ConfigError("prior.feature_count_range exceeds model.max_features")
        self.optim_config(0.0)
        if self.gen["num_datasets"] < 0:
            raise ConfigError("gen.num_datasets must be >= 0")
        if self.gen["benchmark"] is not None and self.gen["benchmark"] not in BENCHMARKS:
            raise ConfigError(f"gen.benchmark must be one of {sorted(BENCHMARKS)}")
        if self.train["steps"] < 1:
            raise ConfigError("train.steps must be >= 1")
        bad = set(self.train["models"]) - set(MODEL_KINDS)
        if bad or not self.train["models"]:
            raise ConfigError(f"train.models must be a non-empty subset of {sorted(MODEL_KINDS)}")
        if set(self.eval["variants"]) - set(VARIANTS):
            raise ConfigError(f"eval.variants must be a subset of {list(VARIANTS)}")
        if self.eval["auc_average"] not in ("macro", "weighted"):
            raise ConfigError("eval.auc_average must be 'macro' or 'weighted'")
        if self.eval["num_bins"] < 1 or not self.eval["seeds"]:
            raise ConfigError("eval.num_bins must be >= 1 and eval.seeds non-empty")
        if self.boundary["grid"] < 1:
            raise ConfigError("boundary.grid must be >= 1")

    def optim_config(self, static_fraction):
        o = dict(self.optim)
        o["betas"] = tuple(o["betas"])
        try:
            return OptimConfig(**o, static_fraction=static_fraction)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def build_model(self):
        m = dict(self.model)
        seed = m.pop("init_seed")
        return IclModel(**m, seed=seed)


# --- artifacts ---------------------------------------------------------------

def sha256_of(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out: Path, command, files, cfg: RunConfig):
    """Record artifact hashes; entries from earlier commands are kept."""
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"files": {}, "commands": {}}
    # the output location is not part of the run's identity
    config_text = json.dumps({k: v for k, v in cfg.to_dict().items() if k != "out"}, sort_keys=True)
    manifest["commands"][command] = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": cfg.seed,
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    for f in files:
        manifest["files"][str(Path(f).relative_to(out))] = sha256_of(f)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def setup_logging(out: Path):
    log.setLevel(logging.INFO)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)


# --- commands ----------------------------------------------------------------

def cmd_init(path, seed=0, out="run"):
    cfg = RunConfig.template(seed=seed, out=out)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return [Path(path)]


def _gen_one(args):
    prior, seed, i, path = args
    ds = sample_dataset(prior, np.random.default_rng([seed, i]))
    save_csv(ds, path)
    return path


def cmd_gen(cfg: RunConfig, out: Path, workers=1, benchmark=None):
    benchmark = benchmark or cfg.gen["benchmark"]
    if benchmark:
        path = out / f"{benchmark}.csv"
        save_csv(load_benchmark(benchmark, seed=cfg.seed), path)
        files = [path]
    else:
        (out / "datasets").mkdir(exist_ok=True)
        jobs = [(cfg.prior, cfg.seed, i, out / "datasets" / f"prior_{i:05d}.csv")
                for i in range(cfg.gen["num_datasets"])]
        if workers > 1 and jobs:
            with ProcessPoolExecutor(workers) as pool:
                files = list(pool.map(_gen_one, jobs))
        else:
            files = [_gen_one(j) for j in jobs]
    log.info("gen wrote %d dataset files", len(files))
    update_manifest(out, "gen", files, cfg)
    return files


def _read_trace(path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def _write_trace(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(v)])


def cmd_train(cfg: RunConfig, out: Path, steps=None, workers=1, resume=False):
    """Train the configured models up to ``steps`` total optimizer steps."""
    torch.use_deterministic_algorithms(True)
    target = steps or cfg.train["steps"]
    files = []
    for kind in cfg.train["models"]:
        opt = cfg.optim_config(MODEL_KINDS[kind])
        ckpt, trace = out / f"{kind}.ckpt", out / f"{kind}_loss.csv"
        state, losses = None, []
        if resume and ckpt.exists():
            model, state, _ = load_checkpoint(ckpt, opt)
            if state is None:
                raise DataError(f"{ckpt} holds no optimizer state; cannot resume")
            losses = _read_trace(trace)[: state.step]
            state.losses = list(losses)
            if state.step >= target:
                log.info("%s already at step %d", kind, state.step)
                files += [ckpt, trace]
                continue
            state.total_steps = target
            model.train()
        else:
            model = cfg.build_model()
        every = cfg.train["checkpoint_every"]

        def snapshot(st, model=model, ckpt=ckpt, trace=trace):
            if every and st.step % every == 0:
                save_checkpoint(ckpt, model, st)
                _write_trace(trace, st.losses)

        start = state.step if state else 0
        log.info("training %s from step %d to %d", kind, start, target)
        state = train_stream(model, cfg.prior, target - start, opt, seed=cfg.seed, state=state,
                             workers=workers, callback=snapshot, total_steps=target)
        save_checkpoint(ckpt, model, state)
        _write_trace(trace, state.losses)
        log.info("%s done: step %d, running loss %.4f", kind, state.step, state.running_loss)
        files += [ckpt, trace]
    update_manifest(out, "train", files, cfg)
    return files


def _checkpoint_paths(cfg: RunConfig, out: Path, names):
    given = cfg.eval["checkpoints"]
    paths = {}
    for name in names:
        p = Path(given.get(name, out / f"{name}.ckpt"))
        if not p.exists():
            raise DataError(f"checkpoint {p} not found; run `driftpfn train --config <file>` first "
                            f"or set eval.checkpoints.{name}")
        paths[name] = p
    return paths


def _load_datasets(cfg: RunConfig, benchmark=None):
    names = [benchmark] if benchmark else cfg.eval["benchmarks"]
    datasets = {n: load_benchmark(n, seed=cfg.seed) for n in names}
    if not benchmark:
        for p in cfg.eval["datasets"]:
            datasets[Path(p).stem] = load_csv(p)
    if not datasets:
        raise ConfigError("eval needs at least one benchmark or dataset file")
    return datasets


def cmd_eval(cfg: RunConfig, out: Path, benchmark=None):
    names = sorted(cfg.eval["checkpoints"]) or cfg.train["models"]
    paths = _checkpoint_paths(cfg, out, names)
    models = {n: load_checkpoint(p)[0] for n, p in paths.items()}
    datasets = _load_datasets(cfg, benchmark)
    cap = cfg.eval["max_context"]

    def predict_fn(model, x, y, c, xq, cq):
        return predict(model, x, y, c, xq, cq, max_context=cap, seed=cfg.seed)

    rows, raw = run_comparison(models, datasets, variants=cfg.eval["variants"], seeds=cfg.eval["seeds"],
                               predict_fn=predict_fn, num_bins=cfg.eval["num_bins"],
                               average=cfg.eval["auc_average"])
    report, raw_path = out / "report.csv", out / "report_raw.csv"
    write_report(rows, report)
    with open(raw_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model", "variant", "split", "metric", "seed", "value"])
        for r in raw:
            w.writerow([r["dataset"], r["model"], r["variant"], r["split"], r["metric"], r["seed"],
                        f"{r['value']:.6f}"])
    log.info("eval wrote %d report rows", len(rows))
    update_manifest(out, "eval", [report, raw_path], cfg)
    return [report, raw_path]


def boundary_grid(model, x, y, c, domains, grid, padding=0.5, max_context=None, seed=0):
    """Rows ``(x0, x1, domain, argmax, maxprob)`` over a ``grid x grid`` lattice per domain."""
    if x.shape[1] != 2:
        raise DataError(f"boundary export needs exactly 2 features, got {x.shape[1]}")
    lo, hi = x.min(axis=0) - padding, x.max(axis=0) + padding
    axes = [np.linspace(lo[j], hi[j], grid) if grid > 1 else np.array([(lo[j] + hi[j]) / 2]) for j in range(2)]
    g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.column_stack([g0.ravel(), g1.ravel()])
    rows = []
    for d in domains:
        probs = predict(model, x, y, c, pts, np.full(len(pts), float(d)), max_context=max_context, seed=seed)
        for (a, b), p in zip(pts, probs):
            rows.append((float(a), float(b), float(d), int(p.argmax()), float(p.max())))
    return rows


def cmd_boundary(cfg: RunConfig, out: Path, benchmark=None):
    b = cfg.boundary
    ckpt = Path(cfg.eval["checkpoints"].get(b["checkpoint"], out / f"{b['checkpoint']}.ckpt"))
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found; run `driftpfn train --config <file>` first")
    model = load_checkpoint(ckpt)[0]
    source = benchmark or b["dataset"]
    ds = load_benchmark(source, seed=cfg.seed) if source in BENCHMARKS else load_csv(source)
    keep = np.ones(len(ds), dtype=bool)
    if b["context_domains"] is not None:
        keep = np.isin(ds.domains, np.asarray(b["context_domains"], dtype=float))
        if not keep.any():
            raise DataError("boundary.context_domains matches no rows")
    domains = b["domains"] if b["domains"] is not None else ds.schedule.domains.tolist()
    rows = boundary_grid(model, ds.features[keep], ds.labels[keep], ds.domains[keep], domains,
                         b["grid"], b["padding"], b["max_context"], cfg.seed)
    path = out / "boundary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "x1", "domain", "argmax", "maxprob"])
        for r in rows:
            w.writerow([repr(r[0]), repr(r[1]), repr(r[2]), r[3], f"{r[4]:.8f}"])
    log.info("boundary wrote %d grid rows", len(rows))
    update_manifest(out, "boundary", [path], cfg)
    return [path]


# --- entry point -------------------------------------------------------------

def load_config(path, seed=None, out=None):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found; create one with `driftpfn init`") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return RunConfig.from_dict(raw)


def build_parser():
    parser = argparse.ArgumentParser(prog="driftpfn", description="Drift-aware in-context tabular classifier")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("init", help="write a config template with every default")
    p.add_argument("--out", default="config.json", help="path of the config file to write")
    p.add_argument("--seed", type=int, default=0)
    for name, text in [("gen", "sample prior datasets or a named benchmark"),
                       ("train", "train the drift and/or static models"),
                       ("eval", "compare checkpoints under Eval-Fix splits"),
                       ("boundary", "export a decision-surface grid")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        if name in ("gen", "train"):
            p.add_argument("--workers", type=int, default=1, help="generator lanes")
        if name == "train":
            p.add_argument("--steps", type=int, help="total optimizer steps (overrides train.steps)")
            p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
        if name in ("gen", "eval", "boundary"):
            p.add_argument("--benchmark", choices=sorted(BENCHMARKS))
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "init":
        cmd_init(args.out, seed=args.seed)
        return EXIT_OK
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out)
    if getattr(args, "workers", 1) < 1:
        raise ConfigError("--workers must be >= 1")
    if args.command == "gen":
        cmd_gen(cfg, out, args.workers, args.benchmark)
    elif args.command == "train":
        if args.steps is not None and args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        cmd_train(cfg, out, args.steps, args.workers, args.resume)
    elif args.command == "eval":
        cmd_eval(cfg, out, args.benchmark)
    else:
        cmd_boundary(cfg, out, args.benchmark)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DataError, SamplingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
