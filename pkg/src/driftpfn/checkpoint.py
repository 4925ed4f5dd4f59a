"""Binary checkpoint format.

Layout: the magic bytes ``DRPFN1``, a little-endian uint32 manifest length,
the UTF-8 manifest (``key=value`` lines), then little-endian float32 blobs
in the order the manifest's ``param`` and ``moment`` lines list them.
"""
from __future__ import annotations

import struct

import numpy as np
import torch

from .config import DataError
from .model import IclModel
from .training import OptimConfig, TrainState, make_optimizer

MAGIC = b"DRPFN1"
_MODEL_KEYS = ("max_features", "max_classes", "embed_dim", "num_layers", "num_heads", "ff_dim")


def _shape_str(shape):
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(s):
    return () if s == "scalar" else tuple(int(v) for v in s.split("x"))


def save_checkpoint(path, model: IclModel, state: TrainState = None, extra=None):
    cfg = model.config()
    lines = [f"{k}={cfg[k]}" for k in _MODEL_KEYS]
    lines += [f"m={cfg['t2v_dim']}", f"domain_encoding={cfg['domain_encoding']}",
              f"class_count={cfg['max_classes']}",
              f"train_t2v={int(model.t2v_omega.requires_grad)}",
              f"step={state.step if state else 0}"]
    if state is not None:
        lines += [f"total_steps={state.total_steps}", f"seed={state.seed}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    blobs = []
    for name, p in model.named_parameters():
        lines.append(f"param={name}:{_shape_str(p.shape)}")
        blobs.append(p.detach().cpu().numpy())
    if state is not None:
        opt_state = state.optimizer.state_dict()
        names = [n for n, p in model.named_parameters() if p.requires_grad]
        for idx, name in enumerate(names):
            st = opt_state["state"].get(idx)
            if st is None:
                continue
            lines.append(f"adam_step={name}:{float(st['step'])}")
            for key in ("exp_avg", "exp_avg_sq"):
                lines.append(f"moment={name}.{key}:{_shape_str(st[key].shape)}")
                blobs.append(st[key].detach().cpu().numpy())
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def read_manifest(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a DRPFN1 checkpoint")
    (n,) = struct.unpack("<I", data[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    text = data[start: start + n].decode("utf-8")
    entries = [line.split("=", 1) for line in text.splitlines() if line]
    return entries, data[start + n:]


def load_checkpoint(path, opt_cfg: OptimConfig = None):
    """Returns ``(model, state_or_None, manifest_dict)``."""
    entries, payload = read_manifest(path)
    meta = {}
    params, moments, adam_steps = [], [], {}
    for key, value in entries:
        if key == "param":
            name, shape = value.rsplit(":", 1)
            params.append((name, _parse_shape(shape)))
        elif key == "moment":
            name, shape = value.rsplit(":", 1)
            moments.append((name, _parse_shape(shape)))
        elif key == "adam_step":
            name, step = value.rsplit(":", 1)
            adam_steps[name] = float(step)
        else:
            meta[key] = value
    model = IclModel(
        **{k: int(meta[k]) for k in _MODEL_KEYS},
        t2v_dim=int(meta["m"]), domain_encoding=meta["domain_encoding"],
        train_t2v=bool(int(meta.get("train_t2v", 1))),
    )
    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise DataError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += nbytes
        return torch.from_numpy(arr.astype(np.float32))

    named = dict(model.named_parameters())
    with torch.no_grad():
        for name, shape in params:
            if name not in named or tuple(named[name].shape) != shape:
                raise DataError(f"{path}: parameter {name} does not match the model")
            named[name].copy_(take(shape))
    state = None
    if "total_steps" in meta:
        optimizer = make_optimizer(model, opt_cfg or OptimConfig())
        if moments:
            names = [n for n, p in model.named_parameters() if p.requires_grad]
            st = {}
            for name, shape in moments:
                pname, key = name.rsplit(".", 1)
                st.setdefault(pname, {})[key] = take(shape)
            sd = optimizer.state_dict()
            for idx, pname in enumerate(names):
                if pname in st:
                    sd["state"][idx] = {"step": torch.tensor(adam_steps[pname]), **st[pname]}
            optimizer.load_state_dict(sd)
        state = TrainState(step=int(meta["step"]), total_steps=int(meta["total_steps"]),
                           seed=int(meta["seed"]), optimizer=optimizer)
    if offset != len(payload):
        raise DataError(f"{path}: trailing bytes after parameter payload")
    model.eval()
    return model, state, meta
