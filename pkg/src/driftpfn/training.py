"""Streaming prior-fitting: every step draws fresh synthetic datasets."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ConfigError, PriorConfig, SamplingError, TrainingFault
from .drift_prior import sample_dataset
from .model import IclModel, batch_loss, collate, make_episode

log = logging.getLogger(__name__)

BOUNDARY_FRACTION = (0.3, 0.8)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    warmup_frac: float = 0.02
    grad_clip: float = 1.0
    batch_size: int = 8
    static_fraction: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if not 0.0 <= self.static_fraction <= 1.0:
            raise ConfigError("static_fraction must lie in [0, 1]")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


@dataclass
class TrainState:
    step: int
    total_steps: int
    seed: int
    optimizer: torch.optim.Optimizer
    losses: list = field(default_factory=list)

    @property
    def running_loss(self):
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


def lr_factor(step, total_steps, warmup_frac):
    """Linear warmup then cosine decay to zero; ``step`` counts completed steps."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return (step + 1) / warm
    span = max(1, total_steps - warm)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - warm) / span)))


def split_at_boundary(ds, rng):
    """Context = domains before a random boundary, queries = the rest.

    The boundary sits where the cumulative sample share comes closest to a
    fraction drawn from [0.3, 0.8]; single-domain datasets split row-wise.
    """
    f = rng.uniform(*BOUNDARY_FRACTION)
    n = len(ds)
    counts = ds.schedule.samples_per_domain
    if len(counts) < 2:
        k = min(max(1, int(round(f * n))), n - 1)
        perm = rng.permutation(n)
        return np.sort(perm[:k]), np.sort(perm[k:]), k
    share = np.cumsum(counts)[:-1] / n
    t = int(np.argmin(np.abs(share - f))) + 1
    cut = int(np.cumsum(counts)[t - 1])
    return np.arange(cut), np.arange(cut, n), cut


def sample_episode(cfg: PriorConfig, rng, static=False, tries=8):
    """One synthetic dataset turned into a context/query episode."""
    for _ in range(tries):
        ds = sample_dataset(cfg, rng, static=static)
        ctx, query, cut = split_at_boundary(ds, rng)
        y_ctx = ds.labels[ctx]
        keep = query[np.isin(ds.labels[query], y_ctx)]
        if len(keep) == 0:
            continue
        return make_episode(ds.features[ctx], y_ctx, ds.domains[ctx],
                            ds.features[keep], ds.domains[keep], ds.labels[keep], cut)
    raise SamplingError("no episode with shared context/query classes", attempts=tries)


def _episode_job(args):
    cfg, seed, step, b, static_fraction = args
    rng = np.random.default_rng([seed, step, b])
    static = bool(rng.random() < static_fraction)
    for retry in range(4):
        try:
            return sample_episode(cfg, rng, static=static)
        except SamplingError:
            rng = np.random.default_rng([seed, step, b, retry + 1])
    raise SamplingError(f"sampler failed repeatedly at step {step}, lane {b}")


def episodes_for_step(cfg, seed, step, opt: OptimConfig, pool=None):
    jobs = [(cfg, seed, step, b, opt.static_fraction) for b in range(opt.batch_size)]
    if pool is None:
        return [_episode_job(j) for j in jobs]
    return list(pool.map(_episode_job, jobs))


def make_optimizer(model, opt: OptimConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=opt.lr, betas=tuple(opt.betas), weight_decay=opt.weight_decay)


def train_stream(model: IclModel, prior_cfg: PriorConfig, steps: int, opt_cfg: OptimConfig = None,
                 seed: int = 0, state: TrainState = None, workers: int = 1, callback=None,
                 total_steps: int = None) -> TrainState:
    """Run ``steps`` optimizer steps, continuing ``state`` when given.

    Step ``s`` draws its datasets from generators seeded by ``(seed, s, lane)``,
    so a resumed run sees exactly the stream an uninterrupted run would.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    opt_cfg = opt_cfg or OptimConfig()
    if state is None:
        state = TrainState(step=0, total_steps=total_steps or steps, seed=seed,
                           optimizer=make_optimizer(model, opt_cfg))
    end = state.step + steps
    if end > state.total_steps:
        state.total_steps = end
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    model.train()
    try:
        while state.step < end:
            episodes = episodes_for_step(prior_cfg, state.seed, state.step, opt_cfg, pool)
            factor = lr_factor(state.step, state.total_steps, opt_cfg.warmup_frac)
            for group in state.optimizer.param_groups:
                group["lr"] = opt_cfg.lr * factor
            state.optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(model, collate(episodes, model))
            if not torch.isfinite(loss):
                raise TrainingFault(f"non-finite loss at step {state.step}", dump=episodes)
            loss.backward()
            if opt_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)
            state.optimizer.step()
            state.losses.append(float(loss.detach()))
            state.step += 1
            if callback is not None:
                callback(state)
            if state.step % 500 == 0:
                log.info("step %d loss %.4f", state.step, state.running_loss)
    finally:
        if pool is not None:
            pool.shutdown()
    model.eval()
    return state
