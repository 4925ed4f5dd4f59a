"""Set transformer that classifies query rows in context of a labeled table.

Each row becomes one token: a projection of its zero-padded features
concatenated with a Time2Vec code of its domain, plus a label embedding
(or a shared mask embedding for queries). Context tokens attend to all
context tokens; a query token attends to the context and to itself only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import CapacityError, DataError, TrainingFault
from .temporal import fit_normalizer

DOMAIN_ENCODINGS = ("t2v", "scalar")


@dataclass
class Episode:
    """Normalised context and query rows drawn from one dataset."""

    x_ctx: np.ndarray
    y_ctx: np.ndarray
    c_ctx: np.ndarray
    x_query: np.ndarray
    c_query: np.ndarray
    y_query: np.ndarray | None = None
    split_index: int | None = None

    def __post_init__(self):
        self.x_ctx = np.asarray(self.x_ctx, dtype=float)
        if self.x_ctx.ndim == 1:
            self.x_ctx = self.x_ctx[:, None]
        self.x_query = np.asarray(self.x_query, dtype=float).reshape(-1, self.x_ctx.shape[1])
        self.y_ctx = np.asarray(self.y_ctx, dtype=np.int64)
        self.c_ctx = np.asarray(self.c_ctx, dtype=float)
        self.c_query = np.asarray(self.c_query, dtype=float)
        if len(self.y_ctx) == 0:
            raise DataError("episode needs at least one context row")
        if not (len(self.x_ctx) == len(self.y_ctx) == len(self.c_ctx)):
            raise DataError("context arrays are misaligned")
        if len(self.x_query) != len(self.c_query):
            raise DataError("query arrays are misaligned")
        if self.y_query is not None:
            self.y_query = np.asarray(self.y_query, dtype=np.int64)
            if len(self.y_query) != len(self.x_query):
                raise DataError("query labels are misaligned")
            if not np.isin(self.y_query, self.y_ctx).all():
                raise DataError("every query class must appear in the context")

    @property
    def num_features(self):
        return self.x_ctx.shape[1]


def make_episode(x_ctx, y_ctx, c_ctx, x_query, c_query, y_query=None, split_index=None):
    """Normalise features and domains with statistics of the context rows."""
    x_ctx = np.asarray(x_ctx, dtype=float)
    if x_ctx.ndim == 1:
        x_ctx = x_ctx[:, None]
    norm = fit_normalizer(x_ctx, c_ctx)
    xq = np.asarray(x_query, dtype=float).reshape(-1, x_ctx.shape[1])
    return Episode(
        norm.transform(x_ctx), y_ctx, norm.transform_domains(c_ctx),
        norm.transform(xq), norm.transform_domains(c_query),
        y_query, split_index,
    )


def filter_queries(x_q, c_q, y_q, y_ctx):
    keep = np.isin(y_q, y_ctx)
    return x_q[keep], c_q[keep], y_q[keep]


class Block(nn.Module):
    def __init__(self, embed_dim, num_heads, ff_dim):
        super().__init__()
        if embed_dim % num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.ln1 = nn.LayerNorm(embed_dim)
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)
        self.ln2 = nn.LayerNorm(embed_dim)
        self.ff1 = nn.Linear(embed_dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, embed_dim)

    def _heads(self, h):
        b, n, e = h.shape
        q, k, v = self.qkv(h).split(e, dim=-1)
        shape = (b, n, self.num_heads, e // self.num_heads)
        return [t.reshape(shape).transpose(1, 2) for t in (q, k, v)]

    def _merge(self, o):
        b, h, n, d = o.shape
        return o.transpose(1, 2).reshape(b, n, h * d)

    def forward(self, hc, hq, ctx_mask):
        qc, kc, vc = self._heads(self.ln1(hc))
        qq, kq, vq = self._heads(self.ln1(hq))
        scale = 1.0 / math.sqrt(qc.shape[-1])
        key_mask = ~ctx_mask[:, None, None, :]

        s_cc = (qc @ kc.transpose(-1, -2)) * scale
        p_cc = torch.softmax(s_cc.masked_fill(key_mask, float("-inf")), dim=-1)
        oc = p_cc @ vc

        s_qc = ((qq @ kc.transpose(-1, -2)) * scale).masked_fill(key_mask, float("-inf"))
        s_self = (qq * kq).sum(-1, keepdim=True) * scale
        p = torch.softmax(torch.cat([s_qc, s_self], dim=-1), dim=-1)
        oq = p[..., :-1] @ vc + p[..., -1:] * vq

        hc = hc + self.proj(self._merge(oc))
        hq = hq + self.proj(self._merge(oq))
        hc = hc + self.ff2(F.gelu(self.ff1(self.ln2(hc))))
        hq = hq + self.ff2(F.gelu(self.ff1(self.ln2(hq))))
        return hc, hq


class IclModel(nn.Module):
    def __init__(self, max_features=8, max_classes=10, embed_dim=128, num_layers=4,
                 num_heads=4, ff_dim=None, t2v_dim=8, domain_encoding="t2v",
                 train_t2v=True, seed=0):
        super().__init__()
        if max_classes < 2:
            raise ValueError("max_classes must be >= 2")
        if domain_encoding not in DOMAIN_ENCODINGS:
            raise ValueError(f"domain_encoding must be one of {DOMAIN_ENCODINGS}")
        self.max_features = int(max_features)
        self.max_classes = int(max_classes)
        self.embed_dim = int(embed_dim)
        self.num_layers = int(num_layers)
        self.num_heads = int(num_heads)
        self.ff_dim = int(ff_dim or 2 * embed_dim)
        self.t2v_dim = int(t2v_dim)
        self.domain_encoding = domain_encoding
        gen = torch.Generator().manual_seed(int(seed))
        phase_rng = np.random.default_rng(int(seed))
        self.t2v_omega = nn.Parameter(torch.logspace(-1, 1, self.t2v_dim, dtype=torch.float64).float(),
                                      requires_grad=train_t2v)
        self.t2v_phi = nn.Parameter(torch.tensor(phase_rng.uniform(0, 2 * np.pi, self.t2v_dim),
                                                 dtype=torch.float32), requires_grad=train_t2v)
        enc_dim = self.t2v_dim if domain_encoding == "t2v" else 1
        self.input_proj = nn.Linear(self.max_features + enc_dim, self.embed_dim)
        self.label_embed = nn.Embedding(self.max_classes + 1, self.embed_dim)
        self.blocks = nn.ModuleList(
            Block(self.embed_dim, self.num_heads, self.ff_dim) for _ in range(self.num_layers))
        self.out_norm = nn.LayerNorm(self.embed_dim)
        self.head = nn.Linear(self.embed_dim, self.max_classes)
        self._init_weights(gen)

    def _init_weights(self, gen):
        for name, p in self.named_parameters():
            if name.startswith("t2v_"):
                continue
            with torch.no_grad():
                if p.ndim == 2:
                    std = 1.0 / math.sqrt(p.shape[1]) if "label_embed" not in name else 1.0
                    p.copy_(torch.randn(p.shape, generator=gen) * std)
                elif "ln" in name or "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.zero_()
        for blk in self.blocks:
            with torch.no_grad():
                blk.proj.weight.mul_(1.0 / math.sqrt(2 * self.num_layers))
                blk.ff2.weight.mul_(1.0 / math.sqrt(2 * self.num_layers))

    def config(self):
        return dict(max_features=self.max_features, max_classes=self.max_classes,
                    embed_dim=self.embed_dim, num_layers=self.num_layers,
                    num_heads=self.num_heads, ff_dim=self.ff_dim, t2v_dim=self.t2v_dim,
                    domain_encoding=self.domain_encoding)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def encode_domain(self, c):
        if self.domain_encoding == "scalar":
            return c[..., None]
        z = c[..., None] * self.t2v_omega + self.t2v_phi
        return torch.cat([z[..., :1], torch.sin(z[..., 1:])], dim=-1)

    def embed(self, x, c, y):
        """Tokens for rows ``x`` (padded), domains ``c`` and labels ``y`` (-1 = query)."""
        tok = self.input_proj(torch.cat([x, self.encode_domain(c)], dim=-1))
        return tok + self.label_embed(torch.where(y < 0, self.max_classes, y))

    def forward(self, batch):
        hc = self.embed(batch["x_ctx"], batch["c_ctx"], batch["y_ctx"])
        hq = self.embed(batch["x_query"], batch["c_query"], torch.full_like(batch["c_query"], -1).long())
        for blk in self.blocks:
            hc, hq = blk(hc, hq, batch["ctx_mask"])
        logits = self.head(self.out_norm(hq))
        return logits.masked_fill(~batch["class_mask"][:, None, :], float("-inf"))


def collate(episodes, model: IclModel):
    """Pad a list of episodes into batched tensors of the model's dtype."""
    dtype = model.dtype
    b = len(episodes)
    n_ctx = max(len(e.y_ctx) for e in episodes)
    n_q = max(max(len(e.c_query) for e in episodes), 1)
    fmax = model.max_features
    x_ctx = np.zeros((b, n_ctx, fmax))
    c_ctx = np.zeros((b, n_ctx))
    y_ctx = np.zeros((b, n_ctx), dtype=np.int64)
    ctx_mask = np.zeros((b, n_ctx), dtype=bool)
    x_q = np.zeros((b, n_q, fmax))
    c_q = np.zeros((b, n_q))
    y_q = np.full((b, n_q), -1, dtype=np.int64)
    q_mask = np.zeros((b, n_q), dtype=bool)
    class_mask = np.zeros((b, model.max_classes), dtype=bool)
    for i, e in enumerate(episodes):
        if e.num_features > fmax:
            raise CapacityError(f"{e.num_features} features exceed model capacity {fmax}")
        top = max(e.y_ctx.max(), e.y_query.max() if e.y_query is not None and len(e.y_query) else 0)
        if top >= model.max_classes:
            raise CapacityError(f"class id {top} exceeds model capacity {model.max_classes}")
        nc, nq, d = len(e.y_ctx), len(e.c_query), e.num_features
        x_ctx[i, :nc, :d] = e.x_ctx
        c_ctx[i, :nc] = e.c_ctx
        y_ctx[i, :nc] = e.y_ctx
        ctx_mask[i, :nc] = True
        x_q[i, :nq, :d] = e.x_query
        c_q[i, :nq] = e.c_query
        q_mask[i, :nq] = True
        if e.y_query is not None:
            y_q[i, :nq] = e.y_query
        class_mask[i, np.unique(e.y_ctx)] = True
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return dict(
        x_ctx=t(x_ctx), c_ctx=t(c_ctx), y_ctx=torch.as_tensor(y_ctx), ctx_mask=torch.as_tensor(ctx_mask),
        x_query=t(x_q), c_query=t(c_q), y_query=torch.as_tensor(y_q), query_mask=torch.as_tensor(q_mask),
        class_mask=torch.as_tensor(class_mask),
    )


def encode_tokens(ep: Episode, model: IclModel):
    """Context and query tokens of a single episode, before any attention layer."""
    batch = collate([ep], model)
    with torch.no_grad():
        hc = model.embed(batch["x_ctx"], batch["c_ctx"], batch["y_ctx"])[0]
        yq = torch.full_like(batch["c_query"], -1).long()
        hq = model.embed(batch["x_query"], batch["c_query"], yq)[0, : len(ep.c_query)]
    return hc.numpy(), hq.numpy()


def forward_icl(model: IclModel, ep: Episode, chunk=2048):
    """Class probabilities for the episode's queries, shape (n_query, max_classes)."""
    n = len(ep.c_query)
    if n == 0:
        return np.zeros((0, model.max_classes))
    out = []
    with torch.no_grad():
        for lo in range(0, n, chunk):
            sl = slice(lo, lo + chunk)
            part = Episode(ep.x_ctx, ep.y_ctx, ep.c_ctx, ep.x_query[sl], ep.c_query[sl])
            logits = model(collate([part], model))[0, : len(part.c_query)]
            out.append(torch.softmax(logits, dim=-1).double().numpy())
    probs = np.concatenate(out)
    return probs / probs.sum(axis=1, keepdims=True)


def batch_loss(model: IclModel, batch):
    logits = model(batch)
    mask = batch["query_mask"]
    if not mask.any():
        raise ValueError("batch has no query rows")
    logp = torch.log_softmax(logits[mask], dim=-1)
    target = batch["y_query"][mask]
    return -logp.gather(1, target[:, None]).mean()


def loss_and_grads(model: IclModel, episodes):
    """Mean query cross-entropy and a name -> gradient mapping."""
    if not episodes:
        raise ValueError("empty episode batch")
    if any(e.y_query is None for e in episodes):
        raise ValueError("training episodes need query labels")
    if sum(len(e.y_query) for e in episodes) == 0:
        raise ValueError("batch has no query rows")
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, collate(episodes, model))
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite loss", dump=episodes)
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in model.named_parameters() if p.requires_grad}
    return float(loss.detach()), grads


def predict(model: IclModel, x_train, y_train, c_train, x_query, c_query,
            max_context=None, seed=0):
    """Class probabilities for query rows given a labeled training table.

    ``max_context`` caps the context size by a seeded, per-domain stratified
    subsample of the training rows.
    """
    x_train = np.asarray(x_train, dtype=float)
    if x_train.ndim == 1:
        x_train = x_train[:, None]
    y_train = np.asarray(y_train, dtype=np.int64)
    c_train = np.asarray(c_train, dtype=float)
    x_query = np.asarray(x_query, dtype=float).reshape(-1, x_train.shape[1])
    c_query = np.asarray(c_query, dtype=float)
    if len(c_query) == 0:
        return np.zeros((0, model.max_classes))
    if max_context is not None and len(y_train) > max_context:
        keep = stratified_subsample(c_train, max_context, np.random.default_rng(seed))
        x_train, y_train, c_train = x_train[keep], y_train[keep], c_train[keep]
    ep = make_episode(x_train, y_train, c_train, x_query, c_query)
    model.eval()
    return forward_icl(model, ep)


def stratified_subsample(groups, size, rng):
    """Sorted indices of a subsample that keeps each group's share (largest remainder)."""
    groups = np.asarray(groups)
    values, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    quota = counts * size / counts.sum()
    take = np.floor(quota).astype(int)
    rest = size - take.sum()
    if rest > 0:
        take[np.argsort(-(quota - take), kind="stable")[:rest]] += 1
    picked = []
    for g, k in enumerate(take):
        members = np.flatnonzero(inverse == g)
        picked.append(rng.choice(members, size=min(k, len(members)), replace=False))
    return np.sort(np.concatenate(picked))
