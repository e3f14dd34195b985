"""Contrastive training of the head: loss, exact gradients, Adam, epochs.

Gradients are computed by hand-written reverse-mode differentiation of the
batched forward pass.  Gating noise is drawn once per forward pass and
treated as a constant in the backward pass, which is what makes the
finite-difference comparison in :func:`grad_check` well defined.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .head import (POOLING_ALL, POOLING_TOP1, HeadConfig, HeadParams,
                   forward_batch, init_head, load_model, save_model)
from .numerics import (SeededRng, finite_difference_gradient, gelu_prime,
                       sigmoid)

SIM_COSINE = "cosine"
SIM_DOT = "dot"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    n_experts: int = 6
    pooling: str = POOLING_ALL
    batch_size: int = 64
    lr: float = 1e-4
    temperature: float = 0.05
    val_fraction: float = 0.05
    seed: int = 42
    similarity: str = SIM_COSINE

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for in-batch negatives")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("validation fraction must be in (0, 1)")
        if self.n_experts < 1:
            raise ConfigError("expert count must be >= 1")
        if self.pooling not in (POOLING_TOP1, POOLING_ALL):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.similarity not in (SIM_COSINE, SIM_DOT):
            raise ConfigError(f"unknown similarity {self.similarity!r}")


@dataclass
class Batch:
    query_embeddings: np.ndarray     # (B, d)
    positive_doc_embeddings: np.ndarray  # (B, d); row i is row i's positive
    query_ids: list[str]
    doc_ids: list[str]


@dataclass
class Checkpoint:
    head: HeadParams
    epoch: int
    val_loss: float
    train_config: TrainConfig


def similarity(q, v, kind: str = SIM_COSINE) -> float:
    """Dot product or cosine of two equal-length vectors."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.shape != v.shape or q.ndim != 1:
        raise ShapeError(f"similarity operands disagree: {q.shape} vs {v.shape}")
    dot = float(q @ v)
    if kind == SIM_DOT:
        return dot
    if kind != SIM_COSINE:
        raise ConfigError(f"unknown similarity {kind!r}")
    nq, nv = float(np.linalg.norm(q)), float(np.linalg.norm(v))
    if nq == 0.0 or nv == 0.0:
        raise NumericError("cosine similarity of a zero-norm vector")
    return dot / (nq * nv)


def contrastive_loss(scores: np.ndarray, temperature: float) -> float:
    """In-batch negative log likelihood of the diagonal, log-sum-exp form."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got shape {scores.shape}")
    b = scores.shape[0]
    if b < 2:
        raise ShapeError("in-batch negatives need at least 2 pairs")
    if not np.all(np.isfinite(scores)):
        raise NumericError("score matrix contains non-finite entries")
    t = scores / temperature
    m = t.max(axis=1)
    lse = m + np.log(np.exp(t - m[:, None]).sum(axis=1))
    return float(np.mean(lse - np.diag(t)))


def _loss_grad_scores(scores: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Loss plus its gradient with respect to the raw score matrix."""
    b = scores.shape[0]
    t = scores / temperature
    m = t.max(axis=1)
    exps = np.exp(t - m[:, None])
    lse = m + np.log(exps.sum(axis=1))
    loss = float(np.mean(lse - np.diag(t)))
    p = exps / exps.sum(axis=1, keepdims=True)
    d_scores = (p - np.eye(b)) / (b * temperature)
    return loss, d_scores


def _scores_forward(yq: np.ndarray, yd: np.ndarray, kind: str):
    """(B, B) similarity matrix plus the cache its backward pass needs."""
    if kind == SIM_DOT:
        return yq @ yd.T, None
    nq = np.linalg.norm(yq, axis=1)
    nd = np.linalg.norm(yd, axis=1)
    if np.any(nq == 0.0) or np.any(nd == 0.0):
        raise NumericError("cosine similarity of a zero-norm vector")
    qh = yq / nq[:, None]
    dh = yd / nd[:, None]
    return qh @ dh.T, (qh, dh, nq, nd)


def _scores_backward(d_scores: np.ndarray, yq, yd, kind: str, cache):
    """Gradients of the score matrix with respect to both embedding blocks."""
    if kind == SIM_DOT:
        return d_scores @ yd, d_scores.T @ yq
    qh, dh, nq, nd = cache
    d_qh = d_scores @ dh
    d_dh = d_scores.T @ qh
    # through row normalization: d x = (d xh - (d xh . xh) xh) / |x|
    d_yq = (d_qh - (d_qh * qh).sum(axis=1, keepdims=True) * qh) / nq[:, None]
    d_yd = (d_dh - (d_dh * dh).sum(axis=1, keepdims=True) * dh) / nd[:, None]
    return d_yq, d_yd


def zero_grads(p: HeadParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in p.tensors()}


def _head_backward(p: HeadParams, cache, routing, d_ys: np.ndarray,
                   grads: dict[str, np.ndarray], noise: bool) -> None:
    """Accumulate parameter gradients for one head application.

    The argmax route (top1) and the noise draws are treated as constants;
    gradients flow through the gate probabilities and, under top1, only the
    selected expert.
    """
    xs = cache["xs"]
    probs = routing.probs
    b, n = probs.shape

    if p.config.pooling == POOLING_TOP1:
        sel = routing.selected
        rows_all = np.arange(b)
        e_out = xs + cache["delta"]
        psel = probs[rows_all, sel]
        d_probs = np.zeros_like(probs)
        d_probs[rows_all, sel] = (d_ys * e_out).sum(axis=1)
        d_exp_out = psel[:, None] * d_ys  # gradient of the adapter delta rows
        for i, e in enumerate(p.experts):
            rows = cache["rows_by_expert"].get(i)
            if rows is None:
                continue
            x_rows = xs[rows]
            d_delta = d_exp_out[rows]
            gl = cache["gl_by_expert"][i]
            z = cache["z_by_expert"][i]
            d_gl = d_delta @ e.w_up
            grads[f"expert{i}.w_up"] += d_delta.T @ gl
            grads[f"expert{i}.b_up"] += d_delta.sum(axis=0)
            d_z = d_gl * gelu_prime(z)
            grads[f"expert{i}.w_down"] += d_z.T @ x_rows
            grads[f"expert{i}.b_down"] += d_z.sum(axis=0)
    else:
        d_probs = np.empty_like(probs)
        for i, e in enumerate(p.experts):
            delta = cache["deltas"][i]
            d_probs[:, i] = (d_ys * delta).sum(axis=1)
            d_delta = probs[:, [i]] * d_ys
            gl = cache["gls"][i]
            z = cache["zs"][i]
            d_gl = d_delta @ e.w_up
            grads[f"expert{i}.w_up"] += d_delta.T @ gl
            grads[f"expert{i}.b_up"] += d_delta.sum(axis=0)
            d_z = d_gl * gelu_prime(z)
            grads[f"expert{i}.w_down"] += d_z.T @ xs
            grads[f"expert{i}.b_down"] += d_z.sum(axis=0)

    # softmax backward over the noisy logits
    d_noisy = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))

    g = p.gate
    a = cache["a"]
    d_a = d_noisy @ g.w_out
    grads["gate.w_out"] += d_noisy.T @ a
    grads["gate.b_out"] += d_noisy.sum(axis=0)
    if noise:
        d_u = (d_noisy * cache["eps"]) * sigmoid(cache["u"])
        d_a += d_u @ g.w_noise
        grads["gate.w_noise"] += d_u.T @ a
        grads["gate.b_noise"] += d_u.sum(axis=0)
    d_a_pre = d_a * gelu_prime(cache["a_pre"])
    grads["gate.w_hidden"] += d_a_pre.T @ xs
    grads["gate.b_hidden"] += d_a_pre.sum(axis=0)


def forward_batch_loss(p: HeadParams, batch: Batch, rng: SeededRng | None,
                       cfg: TrainConfig):
    """Loss of one batch plus per-expert routing counts (queries then docs)."""
    yq, rq = forward_batch(p, batch.query_embeddings, rng)
    yd, rd = forward_batch(p, batch.positive_doc_embeddings, rng)
    scores, _ = _scores_forward(yq, yd, cfg.similarity)
    loss = contrastive_loss(scores, cfg.temperature)
    return loss, rq.counts + rd.counts


def backward_batch(p: HeadParams, batch: Batch, rng: SeededRng | None,
                   cfg: TrainConfig):
    """Loss and exact parameter gradients for one batch.

    Noise (when ``rng`` is given) is drawn exactly as in the forward-only
    path: query rows first, then document rows, row-major.
    """
    yq, rq, cq = forward_batch(p, batch.query_embeddings, rng, want_cache=True)
    yd, rd, cd = forward_batch(p, batch.positive_doc_embeddings, rng, want_cache=True)
    scores, sim_cache = _scores_forward(yq, yd, cfg.similarity)
    loss, d_scores = _loss_grad_scores(scores, cfg.temperature)
    d_yq, d_yd = _scores_backward(d_scores, yq, yd, cfg.similarity, sim_cache)

    grads = zero_grads(p)
    noise = rng is not None
    _head_backward(p, cq, rq, d_yq, grads, noise)
    _head_backward(p, cd, rd, d_yd, grads, noise)
    return loss, grads


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, p: HeadParams) -> "AdamState":
        return cls(step=0, m=zero_grads(p), v=zero_grads(p))


def adam_step(p: HeadParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """In-place bias-corrected Adam update."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in p.tensors():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        tensor -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def split_pairs(pairs, val_fraction: float, seed: int):
    """Deterministic train/validation split: seeded shuffle, tail held out."""
    shuffled = list(pairs)
    SeededRng(seed).derive("val-split").shuffle(shuffled)
    cut = len(shuffled) - math.ceil(val_fraction * len(shuffled))
    return shuffled[:cut], shuffled[cut:]


def _resolve(store, item_id: str) -> np.ndarray:
    try:
        return store.get(item_id)
    except KeyError:
        raise DataError(f"id {item_id!r} is not present in the embedding store") from None


def _make_batch(pairs, query_store, doc_store) -> Batch:
    qids = [q for q, _ in pairs]
    dids = [d for _, d in pairs]
    q = np.stack([_resolve(query_store, i) for i in qids])
    d = np.stack([_resolve(doc_store, i) for i in dids])
    return Batch(q, d, qids, dids)


def _validation_loss(p: HeadParams, val_pairs, query_store, doc_store,
                     cfg: TrainConfig) -> float:
    """Noise-free loss over the validation pairs.

    Pairs are chunked in fixed order; a trailing chunk of fewer than two
    pairs is dropped (in-batch negatives need two).  Chunk losses combine
    pair-weighted so the result is the mean per-pair loss.
    """
    total, used = 0.0, 0
    for start in range(0, len(val_pairs), cfg.batch_size):
        chunk = val_pairs[start:start + cfg.batch_size]
        if len(chunk) < 2:
            break
        batch = _make_batch(chunk, query_store, doc_store)
        loss, _ = forward_batch_loss(p, batch, None, cfg)
        total += loss * len(chunk)
        used += len(chunk)
    if used == 0:
        raise ConfigError("validation split has fewer than 2 pairs")
    return total / used


def train(train_pairs, cfg: TrainConfig, query_store, doc_store,
          on_epoch=None) -> Checkpoint:
    """Full training loop with best-validation checkpointing.

    The head starts as the identity map.  Every epoch reshuffles the
    training pairs (seeded), consumes full batches only, and ends with a
    noise-free validation pass; the checkpoint with the lowest validation
    loss wins, earliest epoch on exact ties.  The initial (epoch 0) state
    participates, which also covers ``epochs=0``.  ``on_epoch`` receives
    ``(epoch, mean_train_loss, val_loss)`` after every training epoch.
    """
    if query_store.dim != doc_store.dim:
        raise ShapeError(f"store dimensions disagree: {query_store.dim} vs {doc_store.dim}")
    pairs = list(train_pairs)
    for q, d in pairs:  # fail fast on unresolvable ids
        _resolve(query_store, q)
        _resolve(doc_store, d)

    rng = SeededRng(cfg.seed)
    head_cfg = HeadConfig(dim=query_store.dim, n_experts=cfg.n_experts, pooling=cfg.pooling)
    params = init_head(head_cfg, rng.derive("init"))
    shuffle_rng = rng.derive("epoch-shuffle")
    noise_rng = rng.derive("gate-noise")

    fit_pairs, val_pairs = split_pairs(pairs, cfg.val_fraction, cfg.seed)
    if not val_pairs:
        raise ConfigError("validation split is empty")
    if len(fit_pairs) < 2:
        raise ConfigError("fewer than 2 pairs survive the validation split")

    val_loss = _validation_loss(params, val_pairs, query_store, doc_store, cfg)
    best = Checkpoint(params.copy(), 0, val_loss, cfg)
    if on_epoch is not None:
        on_epoch(0, math.nan, val_loss)

    state = AdamState.for_params(params)
    for epoch in range(1, cfg.epochs + 1):
        order = list(fit_pairs)
        shuffle_rng.shuffle(order)
        losses = []
        n_batches = len(order) // cfg.batch_size
        for b in range(n_batches):
            chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = _make_batch(chunk, query_store, doc_store)
            loss, grads = backward_batch(params, batch, noise_rng, cfg)
            adam_step(params, grads, state, cfg.lr)
            losses.append(loss)
        val_loss = _validation_loss(params, val_pairs, query_store, doc_store, cfg)
        if val_loss < best.val_loss:
            best = Checkpoint(params.copy(), epoch, val_loss, cfg)
        if on_epoch is not None:
            train_loss = float(np.mean(losses)) if losses else math.nan
            on_epoch(epoch, train_loss, val_loss)
    return best


def _flatten(p: HeadParams) -> np.ndarray:
    return np.concatenate([t.ravel() for _, t in p.tensors()])


def _unflatten_into(p: HeadParams, flat: np.ndarray) -> None:
    offset = 0
    for _, t in p.tensors():
        t.flat[:] = flat[offset:offset + t.size]
        offset += t.size


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_diff: float
    per_tensor: dict[str, float]


def grad_check(pooling: str, similarity_kind: str, d: int, n: int,
               batch_size: int, seed: int, temperature: float = 0.05,
               h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs with gating noise active (redrawing the identical noise for every
    probe by reseeding), on a generic randomized parameter point so no
    gradient path is accidentally dead.  Entries within 1e-8 of each other
    pass outright; others are scored by relative error.
    """
    rng = SeededRng(seed)
    cfg = TrainConfig(epochs=0, n_experts=n, pooling=pooling, batch_size=batch_size,
                      temperature=temperature, similarity=similarity_kind,
                      val_fraction=0.5, seed=seed)
    head_cfg = HeadConfig(dim=d, n_experts=n, pooling=pooling)
    params = init_head(head_cfg, rng.derive("init"))
    jitter = rng.derive("jitter")
    for _, tensor in params.tensors():  # move off the identity point
        tensor += 0.2 * (2.0 * jitter.uniform_array(tensor.shape) - 1.0)

    data_rng = rng.derive("batch")
    q = data_rng.gaussian_array((batch_size, d))
    dd = data_rng.gaussian_array((batch_size, d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    dd /= np.linalg.norm(dd, axis=1, keepdims=True)
    batch = Batch(q, dd, [f"q{i}" for i in range(batch_size)],
                  [f"d{i}" for i in range(batch_size)])

    noise_master = rng.derive("noise")

    _, grads = backward_batch(params, batch, noise_master.snapshot(), cfg)

    probe = params.copy()

    def loss_at(flat: np.ndarray) -> float:
        _unflatten_into(probe, flat)
        loss, _ = forward_batch_loss(probe, batch, noise_master.snapshot(), cfg)
        return loss

    fd_flat = finite_difference_gradient(loss_at, _flatten(params), h)

    per_tensor: dict[str, float] = {}
    offset = 0
    worst = 0.0
    worst_abs = 0.0
    for name, tensor in params.tensors():
        size = tensor.size
        fd = fd_flat[offset:offset + size]
        an = grads[name].ravel()
        diff = np.abs(an - fd)
        denom = np.maximum(np.abs(an), np.abs(fd))
        mask = diff > 1e-8  # absolute floor: ulp-level disagreement passes
        rel = float((diff[mask] / denom[mask]).max()) if mask.any() else 0.0
        per_tensor[name] = rel
        worst = max(worst, rel)
        worst_abs = max(worst_abs, float(diff.max()) if diff.size else 0.0)
        offset += size
    return GradCheckReport(worst, worst_abs, per_tensor)


def _config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def save_checkpoint(ckpt: Checkpoint, path, query_store, doc_store, pairs) -> None:
    """Model file plus a JSON sidecar holding config, epoch and data digests."""
    from pathlib import Path

    path = Path(path)
    save_model(ckpt.head, path)
    pair_bytes = "\n".join(f"{q}\t{d}" for q, d in pairs).encode("utf-8")
    meta = {
        "train_config": _config_dict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "data_digests": {
            "queries": query_store.digest(),
            "docs": doc_store.digest(),
            "pairs": hashlib.sha256(pair_bytes).hexdigest(),
        },
    }
    sidecar = path.with_suffix(".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[HeadParams, dict]:
    """Model parameters plus the parsed sidecar (empty dict if absent)."""
    from pathlib import Path

    path = Path(path)
    head = load_model(path)
    sidecar = path.with_suffix(".meta.json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return head, meta
