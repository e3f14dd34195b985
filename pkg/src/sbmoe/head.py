"""Single-block mixture-of-experts head applied to frozen embeddings.

The block has three parts: n bottleneck adapter experts (down-projection to
half the embedding width, GELU, up-projection, skip connection), a two-layer
gating MLP with a learned-scale Gaussian noise path used only while
training, and a pooling stage that either keeps the top-scoring expert's
output scaled by its gate probability ("top1") or takes the
probability-weighted sum of every expert's output ("all").
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .numerics import SeededRng, gelu, softmax, softmax_rows, softplus

POOLING_TOP1 = "top1"
POOLING_ALL = "all"
_POOLING_CODES = {POOLING_TOP1: 0, POOLING_ALL: 1}
_POOLING_NAMES = {code: name for name, code in _POOLING_CODES.items()}

MODEL_MAGIC = b"SBMH"
MODEL_VERSION = 1


@dataclass(frozen=True)
class HeadConfig:
    """Shape of the block: embedding width, expert count, pooling mode."""

    dim: int
    n_experts: int
    pooling: str = POOLING_ALL

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"embedding dimension must be >= 2, got {self.dim}")
        if not 1 <= self.n_experts <= 64:
            raise ConfigError(f"expert count must be in [1, 64], got {self.n_experts}")
        if self.pooling not in _POOLING_CODES:
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")

    @property
    def hidden(self) -> int:
        """Bottleneck width: half the embedding dimension, rounded up."""
        return (self.dim + 1) // 2


@dataclass
class ExpertParams:
    """One adapter expert.  Shapes: w_down (h, d), w_up (d, h)."""

    w_down: np.ndarray
    b_down: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray


@dataclass
class GateParams:
    """Gating MLP plus the noise-scale projection sharing its hidden layer."""

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    w_noise: np.ndarray
    b_noise: np.ndarray


@dataclass
class HeadParams:
    config: HeadConfig
    experts: list[ExpertParams]
    gate: GateParams

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter tensor in canonical (serialization) order."""
        out = []
        for i, e in enumerate(self.experts):
            out += [(f"expert{i}.w_down", e.w_down), (f"expert{i}.b_down", e.b_down),
                    (f"expert{i}.w_up", e.w_up), (f"expert{i}.b_up", e.b_up)]
        g = self.gate
        out += [("gate.w_hidden", g.w_hidden), ("gate.b_hidden", g.b_hidden),
                ("gate.w_out", g.w_out), ("gate.b_out", g.b_out),
                ("gate.w_noise", g.w_noise), ("gate.b_noise", g.b_noise)]
        return out

    def copy(self) -> "HeadParams":
        experts = [ExpertParams(e.w_down.copy(), e.b_down.copy(),
                                e.w_up.copy(), e.b_up.copy()) for e in self.experts]
        g = self.gate
        gate = GateParams(g.w_hidden.copy(), g.b_hidden.copy(), g.w_out.copy(),
                          g.b_out.copy(), g.w_noise.copy(), g.b_noise.copy())
        return HeadParams(self.config, experts, gate)


@dataclass
class RoutingInfo:
    """Gate outputs for one embedding; ``selected`` drives top1 pooling."""

    clean_logits: np.ndarray
    noisy_logits: np.ndarray
    probs: np.ndarray
    selected: int


@dataclass
class BatchRouting:
    """Gate outputs for a batch, plus per-expert selection counts."""

    probs: np.ndarray          # (B, n)
    selected: np.ndarray       # (B,) argmax expert per row
    counts: np.ndarray = field(default=None)  # (n,) selections

    def __post_init__(self):
        if self.counts is None:
            n = self.probs.shape[1]
            self.counts = np.bincount(self.selected, minlength=n)


def _check_dim(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ShapeError(f"expected an embedding of dimension {dim}, got shape {x.shape}")
    return x


def expert_delta(e: ExpertParams, x: np.ndarray) -> np.ndarray:
    """Adapter output without the skip term."""
    return e.w_up @ gelu(e.w_down @ x + e.b_down) + e.b_up


def expert_forward(e: ExpertParams, x) -> np.ndarray:
    """x + up(gelu(down(x))): bottleneck transform wrapped in a skip."""
    x = _check_dim(x, e.w_down.shape[1])
    return x + expert_delta(e, x)


def gate_forward(g: GateParams, x, rng: SeededRng | None = None) -> RoutingInfo:
    """Score the experts for one embedding.

    With ``rng`` present (training) each logit is perturbed by Gaussian
    noise whose scale is softplus of a learned projection of the gate's
    hidden activation; draws happen in expert-index order.  Without ``rng``
    the noisy logits equal the clean logits and routing is deterministic.
    """
    x = _check_dim(x, g.w_hidden.shape[1])
    a = gelu(g.w_hidden @ x + g.b_hidden)
    clean = g.w_out @ a + g.b_out
    if rng is not None:
        scale = softplus(g.w_noise @ a + g.b_noise)
        eps = np.array([rng.gaussian() for _ in range(clean.shape[0])])
        noisy = clean + eps * scale
    else:
        noisy = clean
    return RoutingInfo(clean, noisy, softmax(noisy), int(np.argmax(noisy)))


def head_forward(p: HeadParams, x, rng: SeededRng | None = None) -> tuple[np.ndarray, RoutingInfo]:
    """Apply the full block to one embedding.

    top1 keeps the selected expert's output scaled by its gate probability;
    all sums every expert's output weighted by the gate probabilities.  The
    skip term is kept outside the weighted sum so a freshly initialized
    head (all adapter deltas zero) reproduces its input bit-for-bit.
    """
    x = _check_dim(x, p.config.dim)
    info = gate_forward(p.gate, x, rng)
    if p.config.pooling == POOLING_TOP1:
        sel = info.selected
        y = info.probs[sel] * (x + expert_delta(p.experts[sel], x))
    else:
        # accumulating in sorted order makes the sum invariant to expert
        # permutation at the bit level
        terms = np.stack([info.probs[i] * expert_delta(e, x)
                          for i, e in enumerate(p.experts)])
        y = x + np.sort(terms, axis=0).sum(axis=0)
    return y, info


def forward_batch(p: HeadParams, xs: np.ndarray, rng: SeededRng | None = None,
                  want_cache: bool = False):
    """Vectorized head application over a (B, d) block of embeddings.

    Matches :func:`head_forward` row by row; noise draws are row-major
    (embedding order, then expert order).  With ``want_cache`` the
    intermediate activations needed for the analytic backward pass are
    returned as a dict.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != p.config.dim:
        raise ShapeError(f"expected a (B, {p.config.dim}) batch, got shape {xs.shape}")
    g = p.gate
    n = p.config.n_experts

    a_pre = xs @ g.w_hidden.T + g.b_hidden
    a = gelu(a_pre)
    clean = a @ g.w_out.T + g.b_out
    if rng is not None:
        u = a @ g.w_noise.T + g.b_noise
        scale = softplus(u)
        eps = rng.gaussian_array(clean.shape)
        noisy = clean + eps * scale
    else:
        u = scale = eps = None
        noisy = clean
    probs = softmax_rows(noisy)
    selected = np.argmax(noisy, axis=1)  # ties resolve to the lowest index
    routing = BatchRouting(probs, selected)

    cache = {"a_pre": a_pre, "a": a, "u": u, "eps": eps, "xs": xs} if want_cache else None

    if p.config.pooling == POOLING_TOP1:
        delta = np.zeros_like(xs)
        z_by_expert, gl_by_expert, rows_by_expert = {}, {}, {}
        for i, e in enumerate(p.experts):
            rows = np.nonzero(selected == i)[0]
            if rows.size == 0:
                continue
            z = xs[rows] @ e.w_down.T + e.b_down
            gl = gelu(z)
            delta[rows] = gl @ e.w_up.T + e.b_up
            if want_cache:
                z_by_expert[i], gl_by_expert[i], rows_by_expert[i] = z, gl, rows
        psel = probs[np.arange(xs.shape[0]), selected]
        ys = psel[:, None] * (xs + delta)
        if want_cache:
            cache.update(delta=delta, z_by_expert=z_by_expert,
                         gl_by_expert=gl_by_expert, rows_by_expert=rows_by_expert)
    else:
        deltas, zs, gls = [], [], []
        for e in p.experts:
            z = xs @ e.w_down.T + e.b_down
            gl = gelu(z)
            deltas.append(gl @ e.w_up.T + e.b_up)
            zs.append(z)
            gls.append(gl)
        terms = np.stack([probs[:, [i]] * deltas[i] for i in range(n)])
        ys = xs + np.sort(terms, axis=0).sum(axis=0)
        if want_cache:
            cache.update(deltas=deltas, zs=zs, gls=gls)

    return (ys, routing, cache) if want_cache else (ys, routing)


def apply_head(p: HeadParams, xs: np.ndarray) -> np.ndarray:
    """Noise-free batched application (inference/retrieval path)."""
    ys, _ = forward_batch(p, xs)
    return ys


class ParamCount(tuple):
    """(per_expert, gate, total) parameter counts."""

    __slots__ = ()

    def __new__(cls, per_expert, gate, total):
        return super().__new__(cls, (per_expert, gate, total))

    per_expert = property(lambda self: self[0])
    gate = property(lambda self: self[1])
    total = property(lambda self: self[2])


def param_count(c: HeadConfig) -> ParamCount:
    """Closed-form scalar parameter counts for a given configuration."""
    d, h, n = c.dim, c.hidden, c.n_experts
    per_expert = 2 * d * h + h + d
    gate = d * h + h + 2 * (n * h + n)
    return ParamCount(per_expert, gate, n * per_expert + gate)


def init_head(c: HeadConfig, rng: SeededRng) -> HeadParams:
    """Scaled-uniform init for projection weights, zeros elsewhere.

    Up-projections and all biases start at zero, so every expert is the
    identity map and the whole block passes embeddings through unchanged.
    Draw order: each expert's w_down row-major, then the gate's w_hidden,
    w_out, w_noise.
    """
    d, h, n = c.dim, c.hidden, c.n_experts

    def scaled_uniform(rows, cols):
        bound = math.sqrt(6.0 / (rows + cols))
        return (2.0 * rng.uniform_array((rows, cols)) - 1.0) * bound

    experts = [ExpertParams(w_down=scaled_uniform(h, d), b_down=np.zeros(h),
                            w_up=np.zeros((d, h)), b_up=np.zeros(d))
               for _ in range(n)]
    gate = GateParams(w_hidden=scaled_uniform(h, d), b_hidden=np.zeros(h),
                      w_out=scaled_uniform(n, h), b_out=np.zeros(n),
                      w_noise=scaled_uniform(n, h), b_noise=np.zeros(n))
    return HeadParams(c, experts, gate)


def save_model(p: HeadParams, path) -> None:
    """Write the binary model file (little-endian, float32 parameters)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIIB", MODEL_VERSION, p.config.dim, p.config.n_experts,
                             _POOLING_CODES[p.config.pooling]))
        for _, tensor in p.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_model(path) -> HeadParams:
    """Read a model file back; parameters widen to float64 in memory."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIIIB")
    if len(blob) < header:
        raise FormatError("model file shorter than its header", offset=len(blob))
    magic, version, dim, n, pooling_code = struct.unpack_from("<4sIIIB", blob)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", offset=4)
    if pooling_code not in _POOLING_NAMES:
        raise FormatError(f"unknown pooling code {pooling_code}", offset=16)
    config = HeadConfig(dim=dim, n_experts=n, pooling=_POOLING_NAMES[pooling_code])

    shapes = _tensor_shapes(config)
    expected = header + 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(blob) != expected:
        raise FormatError(f"model file has {len(blob)} bytes, expected {expected}",
                          offset=min(len(blob), expected))

    offset = header
    arrays = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count

    experts = [ExpertParams(arrays[f"expert{i}.w_down"], arrays[f"expert{i}.b_down"],
                            arrays[f"expert{i}.w_up"], arrays[f"expert{i}.b_up"])
               for i in range(n)]
    gate = GateParams(arrays["gate.w_hidden"], arrays["gate.b_hidden"],
                      arrays["gate.w_out"], arrays["gate.b_out"],
                      arrays["gate.w_noise"], arrays["gate.b_noise"])
    return HeadParams(config, experts, gate)


def _tensor_shapes(c: HeadConfig) -> list[tuple[str, tuple]]:
    d, h, n = c.dim, c.hidden, c.n_experts
    shapes = []
    for i in range(n):
        shapes += [(f"expert{i}.w_down", (h, d)), (f"expert{i}.b_down", (h,)),
                   (f"expert{i}.w_up", (d, h)), (f"expert{i}.b_up", (d,))]
    shapes += [("gate.w_hidden", (h, d)), ("gate.b_hidden", (h,)),
               ("gate.w_out", (n, h)), ("gate.b_out", (n,)),
               ("gate.w_noise", (n, h)), ("gate.b_noise", (n,))]
    return shapes
