"""Model components: patching, transformer resampling, bottleneck.

Sequences are (length, dim) internally.  Every layer's residual branches
end in a zero-initialised projection, so a fresh stack is the identity
map and training starts from a stable point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tc
from .audio import AudioBuffer
from .tensor import Param, Tensor


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter registry


class Net:
    """Base for parameterised components: a tree of named Params plus
    optional non-trainable state arrays (e.g. running statistics)."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}
        self._children: dict[str, "Net"] = {}
        self._state: dict[str, np.ndarray] = {}

    def param(self, name: str, array) -> Param:
        p = Param(np.asarray(array, dtype=self.dtype), name=name)
        self._params[name] = p
        return p

    def child(self, name: str, net: "Net") -> "Net":
        self._children[name] = net
        return net

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for cn, c in self._children.items():
            yield from c.named_params(prefix + cn + ".")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_state(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for n, a in self._state.items():
            yield prefix + n, a
        for cn, c in self._children.items():
            yield from c.named_state(prefix + cn + ".")

    def set_state(self, name: str, array: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        if rest:
            self._children[head].set_state(rest, array)
        else:
            if name not in self._state:
                raise ModelError(f"unknown state entry {name!r}")
            self._state[name] = np.asarray(array, dtype=self._state[name].dtype)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def _init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)


class Linear(Net):
    def __init__(self, rng, d_in, d_out, bias=True, zero_init=False, dtype=np.float32):
        super().__init__(dtype)
        w = np.zeros((d_in, d_out)) if zero_init else _init_linear(rng, d_in, d_out)
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class WeightNormLinear(Net):
    """Linear map with direction/magnitude split; the norm runs over the
    input dimension and the gain starts at the raw column norm."""

    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32):
        super().__init__(dtype)
        v = _init_linear(rng, d_in, d_out)
        self.v = self.param("v", v)
        self.g = self.param("g", np.linalg.norm(v, axis=0))
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        norm = tc.sqrt(tc.sum_(self.v * self.v, axis=0) + 1e-12)
        w = self.v * (self.g / norm)
        y = tc.matmul(x, w)
        return y + self.b if self.b is not None else y


class DyT(Net):
    """Learnable tanh(alpha x) + affine, replacing statistics-based norms."""

    def __init__(self, dim, alpha=0.5, dtype=np.float32):
        super().__init__(dtype)
        self.alpha = self.param("alpha", alpha)
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.gamma * tc.tanh(self.alpha * x) + self.beta


# ---------------------------------------------------------------------------
# rotary embeddings


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ModelError("rotary embedding needs an even head dim")
    half = head_dim // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs of (heads, length, head_dim) by position angle."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    c = Tensor(cos[None, :, :])
    s = Tensor(sin[None, :, :])
    return tc.concat([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


# ---------------------------------------------------------------------------
# attention masks


@dataclass(frozen=True)
class MaskSpec:
    """Which positions may attend: fixed neighbourhood or fixed chunks."""

    kind: str  # "sliding_window" | "chunked_midpoint_shift"
    window: int = 0
    chunk: int = 0

    def __post_init__(self):
        if self.kind not in ("sliding_window", "chunked_midpoint_shift"):
            raise ModelError(f"unknown mask kind {self.kind!r}")
        if self.kind == "sliding_window" and self.window <= 0:
            raise ModelError("sliding window size must be positive")
        if self.kind == "chunked_midpoint_shift" and self.chunk <= 0:
            raise ModelError("chunk size must be positive")


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def build_mask(spec: MaskSpec, length: int, layer_index: int = 1, depth: int = 1) -> np.ndarray:
    """Additive attention mask (0 allowed / -inf blocked) for one layer.

    ``layer_index`` is 1-based.  Chunked masks use standard boundaries for
    the first half of the layers and boundaries offset by half a chunk for
    the rest.
    """
    if length <= 0:
        raise ModelError("mask length must be positive")
    shifted = spec.kind == "chunked_midpoint_shift" and layer_index > depth // 2
    key = (spec.kind, spec.window, spec.chunk, length, shifted)
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    idx = np.arange(length)
    if spec.kind == "sliding_window":
        allow = np.abs(idx[:, None] - idx[None, :]) <= spec.window
    else:
        group = (idx + (spec.chunk // 2 if shifted else 0)) // spec.chunk
        allow = group[:, None] == group[None, :]
    mask = np.where(allow, 0.0, -np.inf).astype(np.float32)
    _MASK_CACHE[key] = mask
    return mask


# ---------------------------------------------------------------------------
# transformer layer


def _rms_normalise(x: Tensor) -> Tensor:
    ms = tc.mean(x * x, axis=-1, keepdims=True)
    return x / tc.sqrt(ms + 1e-8)


def lambda_init_for_layer(layer_index: int) -> float:
    return 0.8 - 0.6 * math.exp(-0.3 * (layer_index - 1))


class Attention(Net):
    """Self-attention with rotary positions and per-head RMS-normalised
    queries/keys.  In differential mode the weights are the difference of
    two softmax maps mixed by a learned scalar."""

    def __init__(self, rng, dim, heads, layer_index, differential=True, rope_base=10000.0, dtype=np.float32):
        super().__init__(dtype)
        comps = 2 if differential else 1
        if dim % (heads * comps):
            raise ModelError(f"dim {dim} not divisible by heads*{comps}")
        self.dim = dim
        self.heads = heads
        self.differential = differential
        self.rope_base = rope_base
        self.head_dim = dim // (heads * comps)
        if self.head_dim % 2:
            raise ModelError("head dim must be even for rotary embeddings")
        self.wq = self.child("wq", Linear(rng, dim, dim, bias=False, dtype=dtype))
        self.wk = self.child("wk", Linear(rng, dim, dim, bias=False, dtype=dtype))
        self.wv = self.child("wv", Linear(rng, dim, dim, bias=False, dtype=dtype))
        self.wo = self.child("wo", Linear(rng, dim, dim, bias=False, zero_init=True, dtype=dtype))
        if differential:
            self.lam_init = lambda_init_for_layer(layer_index)
            std = 0.1
            self.lam_q1 = self.param("lam_q1", rng.standard_normal(self.head_dim) * std)
            self.lam_k1 = self.param("lam_k1", rng.standard_normal(self.head_dim) * std)
            self.lam_q2 = self.param("lam_q2", rng.standard_normal(self.head_dim) * std)
            self.lam_k2 = self.param("lam_k2", rng.standard_normal(self.head_dim) * std)

    def _split(self, x: Tensor, n_rows: int, row_dim: int) -> Tensor:
        # (L, dim) -> (n_rows, L, row_dim)
        length = x.shape[0]
        x = tc.reshape(x, (length, n_rows, row_dim))
        return tc.transpose(x, (1, 0, 2))

    def __call__(self, x: Tensor, mask: np.ndarray, positions: np.ndarray) -> Tensor:
        length = x.shape[0]
        comps = 2 if self.differential else 1
        q = self._split(self.wq(x), self.heads * comps, self.head_dim)
        k = self._split(self.wk(x), self.heads * comps, self.head_dim)
        v = self._split(self.wv(x), self.heads, self.dim // self.heads)
        cos, sin = rope_tables(positions, self.head_dim, self.rope_base, self.dtype.name)
        q = apply_rope(_rms_normalise(q), cos, sin)
        k = apply_rope(_rms_normalise(k), cos, sin)
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = tc.matmul(q, tc.transpose(k, (0, 2, 1))) * scale
        att = tc.softmax(scores, mask=mask[None, :, :])
        if self.differential:
            att1 = att[: self.heads]
            att2 = att[self.heads :]
            lam = (
                tc.exp(tc.sum_(self.lam_q1 * self.lam_k1))
                - tc.exp(tc.sum_(self.lam_q2 * self.lam_k2))
                + self.lam_init
            )
            att = att1 - tc.reshape(lam, (1, 1, 1)) * att2
        out = tc.matmul(att, v)  # (heads, L, dim//heads)
        out = tc.reshape(tc.transpose(out, (1, 0, 2)), (length, self.dim))
        return self.wo(out)


class GluFfn(Net):
    """Gated feed-forward; the gate activation is SiLU or sin(pi x)."""

    def __init__(self, rng, dim, hidden, activation="silu", dtype=np.float32):
        super().__init__(dtype)
        if activation not in ("silu", "sinpi"):
            raise ModelError(f"unknown activation {activation!r}")
        self.activation = activation
        self.w_gate = self.child("w_gate", Linear(rng, dim, hidden, dtype=dtype))
        self.w_up = self.child("w_up", Linear(rng, dim, hidden, dtype=dtype))
        self.w_down = self.child("w_down", Linear(rng, hidden, dim, zero_init=True, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        gate = self.w_gate(x)
        gate = tc.silu(gate) if self.activation == "silu" else tc.sin(math.pi * gate)
        return self.w_down(gate * self.w_up(x))


class TransformerLayer(Net):
    def __init__(self, rng, dim, heads, layer_index, differential=True, rope_base=10000.0,
                 activation="silu", hidden_mult=2, dtype=np.float32):
        super().__init__(dtype)
        self.norm_attn = self.child("norm_attn", DyT(dim, dtype=dtype))
        self.attn = self.child(
            "attn", Attention(rng, dim, heads, layer_index, differential, rope_base, dtype=dtype)
        )
        self.norm_ffn = self.child("norm_ffn", DyT(dim, dtype=dtype))
        self.ffn = self.child("ffn", GluFfn(rng, dim, hidden_mult * dim, activation, dtype=dtype))

    def __call__(self, x: Tensor, mask: np.ndarray, positions: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm_attn(x), mask, positions)
        return x + self.ffn(self.norm_ffn(x))


class TransformerStack(Net):
    """D layers sharing a mask policy.

    For chunked attention the stack physically pads the sequence by half a
    chunk on each side at the midpoint (repeating the edge positions, with
    linearly extrapolated rotary positions) and removes the padding at the
    end, so the second half of the layers sees shifted chunk boundaries.
    """

    def __init__(self, rng, dim, depth, heads, mask_spec: MaskSpec, differential=True,
                 rope_base=10000.0, ksin=0, hidden_mult=2, dtype=np.float32):
        super().__init__(dtype)
        if ksin > depth:
            raise ModelError(f"ksin {ksin} exceeds depth {depth}")
        self.depth = depth
        self.mask_spec = mask_spec
        self.layers = [
            self.child(
                f"layer{i}",
                TransformerLayer(
                    rng, dim, heads, i + 1, differential, rope_base,
                    activation="sinpi" if i >= depth - ksin else "silu",
                    hidden_mult=hidden_mult, dtype=dtype,
                ),
            )
            for i in range(depth)
        ]

    def __call__(self, x: Tensor, positions: np.ndarray) -> Tensor:
        spec = self.mask_spec
        if spec.kind == "sliding_window":
            mask = build_mask(spec, x.shape[0])
            for layer in self.layers:
                x = layer(x, mask, positions)
            return x
        half = spec.chunk // 2
        length = x.shape[0]
        mask_std = build_mask(spec, length, 1, self.depth)
        switch = self.depth // 2
        padded = False
        pos = np.asarray(positions, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            if i == switch and half > 0:
                front = min(half, length)
                back = min(half, length)
                x = tc.concat([x[:front], x, x[length - back :]], axis=0)
                step = (pos[-1] - pos[0]) / max(length - 1, 1) if length > 1 else 1.0
                pre = pos[0] - step * np.arange(front, 0, -1)
                post = pos[-1] + step * np.arange(1, back + 1)
                pos = np.concatenate([pre, pos, post])
                mask_std = build_mask(spec, x.shape[0], 1, self.depth)
                padded = True
            x = layer(x, mask_std, pos)
        if padded:
            front = min(half, length)
            x = x[front : front + length]
        return x


# ---------------------------------------------------------------------------
# interleaving for transformer resampling


def encoder_interleave_plan(n_inputs: int, stride: int):
    """Index plan for appending one query slot per segment.

    Returns (n_segments, gather indices into [inputs | queries], extract
    indices of the query slots, slot positions on the input time axis).
    """
    n_seg = -(-n_inputs // stride)
    padded = n_seg * stride
    order = np.empty(n_seg * (stride + 1), dtype=np.int64)
    pos = np.empty(n_seg * (stride + 1), dtype=np.float64)
    for i in range(n_seg):
        base = i * (stride + 1)
        order[base : base + stride] = np.arange(i * stride, (i + 1) * stride)
        order[base + stride] = padded + i
        pos[base : base + stride] = np.arange(i * stride, (i + 1) * stride)
        pos[base + stride] = i * stride + (stride - 1) / 2.0
    extract = (np.arange(n_seg) + 1) * (stride + 1) - 1
    return n_seg, order, extract, pos


def decoder_interleave_plan(n_inputs: int, stride: int):
    """Index plan pairing each input with ``stride`` output slots."""
    order = np.empty(n_inputs * (stride + 1), dtype=np.int64)
    pos = np.empty(n_inputs * (stride + 1), dtype=np.float64)
    extract = np.empty(n_inputs * stride, dtype=np.int64)
    for i in range(n_inputs):
        base = i * (stride + 1)
        order[base] = i
        order[base + 1 : base + 1 + stride] = n_inputs + i * stride + np.arange(stride)
        pos[base] = i * stride + (stride - 1) / 2.0
        pos[base + 1 : base + 1 + stride] = i * stride + np.arange(stride)
        extract[i * stride : (i + 1) * stride] = base + 1 + np.arange(stride)
    return order, extract, pos


@dataclass(frozen=True)
class TrbConfig:
    mode: str  # "encoder" | "decoder"
    stride: int
    depth: int
    dim: int
    heads: int = 2
    ksin: int = 0
    attention: MaskSpec = field(default_factory=lambda: MaskSpec("sliding_window", window=8))
    differential: bool = True
    rope_base: float = 10000.0
    query_init_std: float = 1e-4
    query_noise_std: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("encoder", "decoder"):
            raise ModelError(f"unknown TRB mode {self.mode!r}")
        if self.mode == "encoder" and self.ksin:
            raise ModelError("sinusoidal layers are decoder-only")
        if self.ksin > self.depth:
            raise ModelError("ksin exceeds depth")
        if self.stride < 1:
            raise ModelError("stride must be >= 1")


class Trb(Net):
    """Transformer resampling block.

    Encoder mode packs each run of ``stride`` embeddings with one shared
    (noisy) query slot and keeps the query outputs: stride-fold
    downsampling.  Decoder mode pairs each embedding with ``stride``
    learned output slots and keeps those: stride-fold upsampling.
    """

    def __init__(self, rng, cfg: TrbConfig, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        n_query = 1 if cfg.mode == "encoder" else cfg.stride
        self.queries = self.param(
            "queries", rng.standard_normal((n_query, cfg.dim)) * cfg.query_init_std
        )
        self.stack = self.child(
            "stack",
            TransformerStack(
                rng, cfg.dim, cfg.depth, cfg.heads, cfg.attention,
                cfg.differential, cfg.rope_base, cfg.ksin, dtype=dtype,
            ),
        )

    def _noisy_queries(self, count: int, rng: np.random.Generator | None) -> Tensor:
        n_q = self.queries.shape[0]
        tiled = tc.gather(self.queries, np.tile(np.arange(n_q), count // n_q))
        if rng is None or self.cfg.query_noise_std == 0:
            return tiled
        noise = rng.standard_normal((count, self.cfg.dim)) * self.cfg.query_noise_std
        return tiled + Tensor(noise.astype(self.dtype.name))

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        n = x.shape[0]
        if cfg.mode == "encoder":
            n_seg, order, extract, pos = encoder_interleave_plan(n, cfg.stride)
            padded = n_seg * cfg.stride
            if padded > n:  # repeat the trailing edge
                idx = np.concatenate([np.arange(n), np.full(padded - n, n - 1)])
                x = tc.gather(x, idx)
            q = self._noisy_queries(n_seg, rng)
        else:
            order, extract, pos = decoder_interleave_plan(n, cfg.stride)
            q = self._noisy_queries(n * cfg.stride, rng)
        seq = tc.gather(tc.concat([x, q], axis=0), order)
        seq = self.stack(seq, pos)
        return tc.gather(seq, extract)


# ---------------------------------------------------------------------------
# patching


@dataclass(frozen=True)
class PatchConfig:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ModelError("patch size must be >= 1")


def patch(x: Tensor, size: int) -> Tensor:
    """(channels, T) -> (channels*size, T/size); parameter-free reshape."""
    ch, n = x.shape
    if n % size:
        raise ModelError(f"length {n} not divisible by patch size {size}")
    cols = n // size
    out = tc.reshape(x, (ch, cols, size))        # (C, N, P)
    out = tc.transpose(out, (1, 0, 2))           # (N, C, P)
    return tc.transpose(tc.reshape(out, (cols, ch * size)), (1, 0))


def unpatch(e: Tensor, size: int, channels: int = 2) -> Tensor:
    """Exact inverse of :func:`patch`."""
    dim, cols = e.shape
    if dim != channels * size:
        raise ModelError(f"embedding dim {dim} != channels*size {channels * size}")
    out = tc.reshape(tc.transpose(e, (1, 0)), (cols, channels, size))
    return tc.reshape(tc.transpose(out, (1, 0, 2)), (channels, cols * size))


# ---------------------------------------------------------------------------
# bottlenecks


@dataclass
class LatentSeq:
    """(d, n) latent matrix plus the normalisation scale it was encoded with."""

    latent: Tensor
    ema_std: np.ndarray | None = None

    @property
    def shape(self):
        return self.latent.shape

    def detach(self) -> "LatentSeq":
        return LatentSeq(self.latent.detach(), self.ema_std)


class SoftNormBottleneck(Net):
    """Per-channel affine followed by division by an EMA-tracked running
    std; Gaussian latent noise is larger in training than at inference."""

    def __init__(self, latent_dim, ema_decay=0.999, noise_train=5e-2, noise_infer=1e-3, dtype=np.float32):
        super().__init__(dtype)
        self.latent_dim = latent_dim
        self.ema_decay = float(ema_decay)
        self.noise_train = float(noise_train)
        self.noise_infer = float(noise_infer)
        self.scale = self.param("scale", np.ones(latent_dim))
        self.bias = self.param("bias", np.zeros(latent_dim))
        self._state["ema_std"] = np.ones(latent_dim, dtype=self.dtype)

    @property
    def ema_std(self) -> np.ndarray:
        return self._state["ema_std"]

    def encode(self, h: Tensor, mode: str, rng: np.random.Generator | None = None,
               update_stats: bool | None = None) -> LatentSeq:
        if mode not in ("train", "infer"):
            raise ModelError(f"unknown mode {mode!r}")
        d = self.latent_dim
        affine = h * tc.reshape(self.scale, (d, 1)) + tc.reshape(self.bias, (d, 1))
        if update_stats if update_stats is not None else mode == "train":
            batch_std = affine.data.std(axis=1).astype(self.dtype)
            batch_std = np.maximum(batch_std, 1e-8)
            self._state["ema_std"] = (
                self.ema_decay * self._state["ema_std"] + (1.0 - self.ema_decay) * batch_std
            )
        ema = self._state["ema_std"]
        z = affine * Tensor((1.0 / ema)[:, None])
        noise_scale = self.noise_train if mode == "train" else self.noise_infer
        if rng is not None and noise_scale > 0:
            z = z + Tensor((rng.standard_normal(z.shape) * noise_scale).astype(self.dtype.name))
        return LatentSeq(z, ema.copy())

    def decode_scale(self, z: LatentSeq | Tensor) -> Tensor:
        lat = z.latent if isinstance(z, LatentSeq) else z
        return lat * Tensor(self._state["ema_std"][:, None])

    def reg_loss(self, z: LatentSeq):
        from .losses import kl_dual_axis

        return kl_dual_axis(z.latent)


class VaeBottleneck(Net):
    """Reparameterised Gaussian bottleneck (ablation baseline).

    Expects the encoder projection to emit 2d channels (mean, log-var).
    """

    def __init__(self, latent_dim, dtype=np.float32):
        super().__init__(dtype)
        self.latent_dim = latent_dim
        self._last_mu: Tensor | None = None
        self._last_logvar: Tensor | None = None

    def encode(self, h: Tensor, mode: str, rng: np.random.Generator | None = None,
               update_stats: bool | None = None) -> LatentSeq:
        d = self.latent_dim
        if h.shape[0] != 2 * d:
            raise ModelError(f"vae bottleneck expects {2 * d} channels, got {h.shape[0]}")
        mu = h[:d]
        logvar = tc.clamp_min(-tc.clamp_min(-h[d:], -10.0), -10.0)  # clip to [-10, 10]
        self._last_mu, self._last_logvar = mu, logvar
        if mode == "train" and rng is not None:
            eps = Tensor(rng.standard_normal(mu.shape).astype(self.dtype.name))
            z = mu + tc.exp(0.5 * logvar) * eps
        else:
            z = mu
        return LatentSeq(z, np.ones(d, dtype=self.dtype))

    def decode_scale(self, z: LatentSeq | Tensor) -> Tensor:
        return z.latent if isinstance(z, LatentSeq) else z

    def reg_loss(self, z: LatentSeq):
        from .losses import vae_kl

        if self._last_mu is None:
            raise ModelError("reg_loss before encode")
        return vae_kl(self._last_mu, self._last_logvar)


# ---------------------------------------------------------------------------
# full autoencoder


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 8000
    channels: int = 2
    patch: int = 8
    stride: int = 4
    dim: int = 32
    depth: int = 4
    heads: int = 2
    latent_dim: int = 16
    ksin: int = 2
    attention: str = "sliding_window"
    window: int = 8
    chunk: int = 16
    differential: bool = True
    rope_base: float = 10000.0
    bottleneck: str = "softnorm"
    ema_decay: float = 0.999
    noise_train: float = 5e-2
    noise_infer: float = 1e-3

    def __post_init__(self):
        if self.bottleneck not in ("softnorm", "vae"):
            raise ModelError(f"unknown bottleneck {self.bottleneck!r}")

    @property
    def downsampling(self) -> int:
        return self.patch * self.stride

    def latent_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.downsampling)

    def mask_spec(self) -> MaskSpec:
        if self.attention == "sliding_window":
            return MaskSpec("sliding_window", window=self.window)
        return MaskSpec("chunked_midpoint_shift", chunk=self.chunk)


class Autoencoder(Net):
    """Patch -> encoder TRB -> bottleneck -> decoder TRB -> unpatch."""

    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        mask = cfg.mask_spec()
        self.in_proj = self.child(
            "in_proj", WeightNormLinear(rng, cfg.channels * cfg.patch, cfg.dim, dtype=dtype)
        )
        self.encoder = self.child(
            "encoder",
            Trb(
                rng,
                TrbConfig(
                    "encoder", cfg.stride, cfg.depth, cfg.dim, cfg.heads,
                    attention=mask, differential=cfg.differential, rope_base=cfg.rope_base,
                ),
                dtype=dtype,
            ),
        )
        latent_out = cfg.latent_dim * (2 if cfg.bottleneck == "vae" else 1)
        self.latent_proj = self.child("latent_proj", Linear(rng, cfg.dim, latent_out, dtype=dtype))
        if cfg.bottleneck == "vae":
            self.bottleneck = self.child("bottleneck", VaeBottleneck(cfg.latent_dim, dtype=dtype))
        else:
            self.bottleneck = self.child(
                "bottleneck",
                SoftNormBottleneck(
                    cfg.latent_dim, cfg.ema_decay, cfg.noise_train, cfg.noise_infer, dtype=dtype
                ),
            )
        self.delatent_proj = self.child("delatent_proj", Linear(rng, cfg.latent_dim, cfg.dim, dtype=dtype))
        self.decoder = self.child(
            "decoder",
            Trb(
                rng,
                TrbConfig(
                    "decoder", cfg.stride, cfg.depth, cfg.dim, cfg.heads, ksin=cfg.ksin,
                    attention=mask, differential=cfg.differential, rope_base=cfg.rope_base,
                ),
                dtype=dtype,
            ),
        )
        self.out_proj = self.child(
            "out_proj", WeightNormLinear(rng, cfg.dim, cfg.channels * cfg.patch, dtype=dtype)
        )

    # -- API -----------------------------------------------------------------
    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, AudioBuffer):
            x = x.tensor(self.dtype)
        elif not isinstance(x, Tensor):
            x = Tensor(np.atleast_2d(np.asarray(x, dtype=self.dtype)))
        if x.ndim != 2 or x.shape[0] != self.cfg.channels:
            raise ModelError(f"expected ({self.cfg.channels}, n) audio, got {x.shape}")
        return x

    def encode(self, x, rng: np.random.Generator | None = None, mode: str = "infer",
               update_stats: bool | None = None) -> tuple[LatentSeq, int]:
        x = self._as_tensor(x)
        n = x.shape[1]
        block = self.cfg.downsampling
        pad = (-n) % block
        if pad:
            x = tc.pad_zeros(x, 0, pad, axis=1)
        emb = patch(x, self.cfg.patch)                    # (C*P, frames)
        seq = self.in_proj(tc.transpose(emb, (1, 0)))     # (frames, dim)
        enc = self.encoder(seq, rng)                      # (frames/S, dim)
        lat = tc.transpose(self.latent_proj(enc), (1, 0))  # (d | 2d, n_latent)
        z = self.bottleneck.encode(lat, mode, rng, update_stats)
        return z, n

    def decode(self, z: LatentSeq | Tensor, rng: np.random.Generator | None = None,
               mode: str = "infer", length: int | None = None) -> Tensor:
        lat = self.bottleneck.decode_scale(z)
        seq = self.delatent_proj(tc.transpose(lat, (1, 0)))  # (n_latent, dim)
        dec = self.decoder(seq, rng)                         # (n_latent*S, dim)
        emb = tc.transpose(self.out_proj(dec), (1, 0))       # (C*P, frames)
        audio = unpatch(emb, self.cfg.patch, self.cfg.channels)
        if length is not None:
            audio = audio[:, :length]
        return audio

    def forward(self, x, rng: np.random.Generator | None = None, mode: str = "train",
                update_stats: bool | None = None):
        z, n = self.encode(x, rng, mode, update_stats)
        x_hat = self.decode(z, rng, mode, length=n)
        return x_hat, z
