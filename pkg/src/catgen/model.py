"""The causality-aware transformer: two-headed encoder, masked-attention
blocks, sinusoidal time embedding, noise-prediction head and decoder.

Tokens are d-dimensional gene latents. A forward pass consumes a TokenBatch
laid out as [condition | clean | noisy] together with the matching attention
mask; the time embedding is added to noisy tokens only, conditions and clean
tokens carry no positional identity, and the output rows are the predicted
noise for the noisy tokens. All parameters are autodiff leaves, so gradients
come straight off the recorded forward computation.

Checkpoints are a small binary container: magic ``CATG``, a format version,
then length-prefixed named float64 tensors (little-endian); model shape and
training metadata travel as scalar ``meta.*`` tensors in the same container.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .arplan import ARStepPlan
from .autodiff import Tensor, concat, gelu, gradients, masked_softmax
from .errors import (
    DataFormatError,
    NumericFailureError,
    ShapeMismatchError,
)
from .mask import AttentionMask

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
_LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"CATG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    p: int  # spatial feature dimension (spots per gene profile)
    q: int  # single-cell feature dimension (cells per gene profile)
    d: int = 64
    heads: int = 4
    blocks: int = 3
    variational: bool = True

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ShapeMismatchError("feature dimensions must be positive")
        if self.d < 1 or self.heads < 1 or self.blocks < 1:
            raise ShapeMismatchError("latent width, heads and blocks must be positive")
        if self.d % self.heads != 0:
            raise ShapeMismatchError(f"d={self.d} not divisible by heads={self.heads}")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = cfg.d, 4 * cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "e1.w1": (cfg.p, d), "e1.b1": (d,), "e1.w2": (d, d), "e1.b2": (d,),
        "e2.w1": (cfg.q, d), "e2.b1": (d,), "e2.w2": (d, d), "e2.b2": (d,),
        "time.w": (d, d), "time.b": (d,),
        "out.ln.g": (d,), "out.ln.b": (d,), "out.w": (d, d), "out.b": (d,),
        "dec.w1": (d, d), "dec.b1": (d,), "dec.w2": (d, cfg.p), "dec.b2": (cfg.p,),
        # fixed rescaling of encoder latents to unit spread; set after warmup,
        # never touched by the optimizer (diffusion assumes unit-scale data)
        "latent.scale": (),
    }
    if cfg.variational:
        shapes["enc_var.w"] = (d, d)
        shapes["enc_var.b"] = (d,)
    for i in range(cfg.blocks):
        b = f"blk{i}"
        shapes.update({
            f"{b}.ln1.g": (d,), f"{b}.ln1.b": (d,),
            f"{b}.wq": (d, d), f"{b}.bq": (d,),
            f"{b}.wk": (d, d), f"{b}.bk": (d,),
            f"{b}.wv": (d, d), f"{b}.bv": (d,),
            f"{b}.wo": (d, d), f"{b}.bo": (d,),
            f"{b}.ln2.g": (d,), f"{b}.ln2.b": (d,),
            f"{b}.ff.w1": (d, hidden), f"{b}.ff.b1": (hidden,),
            f"{b}.ff.w2": (hidden, d), f"{b}.ff.b2": (d,),
        })
    return shapes


@dataclass
class CatParameters:
    """All trainable tensors, addressed by dotted name."""

    cfg: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def data(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "CatParameters":
        return CatParameters(
            cfg=self.cfg,
            tensors={
                k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                for k, v in self.tensors.items()
            },
        )

    def detached(self) -> "CatParameters":
        """Same arrays, no gradient tracking; for inference-only forwards."""
        return CatParameters(
            cfg=self.cfg,
            tensors={k: Tensor(v.data, name=k) for k, v in self.tensors.items()},
        )

    def load_data(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            np.copyto(self.tensors[name].data, value)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> CatParameters:
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "latent.scale":
            value = np.ones(shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif leaf.startswith("b"):
            value = np.zeros(shape)
            if name == "enc_var.b":
                value += -8.0  # start near-deterministic when variational
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    return CatParameters(cfg=cfg, tensors=tensors)


# -- encoder / decoder -----------------------------------------------------------


class Encoded(NamedTuple):
    z: Tensor
    mean: Tensor
    logvar: Tensor | None


def encode(
    x,
    head: str,
    params: CatParameters,
    variational: bool = False,
    rng: np.random.Generator | None = None,
) -> Encoded:
    """Map expression profiles into the shared latent space.

    ``head`` selects the spatial (``st``) or single-cell (``sc``) input head.
    With ``variational`` the latent is reparameterized as
    mean + exp(logvar / 2) * eps and (mean, logvar) are returned for the KL
    term; otherwise the mean is the latent and the call is deterministic.
    """
    if head not in ("st", "sc"):
        raise ShapeMismatchError(f"unknown encoder head {head!r}")
    prefix = "e1" if head == "st" else "e2"
    expected = params.cfg.p if head == "st" else params.cfg.q
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != expected:
        raise ShapeMismatchError(
            f"encoder head {head} expects feature dim {expected}, got {x.shape[-1]}"
        )
    hidden = gelu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    mean = hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    if not variational:
        return Encoded(z=mean, mean=mean, logvar=None)
    if not params.cfg.variational:
        raise ShapeMismatchError("model was built without a variational head")
    if rng is None:
        raise ShapeMismatchError("variational encoding needs an rng")
    logvar = (hidden @ params["enc_var.w"] + params["enc_var.b"]).clamp(LOGVAR_MIN, LOGVAR_MAX)
    eps = rng.standard_normal(mean.shape)
    z = mean + (0.5 * logvar).exp() * eps
    return Encoded(z=z, mean=mean, logvar=logvar)


def decode(latent, params: CatParameters) -> Tensor:
    """Deterministic map from latent space back to the spatial feature space."""
    latent = latent if isinstance(latent, Tensor) else Tensor(latent)
    if latent.shape[-1] != params.cfg.d:
        raise ShapeMismatchError(f"decoder expects width {params.cfg.d}, got {latent.shape[-1]}")
    hidden = gelu(latent @ params["dec.w1"] + params["dec.b1"])
    return hidden @ params["dec.w2"] + params["dec.b2"]


# -- transformer core ---------------------------------------------------------------


def sinusoidal_basis(ts: np.ndarray, d: int) -> np.ndarray:
    """Classic sin/cos timestep features with base 10000."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = ts * freqs
    basis = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if basis.shape[1] < d:  # odd widths pad with a zero column
        basis = np.pad(basis, ((0, 0), (0, d - basis.shape[1])))
    return basis


def time_embedding(ts: np.ndarray, params: CatParameters) -> Tensor:
    return Tensor(sinusoidal_basis(ts, params.cfg.d)) @ params["time.w"] + params["time.b"]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + _LN_EPS) ** -0.5) * gain + bias


def _attention(x: Tensor, blocked: np.ndarray, block: str, params: CatParameters) -> Tensor:
    heads, d = params.cfg.heads, params.cfg.d
    dh = d // heads
    length = x.shape[0]

    def split(t: Tensor) -> Tensor:
        return t.reshape(length, heads, dh).transpose(1, 0, 2)

    q = split(x @ params[f"{block}.wq"] + params[f"{block}.bq"])
    k = split(x @ params[f"{block}.wk"] + params[f"{block}.bk"])
    v = split(x @ params[f"{block}.wv"] + params[f"{block}.bv"])
    logits = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    weights = masked_softmax(logits, blocked)
    context = (weights @ v).transpose(1, 0, 2).reshape(length, d)
    return context @ params[f"{block}.wo"] + params[f"{block}.bo"]


@dataclass
class TokenBatch:
    """Assembled token sequence: conditions, clean latents, then noisy latents.

    ``tokens`` is the transformer input (noisy slots may carry extra
    conditioning added in); ``noisy`` keeps the raw diffused latents x_t and
    ``alpha_bars`` their cumulative signal levels, which the noise head needs
    for its analytic skip connection.
    """

    tokens: Tensor  # (seq, d), time embedding not yet applied
    kinds: np.ndarray  # (seq,) 0 condition / 1 clean / 2 noisy
    plan: ARStepPlan
    timesteps: np.ndarray  # (S,) 1-based diffusion step per noisy token
    noisy: Tensor  # (S, d) raw x_t per noisy token
    alpha_bars: np.ndarray  # (S,) cumulative signal level at each token's timestep

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int8)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        s = self.plan.S
        v = s - self.plan.sz[-1]
        c = self.tokens.shape[0] - v - s
        if c < 0 or self.kinds.shape != (self.tokens.shape[0],):
            raise ShapeMismatchError("token batch layout does not match the plan")
        expected = np.concatenate([np.zeros(c), np.ones(v), np.full(s, 2)]).astype(np.int8)
        if not np.array_equal(self.kinds, expected):
            raise ShapeMismatchError("token kinds must be [condition | clean | noisy]")
        if self.timesteps.shape != (s,):
            raise ShapeMismatchError(f"need one timestep per noisy token, got {self.timesteps.shape}")
        if self.timesteps.min() < 1:
            raise ShapeMismatchError("timesteps are 1-based")
        if self.noisy.shape != (s, self.tokens.shape[1]):
            raise ShapeMismatchError(f"raw noisy latents must be ({s}, d), got {self.noisy.shape}")
        if self.alpha_bars.shape != (s,) or ((self.alpha_bars <= 0) | (self.alpha_bars > 1)).any():
            raise ShapeMismatchError("need one alpha_bar in (0, 1] per noisy token")

    @property
    def c(self) -> int:
        return int((self.kinds == 0).sum())

    @property
    def v(self) -> int:
        return int((self.kinds == 1).sum())


def cat_forward(batch: TokenBatch, mask: AttentionMask, params: CatParameters) -> Tensor:
    """Predicted noise for every noisy token, shape (S, d).

    The transformer predicts the bounded v-target and the noise estimate is
    assembled through the analytic skip

        eps_hat = sqrt(1 - abar_t) * x_t + sqrt(abar_t) * v_hat,

    so at high noise the reverse process contracts regardless of how far the
    chain state drifts, while v_hat carries the conditional signal.
    """
    seq, d = batch.tokens.shape
    if d != params.cfg.d:
        raise ShapeMismatchError(f"token width {d} does not match model width {params.cfg.d}")
    if mask.seq != seq or mask.c != batch.c or mask.v != batch.v:
        raise ShapeMismatchError(
            f"mask layout ({mask.seq}, c={mask.c}, v={mask.v}) does not match batch "
            f"({seq}, c={batch.c}, v={batch.v})"
        )
    ctx = batch.c + batch.v
    temb = time_embedding(batch.timesteps, params)
    x = batch.tokens + concat([Tensor(np.zeros((ctx, d))), temb], axis=0)

    blocked = mask.blocked
    for i in range(params.cfg.blocks):
        b = f"blk{i}"
        x = x + _attention(layer_norm(x, params[f"{b}.ln1.g"], params[f"{b}.ln1.b"]), blocked, b, params)
        h = layer_norm(x, params[f"{b}.ln2.g"], params[f"{b}.ln2.b"])
        x = x + gelu(h @ params[f"{b}.ff.w1"] + params[f"{b}.ff.b1"]) @ params[f"{b}.ff.w2"] + params[f"{b}.ff.b2"]

    x = layer_norm(x, params["out.ln.g"], params["out.ln.b"])
    v_hat = (x @ params["out.w"] + params["out.b"]).rows(ctx, seq)
    signal = batch.alpha_bars[:, None]
    pred = batch.noisy * np.sqrt(1.0 - signal) + v_hat * np.sqrt(signal)
    if not np.isfinite(pred.data).all():
        raise NumericFailureError(
            f"non-finite activations in forward pass (max |token| = "
            f"{np.abs(batch.tokens.data).max():.3e})"
        )
    return pred


# -- checkpoints ----------------------------------------------------------------------


def _meta_tensors(cfg: ModelConfig, extra: dict[str, float]) -> dict[str, np.ndarray]:
    meta = {
        "meta.p": cfg.p, "meta.q": cfg.q, "meta.d": cfg.d,
        "meta.heads": cfg.heads, "meta.blocks": cfg.blocks,
        "meta.variational": int(cfg.variational),
        "meta.format": CHECKPOINT_VERSION,
    }
    for key, value in extra.items():
        meta[f"meta.{key}"] = float(value)
    return {k: np.asarray(v, dtype=np.float64) for k, v in meta.items()}


def save_checkpoint(params: CatParameters, path, extra_meta: dict[str, float] | None = None) -> None:
    """Write all tensors atomically (temp file + rename)."""
    entries = dict(params.data())
    entries.update(_meta_tensors(params.cfg, extra_meta or {}))
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".catg.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(entries)))
            for name in sorted(entries):
                arr = np.asarray(entries[name], dtype="<f8")  # keeps 0-dim scalars 0-dim
                if arr.ndim and not arr.flags.c_contiguous:
                    arr = np.ascontiguousarray(arr)
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q" if arr.ndim else "<0Q", *arr.shape))
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, count: int, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DataFormatError(f"{path}: truncated checkpoint")
    return buf


def load_checkpoint(path) -> tuple[CatParameters, dict[str, float]]:
    """Read a checkpoint; rejects unknown format versions."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a CATG checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * size, path), dtype="<f8")
            entries[name] = data.reshape(shape).astype(np.float64)

    meta = {k[len("meta."):]: float(v) for k, v in entries.items() if k.startswith("meta.")}
    for required in ("p", "q", "d", "heads", "blocks", "variational"):
        if required not in meta:
            raise DataFormatError(f"{path}: checkpoint missing meta.{required}")
    cfg = ModelConfig(
        p=int(meta["p"]), q=int(meta["q"]), d=int(meta["d"]),
        heads=int(meta["heads"]), blocks=int(meta["blocks"]),
        variational=bool(meta["variational"]),
    )
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name not in entries:
            raise DataFormatError(f"{path}: checkpoint missing tensor {name}")
        if entries[name].shape != shape:
            raise DataFormatError(
                f"{path}: tensor {name} has shape {entries[name].shape}, expected {shape}"
            )
        tensors[name] = Tensor(entries[name].copy(), requires_grad=True, name=name)
    return CatParameters(cfg=cfg, tensors=tensors), meta
