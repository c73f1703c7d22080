"""Split autoencoder-classifier: encoder -> bottleneck -> decoder/classifier,
plus a training-only linear side branch that feeds the LDR loss.

Tensors live in ``Model.params`` under names like ``enc.0.weight``,
``dec.1.bias`` and ``side.weight``. Weights are (out, in); activations are
(features, batch).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from . import ldr
from .errors import FormatError, MissingForwardCache, PartitionMismatch, ShapeMismatch
from .ldr import LdrConfig, Partition
from .numerics import as_matrix, make_rng

GROUPS = ("enc", "dec", "side")
MODEL_MAGIC = b"LDRM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Literal["relu", "identity"] = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeMismatch("layer dims must be >= 1")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


def _mlp_specs(dims, final_activation="identity"):
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = final_activation if i == len(dims) - 2 else "relu"
        specs.append(LayerSpec(a, b, act))
    return specs


@dataclass
class Model:
    encoder: list
    decoder: list
    side_dim: Optional[int]
    side_normalize: bool
    params: dict
    frozen: set = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.encoder[0].in_dim

    @property
    def d_y(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def n_classes(self) -> int:
        return self.decoder[-1].out_dim

    def names(self, group: Optional[str] = None) -> list:
        if group is None:
            return list(self.params)
        return [n for n in self.params if n.split(".", 1)[0] == group]

    def trainable(self) -> list:
        return [n for n in self.params if n not in self.frozen]

    def freeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen.update(self.names(g))

    def unfreeze(self, *groups: str) -> None:
        for g in groups:
            self.frozen.difference_update(self.names(g))

    def set_trainable(self, *groups: str) -> None:
        """Freeze everything except the listed groups."""
        self.frozen = set(self.params)
        self.unfreeze(*groups)

    def copy(self) -> "Model":
        return Model(
            list(self.encoder), list(self.decoder), self.side_dim, self.side_normalize,
            {k: v.copy() for k, v in self.params.items()}, set(self.frozen), dict(self.meta),
        )

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(model_bytes(self)).hexdigest()


def build_model(d_in: int, d_y: int, n_classes: int, *, enc_hidden=(256,), dec_hidden=(128,),
                side_dim: Optional[int] = None, side_normalize: bool = True, seed: int = 0) -> Model:
    """Fresh model with He-uniform ReLU layers and LeCun-uniform linear layers."""
    rng = make_rng(seed)
    encoder = _mlp_specs([d_in, *enc_hidden, d_y])
    decoder = _mlp_specs([d_y, *dec_hidden, n_classes])
    side_dim = d_y if side_dim is None else side_dim
    params = {}

    def init(prefix, spec):
        gain = 6.0 if spec.activation == "relu" else 3.0
        bound = np.sqrt(gain / spec.in_dim)
        params[f"{prefix}.weight"] = rng.uniform(-bound, bound, (spec.out_dim, spec.in_dim))
        params[f"{prefix}.bias"] = np.zeros(spec.out_dim)

    for i, s in enumerate(encoder):
        init(f"enc.{i}", s)
    for i, s in enumerate(decoder):
        init(f"dec.{i}", s)
    if side_dim:
        init("side", LayerSpec(d_y, side_dim, "identity"))
    return Model(encoder, decoder, side_dim or None, side_normalize, params,
                 meta={"seed": str(seed)})


# -- forward ---------------------------------------------------------------

def _check_in(x, width: int, what: str) -> np.ndarray:
    x = as_matrix(x, what)
    if x.shape[0] != width:
        raise ShapeMismatch(f"{what} has {x.shape[0]} rows, expected {width}")
    if x.shape[1] < 1:
        raise ShapeMismatch(f"{what} needs at least one column")
    return x


def _mlp(specs, params, prefix, x, cache=None):
    for i, s in enumerate(specs):
        pre = params[f"{prefix}.{i}.weight"] @ x + params[f"{prefix}.{i}.bias"][:, None]
        out = np.maximum(pre, 0.0) if s.activation == "relu" else pre
        if cache is not None:
            cache.append((x, pre))
        x = out
    return x


def encode(model: Model, x) -> np.ndarray:
    return _mlp(model.encoder, model.params, "enc", _check_in(x, model.d_in, "X"))


def classify(model: Model, y) -> np.ndarray:
    return _mlp(model.decoder, model.params, "dec", _check_in(y, model.d_y, "Y"))


def _normalize_cols(v):
    norms = np.sqrt(np.sum(v * v, axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe, norms


def normalize_backward(z, norms, g):
    """Gradient through column normalization z = v / |v|, given dL/dz."""
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, (g - z * np.sum(z * g, axis=0)) / safe, 0.0)


def side_features(model: Model, y) -> np.ndarray:
    if not model.side_dim:
        raise ShapeMismatch("model has no side branch")
    y = _check_in(y, model.d_y, "Y")
    v = model.params["side.weight"] @ y + model.params["side.bias"][:, None]
    return _normalize_cols(v)[0] if model.side_normalize else v


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(classify(model, encode(model, x)), axis=0)


# -- losses ----------------------------------------------------------------

def ce_loss_and_grad(logits, labels: Partition):
    """Mean softmax cross-entropy (nats) and its gradient w.r.t. the logits."""
    logits = as_matrix(logits, "logits")
    k, b = logits.shape
    if len(labels) != b:
        raise PartitionMismatch(f"{len(labels)} labels for {b} columns")
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=0)
    cols = np.arange(b)
    loss = float(np.mean(np.log(total) - shifted[labels.labels, cols]))
    grad = expd / total
    grad[labels.labels, cols] -= 1.0
    return loss, grad / b


# -- backward --------------------------------------------------------------

@dataclass
class ForwardCache:
    tap: str
    x: np.ndarray
    enc: list
    y: np.ndarray
    dec: Optional[list] = None
    logits: Optional[np.ndarray] = None
    side_pre: Optional[np.ndarray] = None
    side_norms: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None


def forward(model: Model, x, tap: Literal["ce_at_decoder", "ldr_at_side"]) -> ForwardCache:
    x = _check_in(x, model.d_in, "X")
    enc = []
    y = _mlp(model.encoder, model.params, "enc", x, enc)
    cache = ForwardCache(tap, x, enc, y)
    if tap == "ce_at_decoder":
        cache.dec = []
        cache.logits = _mlp(model.decoder, model.params, "dec", y, cache.dec)
    elif tap == "ldr_at_side":
        if not model.side_dim:
            raise ShapeMismatch("model has no side branch")
        v = model.params["side.weight"] @ y + model.params["side.bias"][:, None]
        cache.side_pre = v
        if model.side_normalize:
            cache.z, cache.side_norms = _normalize_cols(v)
        else:
            cache.z = v
    else:
        raise ValueError(f"unknown loss tap {tap!r}")
    return cache


def _mlp_backward(specs, params, prefix, cache, g, grads, want, need_input_grad):
    for i in reversed(range(len(specs))):
        x, pre = cache[i]
        if specs[i].activation == "relu":
            g = g * (pre > 0)
        w_name, b_name = f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"
        if w_name in want:
            grads[w_name] = g @ x.T
        if b_name in want:
            grads[b_name] = g.sum(axis=1)
        if i == 0 and not need_input_grad:
            return None
        g = params[w_name].T @ g
    return g


def backward(model: Model, cache: Optional[ForwardCache], tap: str, part: Partition,
             ldr_cfg: Optional[LdrConfig] = None):
    """Loss and exact gradients of every unfrozen tensor reached by ``tap``.

    The CE tap returns mean cross-entropy in nats; the LDR tap returns
    ``-delta_r`` in bits of the side features under ``part``.
    """
    if cache is None or cache.tap != tap:
        raise MissingForwardCache(f"no forward cache for tap {tap!r}")
    want = set(model.trainable())
    grads: dict = {}
    enc_needed = any(n in want for n in model.names("enc"))
    if tap == "ce_at_decoder":
        loss, g = ce_loss_and_grad(cache.logits, part)
        g_y = _mlp_backward(model.decoder, model.params, "dec", cache.dec, g, grads, want, enc_needed)
    else:
        cfg = ldr_cfg or LdrConfig()
        loss = ldr.ldr_loss(cache.z, part, cfg)
        g = ldr.ldr_loss_grad(cache.z, part, cfg)
        if model.side_normalize:
            g = normalize_backward(cache.z, cache.side_norms, g)
        if "side.weight" in want:
            grads["side.weight"] = g @ cache.y.T
        if "side.bias" in want:
            grads["side.bias"] = g.sum(axis=1)
        g_y = model.params["side.weight"].T @ g if enc_needed else None
    if enc_needed:
        _mlp_backward(model.encoder, model.params, "enc", cache.enc, g_y, grads, want, False)
    return loss, grads


def loss_and_grads(model: Model, x, tap: str, part: Partition, ldr_cfg: Optional[LdrConfig] = None):
    return backward(model, forward(model, x, tap), tap, part, ldr_cfg)


# -- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(model: Model, grads: dict, opt: OptimizerState) -> Model:
    """In-place momentum SGD step: v <- m v + (g + wd w); w <- w - lr v."""
    for name, g in grads.items():
        if name in model.frozen:
            continue
        w = model.params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, tensor {w.shape}")
        step = g + opt.weight_decay * w if opt.weight_decay else g
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        elif v.shape != w.shape:
            raise ShapeMismatch(f"velocity for {name} has shape {v.shape}")
        v = opt.momentum * v + step
        opt.velocity[name] = v
        model.params[name] = w - opt.learning_rate * v
    return model


# -- serialization -----------------------------------------------------------

def _meta_text(model: Model) -> str:
    meta = dict(model.meta)
    meta.update({
        "d_in": str(model.d_in),
        "d_y": str(model.d_y),
        "K": str(model.n_classes),
        "encoder": ",".join(f"{s.in_dim}:{s.out_dim}:{s.activation}" for s in model.encoder),
        "decoder": ",".join(f"{s.in_dim}:{s.out_dim}:{s.activation}" for s in model.decoder),
        "side_dim": str(model.side_dim or 0),
        "side_normalize": str(int(model.side_normalize)),
        "frozen": ",".join(sorted(model.frozen)),
    })
    return "".join(f"{k}={meta[k]}\n" for k in sorted(meta))


def model_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", MODEL_VERSION, len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    text = _meta_text(model).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    return buf.getvalue()


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_bytes(model))


def _parse_specs(text):
    out = []
    for item in text.split(","):
        a, b, act = item.split(":")
        out.append(LayerSpec(int(a), int(b), act))
    return out


def model_from_bytes(data: bytes) -> Model:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("model file truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MODEL_MAGIC:
        raise FormatError("bad model magic")
    version, count = struct.unpack("<HI", take(6))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    (tlen,) = struct.unpack("<I", take(4))
    meta = {}
    for line in bytes(take(tlen)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    if pos != len(view):
        raise FormatError("trailing bytes after model metadata")
    try:
        encoder = _parse_specs(meta.pop("encoder"))
        decoder = _parse_specs(meta.pop("decoder"))
        side_dim = int(meta.pop("side_dim")) or None
        side_normalize = bool(int(meta.pop("side_normalize")))
        frozen = {f for f in meta.pop("frozen").split(",") if f}
        for key in ("d_in", "d_y", "K"):
            meta.pop(key)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model metadata: {exc}") from None
    return Model(encoder, decoder, side_dim, side_normalize, params, frozen, meta)


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
