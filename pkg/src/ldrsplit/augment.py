"""Random transformations and the self-labeled partition they induce.

Images are flattened channel-major (c, h, w) vectors with values in [0, 1].
Plain feature vectors (no ``image_shape``) are left unclamped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, GeometryMismatch
from .ldr import Partition
from .numerics import as_matrix

IMAGE_KINDS = ("identity", "horizontal_flip", "shift", "rotate90", "gaussian_noise", "brightness")
VECTOR_KINDS = ("identity", "gaussian_noise", "sign_flip_pair")
ALL_KINDS = tuple(dict.fromkeys(IMAGE_KINDS + VECTOR_KINDS))


@dataclass(frozen=True)
class AugmentSpec:
    kinds: tuple = ("gaussian_noise", "sign_flip_pair")
    n: int = 4
    seed: int = 0
    image_shape: Optional[tuple] = None  # (channels, height, width)
    max_shift: int = 2
    noise_sigma: float = 0.05
    brightness: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not self.kinds:
            raise ConfigError("at least one transform kind is required")
        for k in self.kinds:
            if k not in ALL_KINDS:
                raise ConfigError(f"unknown transform {k!r}")
            if self.image_shape is None and k not in VECTOR_KINDS:
                raise ConfigError(f"{k!r} needs image_shape")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))

    @classmethod
    def for_vectors(cls, n: int = 8, seed: int = 0, noise_sigma: float = 2.0) -> "AugmentSpec":
        return cls(kinds=("gaussian_noise", "sign_flip_pair"), n=n, seed=seed, noise_sigma=noise_sigma)

    @classmethod
    def for_images(cls, image_shape, n: int = 4, seed: int = 0, **kw) -> "AugmentSpec":
        kinds = kw.pop("kinds", ("horizontal_flip", "shift", "gaussian_noise", "brightness"))
        return cls(kinds=kinds, n=n, seed=seed, image_shape=image_shape, **kw)


@dataclass(frozen=True)
class SelfLabeledBatch:
    xa: np.ndarray
    origin: np.ndarray
    part: Partition


def _as_image(x: np.ndarray, shape) -> np.ndarray:
    if shape is None:
        raise GeometryMismatch("image transform needs image_shape")
    if int(np.prod(shape)) != x.size:
        raise GeometryMismatch(f"vector of length {x.size} does not match image shape {shape}")
    return x.reshape(shape)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) pixels, filling vacated pixels with zero."""
    out = np.zeros_like(img)
    h, w = img.shape[1:]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def apply_transform(x, kind: str, rng: np.random.Generator, spec: Optional[AugmentSpec] = None) -> np.ndarray:
    """One transform of a single vector; ``spec`` supplies geometry and magnitudes."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if spec is None:
        spec = AugmentSpec(kinds=("identity",))
    image = spec.image_shape is not None
    if kind == "identity":
        out = x.copy()
    elif kind == "gaussian_noise":
        out = x + spec.noise_sigma * rng.standard_normal(x.size)
    elif kind == "sign_flip_pair":
        out = x.copy()
        if x.size >= 2:
            out[rng.choice(x.size, 2, replace=False)] *= -1.0
        else:
            out = -out
    elif kind == "brightness":
        out = x + rng.uniform(-spec.brightness, spec.brightness)
    else:
        img = _as_image(x, spec.image_shape)
        if kind == "horizontal_flip":
            out = img[:, :, ::-1]
        elif kind == "shift":
            k = spec.max_shift
            dy, dx = (int(v) for v in rng.integers(-k, k + 1, size=2))
            out = _shift(img, dy, dx)
        elif kind == "rotate90":
            if img.shape[1] != img.shape[2]:
                raise GeometryMismatch("rotate90 needs square images")
            out = np.rot90(img, k=int(rng.integers(1, 4)), axes=(1, 2))
        else:
            raise ConfigError(f"unknown transform {kind!r}")
        out = np.ascontiguousarray(out).reshape(-1)
    if image:
        _as_image(out, spec.image_shape)
        out = np.clip(out, 0.0, 1.0)
    return out


def _sample_kind(spec: AugmentSpec, rng: np.random.Generator) -> str:
    return spec.kinds[int(rng.integers(len(spec.kinds)))]


def expand_batch(x, spec: AugmentSpec, rng: np.random.Generator) -> SelfLabeledBatch:
    """n augmented copies per column; copy 0 is the untouched original."""
    x = as_matrix(x, "X")
    d, b = x.shape
    if b < 1:
        raise ConfigError("batch must have at least one column")
    if spec.image_shape is not None and int(np.prod(spec.image_shape)) != d:
        raise GeometryMismatch(f"D_in={d} does not match image shape {spec.image_shape}")
    n = spec.n
    xa = np.empty((d, b * n))
    for j in range(b):
        xa[:, j * n] = x[:, j]
        for i in range(1, n):
            xa[:, j * n + i] = apply_transform(x[:, j], _sample_kind(spec, rng), rng, spec)
    origin = np.repeat(np.arange(b), n)
    return SelfLabeledBatch(xa, origin, Partition(origin, b))


def distort_eval_set(x, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One random transform per column, for robustness evaluation."""
    x = as_matrix(x, "X")
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        out[:, j] = apply_transform(x[:, j], _sample_kind(spec, rng), rng, spec)
    return out
