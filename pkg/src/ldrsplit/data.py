"""Dataset handles: IDX and CIFAR binary loaders and a synthetic Gaussian mixture."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CountMismatch, FormatError
from .numerics import make_rng, orthogonal_random

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class DatasetHandle:
    name: str
    d_in: int
    k: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    provenance: dict = field(default_factory=dict)
    image_shape: Optional[tuple] = None

    def __post_init__(self):
        for lab in (self.y_train, self.y_test):
            if lab.size and (lab.min() < 0 or lab.max() >= self.k):
                raise FormatError(f"labels must lie in [0, {self.k})")

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def test(self):
        return self.x_test, self.y_test

    def with_test(self, other: "DatasetHandle") -> "DatasetHandle":
        """Use ``other``'s training split as this handle's test split."""
        if other.d_in != self.d_in:
            raise FormatError("train and test inputs differ in dimension")
        prov = dict(self.provenance, test=other.provenance)
        return DatasetHandle(self.name, self.d_in, max(self.k, other.k), self.x_train, self.y_train,
                             other.x_train, other.y_train, prov, self.image_shape)

    def head(self, n_train: int, n_test: int) -> "DatasetHandle":
        return DatasetHandle(self.name, self.d_in, self.k, self.x_train[:, :n_train], self.y_train[:n_train],
                             self.x_test[:, :n_test], self.y_test[:n_test], dict(self.provenance),
                             self.image_shape)


def _empty(d: int):
    return np.zeros((d, 0)), np.zeros(0, dtype=np.int64)


def load_idx(images_path, labels_path, name: str = "idx") -> DatasetHandle:
    """Read an IDX image/label file pair (MNIST layout). All samples go to the train split."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    if len(img) < 16 or img[:4] != b"\x00\x00\x08\x03":
        raise FormatError(f"{images_path}: not an IDX3 ubyte image file")
    if len(lab) < 8 or lab[:4] != b"\x00\x00\x08\x01":
        raise FormatError(f"{labels_path}: not an IDX1 ubyte label file")
    n, rows, cols = struct.unpack(">III", img[4:16])
    (n_lab,) = struct.unpack(">I", lab[4:8])
    if n != n_lab:
        raise CountMismatch(f"{n} images but {n_lab} labels")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + n:
        raise FormatError("IDX payload length does not match header")
    if n == 0:
        raise FormatError("IDX file holds no samples")
    x = np.frombuffer(img, np.uint8, offset=16).reshape(n, rows * cols).T / 255.0
    y = np.frombuffer(lab, np.uint8, offset=8).astype(np.int64)
    xt, yt = _empty(rows * cols)
    return DatasetHandle(name, rows * cols, int(y.max()) + 1, x, y, xt, yt,
                         {"images": str(images_path), "labels": str(labels_path)}, (1, rows, cols))


def load_cifar_binary(path, take_n: Optional[int] = None, label_bytes: int = 1,
                      name: str = "cifar") -> DatasetHandle:
    """Read CIFAR binary records (label byte(s) + 3072 channel-major pixels).

    With ``label_bytes=2`` (CIFAR-100) the second, fine label is used.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if not raw or len(raw) % rec:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {rec}")
    n = len(raw) // rec
    if take_n is not None:
        if take_n < 1:
            raise FormatError("take_n must be >= 1")
        n = min(n, take_n)
    arr = np.frombuffer(raw, np.uint8, count=n * rec).reshape(n, rec)
    y = arr[:, label_bytes - 1].astype(np.int64)
    x = arr[:, label_bytes:].T / 255.0
    xt, yt = _empty(CIFAR_PIXELS)
    k = 100 if label_bytes == 2 else 10
    return DatasetHandle(name, CIFAR_PIXELS, max(k, int(y.max()) + 1), x, y, xt, yt,
                         {"path": str(path), "take_n": n}, (3, 32, 32))


def simplex_means(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """k unit-norm, equidistant points centred at the origin, randomly rotated in R^dim."""
    if k == 1:
        return np.zeros((dim, 1))
    centred = np.eye(k) - 1.0 / k
    basis = np.linalg.svd(centred)[0][:, : k - 1]       # k x (k-1)
    coords = (basis.T @ centred)                         # (k-1) x k
    coords /= np.linalg.norm(coords, axis=0, keepdims=True)
    if k - 1 <= dim:
        rot = orthogonal_random(dim, rng)[:, : k - 1]
        return rot @ coords
    dirs = rng.standard_normal((dim, k))
    return dirs / np.linalg.norm(dirs, axis=0, keepdims=True)


def make_gaussian_mixture(k: int, d_in: int, n_per_class: int, separation: float, seed: int,
                          n_test_per_class: Optional[int] = None, intrinsic_dim: Optional[int] = None,
                          ambient_noise: float = 0.1) -> DatasetHandle:
    """Unit-variance Gaussian clusters around simplex vertices at radius ``separation``.

    With ``intrinsic_dim`` the clusters (means and unit noise) live in a random
    subspace of that dimension, plus isotropic ``ambient_noise`` in all of R^d_in.
    """
    rng = make_rng(seed)
    m = d_in if intrinsic_dim is None else int(intrinsic_dim)
    embed = orthogonal_random(d_in, rng)[:, :m]
    means = separation * simplex_means(k, m, rng)
    n_test = n_per_class // 2 if n_test_per_class is None else n_test_per_class

    def draw(n):
        y = np.repeat(np.arange(k), n)
        latent = means[:, y] + rng.standard_normal((m, y.size))
        x = embed @ latent
        if intrinsic_dim is not None:
            x = x + ambient_noise * rng.standard_normal(x.shape)
        return x, y

    xtr, ytr = draw(n_per_class)
    xte, yte = draw(n_test)
    prov = {"k": k, "d_in": d_in, "n_per_class": n_per_class, "n_test_per_class": n_test,
            "separation": separation, "seed": seed, "intrinsic_dim": intrinsic_dim}
    return DatasetHandle("gauss", d_in, k, xtr, ytr, xte, yte, prov)


def nearest_mean_accuracy(ds: DatasetHandle) -> float:
    """Accuracy of the nearest class-mean rule fitted on the train split."""
    means = np.stack([ds.x_train[:, ds.y_train == j].mean(axis=1) for j in range(ds.k)], axis=1)
    d2 = ((ds.x_test[:, None, :] - means[:, :, None]) ** 2).sum(axis=0)
    return float(np.mean(np.argmin(d2, axis=0) == ds.y_test))
