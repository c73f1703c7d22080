"""Coding-rate functions for linear discriminative representations.

All rates are in bits. ``Z`` holds one feature vector per column.

    R(Z)      = 1/2 log2 det(I + a Z Z^T),            a   = d / (eps^2 N)
    R_c(Z, P) = sum_j n_j/(2N) log2 det(I + a_j Z_j Z_j^T),  a_j = d / (eps^2 n_j)
    dR        = R - R_c

The log-determinants are always evaluated on the smaller Gram side, which is
exact by the Weinstein-Aronszajn identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import ConfigError, PartitionMismatch
from .numerics import as_matrix, logdet_psd, solve_psd

LN2 = math.log(2.0)


@dataclass(frozen=True)
class Partition:
    """Mutually exclusive class membership for the columns of a batch."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise PartitionMismatch(f"labels must lie in [0, {self.k})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels: Sequence[int], k: Optional[int] = None) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if k is None:
            k = int(labels.max()) + 1 if labels.size else 1
        return cls(labels, int(k))

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)

    def present(self):
        """(class index, member columns) for every non-empty class, in class order."""
        order = np.argsort(self.labels, kind="stable")
        counts = self.counts
        start = 0
        for j in range(self.k):
            n = int(counts[j])
            if n:
                yield j, order[start:start + n]
            start += n

    def subset(self, cols) -> "Partition":
        return Partition(self.labels[np.asarray(cols)], self.k)


@dataclass(frozen=True)
class LdrConfig:
    eps_sq: float = 0.5
    scale_dim_mode: Literal["latent_dim", "input_dim"] = "latent_dim"
    normalize_columns: bool = True
    input_dim: Optional[int] = None

    def __post_init__(self):
        if not self.eps_sq > 0:
            raise ConfigError("eps_sq must be positive")
        if self.scale_dim_mode not in ("latent_dim", "input_dim"):
            raise ConfigError(f"unknown scale_dim_mode {self.scale_dim_mode!r}")
        if self.scale_dim_mode == "input_dim" and not self.input_dim:
            raise ConfigError("input_dim mode needs input_dim")

    def scale_dim(self, z_rows: int) -> int:
        return z_rows if self.scale_dim_mode == "latent_dim" else int(self.input_dim)


def _logdet_gram(z: np.ndarray, alpha: float) -> float:
    d, n = z.shape
    if d <= n:
        return logdet_psd(np.eye(d) + alpha * (z @ z.T))
    return logdet_psd(np.eye(n) + alpha * (z.T @ z))


def _inv_gram_times(z: np.ndarray, alpha: float) -> np.ndarray:
    """(I + a Z Z^T)^-1 Z, solved on the smaller side."""
    d, n = z.shape
    if d <= n:
        return solve_psd(np.eye(d) + alpha * (z @ z.T), z)
    return solve_psd(np.eye(n) + alpha * (z.T @ z), z.T).T


def _check(z, part: Optional[Partition] = None) -> np.ndarray:
    z = as_matrix(z, "Z")
    if part is not None and len(part) != z.shape[1]:
        raise PartitionMismatch(f"partition has {len(part)} labels, Z has {z.shape[1]} columns")
    return z


def coding_rate(z, cfg: LdrConfig = LdrConfig()) -> float:
    z = _check(z)
    d, n = z.shape
    alpha = cfg.scale_dim(d) / (cfg.eps_sq * n)
    return 0.5 * _logdet_gram(z, alpha)


def class_rate(z, part: Partition, cfg: LdrConfig = LdrConfig()) -> float:
    z = _check(z, part)
    d, n = z.shape
    dim = cfg.scale_dim(d)
    total = 0.0
    for _, cols in part.present():
        nj = cols.size
        total += nj / (2.0 * n) * _logdet_gram(z[:, cols], dim / (cfg.eps_sq * nj))
    return total


def delta_r(z, part: Partition, cfg: LdrConfig = LdrConfig()) -> float:
    return coding_rate(z, cfg) - class_rate(z, part, cfg)


def delta_r_grad(z, part: Partition, cfg: LdrConfig = LdrConfig()) -> np.ndarray:
    """Gradient of delta_r with respect to Z (bits per unit)."""
    z = _check(z, part)
    d, n = z.shape
    dim = cfg.scale_dim(d)
    # Both terms share the leading coefficient d / (eps^2 N ln 2).
    coef = dim / (cfg.eps_sq * n * LN2)
    grad = _inv_gram_times(z, dim / (cfg.eps_sq * n))
    for _, cols in part.present():
        grad[:, cols] -= _inv_gram_times(z[:, cols], dim / (cfg.eps_sq * cols.size))
    return coef * grad


def ldr_loss(z, part: Partition, cfg: LdrConfig = LdrConfig()) -> float:
    return -delta_r(z, part, cfg)


def ldr_loss_grad(z, part: Partition, cfg: LdrConfig = LdrConfig()) -> np.ndarray:
    return -delta_r_grad(z, part, cfg)


def ldr_ssl_loss(z, self_part: Partition, cfg: LdrConfig = LdrConfig()) -> float:
    """Self-supervised variant: the same functional over the augmentation partition."""
    return ldr_loss(z, self_part, cfg)
