"""Hierarchical training: DuPHiL rounds, the three-step schedule, latent
dimension screening, and truncation followed by fine-tuning."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np

from . import nn
from .augment import AugmentSpec, expand_batch
from .errors import ConfigError, MaskEmpty
from .ldr import LdrConfig, Partition
from .nn import Model, OptimizerState
from .numerics import derive_rng

PHASE_EPOCHS = ("e1_enc", "e1_dec", "e2_enc", "e2_dec", "e3")


@dataclass(frozen=True)
class TrainConfig:
    e1_enc: int = 10
    e1_dec: int = 10
    e2_enc: int = 10
    e2_dec: int = 10
    e3: int = 20
    lr_12: float = 0.05
    lr_3: float = 0.005
    lr_ssl: Optional[float] = None  # Step-2 encoder rate; None means lr_12
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    grad_clip: Optional[float] = 5.0  # global L2 norm; None disables
    ce_epochs: int = 30
    ldr: LdrConfig = LdrConfig()
    augment: AugmentSpec = AugmentSpec.for_vectors()
    seed: int = 0
    screening_dims: tuple = ()
    screening_epochs: int = 10

    def __post_init__(self):
        object.__setattr__(self, "screening_dims", tuple(int(d) for d in self.screening_dims))
        self.validate()

    def validate(self) -> None:
        if not self.lr_3 < self.lr_12:
            raise ConfigError("lr_3 must be smaller than lr_12")
        if min(self.lr_3, self.lr_12, self.lr_ssl or 1.0) <= 0:
            raise ConfigError("learning rates must be positive")
        counts = [getattr(self, k) for k in PHASE_EPOCHS] + [self.ce_epochs, self.screening_epochs]
        if min(counts) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def scaled(self, fraction: float) -> "TrainConfig":
        """Same config with every phase's epoch count scaled (rounded, min 1 if nonzero)."""
        kw = {k: (max(1, int(round(getattr(self, k) * fraction))) if getattr(self, k) else 0)
              for k in PHASE_EPOCHS}
        return replace(self, **kw)

    def total_epochs(self) -> int:
        return sum(getattr(self, k) for k in PHASE_EPOCHS)

    def echo(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                out[k] = v
        return out


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (phase, epoch, loss, accuracy)
    train_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    checksum: str = ""

    def log(self, phase: str, epoch: int, loss: float, acc: float) -> None:
        self.rows.append((phase, epoch, float(loss), float(acc)))

    def curve(self, phase: str) -> list:
        return [r[2] for r in self.rows if r[0] == phase]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "phase", "loss", "accuracy"])
            for phase, epoch, loss, acc in self.rows:
                w.writerow([epoch, phase, repr(loss), repr(acc)])

    def write_config_echo(self, path) -> None:
        with open(path, "w") as fh:
            for k in sorted(self.config):
                fh.write(f"{k}={self.config[k]}\n")
            fh.write(f"model_sha256={self.checksum}\n")


def accuracy(model: Model, x, labels) -> float:
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.size == 0:
        return float("nan")
    return float(np.mean(nn.predict(model, x) == labels))


def _as_part(labels, k: int) -> Partition:
    return labels if isinstance(labels, Partition) else Partition(np.asarray(labels), k)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


class _Freeze:
    """Restrict training to ``groups`` and restore the caller's freeze mask on exit."""

    def __init__(self, model: Model, *groups: str):
        self.model, self.groups = model, groups

    def __enter__(self):
        self.saved = set(self.model.frozen)
        self.model.frozen = set(self.model.params) - {
            n for g in self.groups for n in self.model.names(g)} | self.saved
        return self.model

    def __exit__(self, *exc):
        self.model.frozen = self.saved


def _clip(grads: dict, limit: Optional[float]) -> dict:
    if not limit:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        return {k: g * (limit / norm) for k, g in grads.items()}
    return grads


def _run_ce(model: Model, x, part: Partition, epochs: int, lr: float, cfg: TrainConfig,
            rng: np.random.Generator, report: TrainReport, phase: str, groups=("enc", "dec")) -> None:
    if epochs <= 0:
        return
    opt = OptimizerState(lr, cfg.momentum, cfg.weight_decay)
    with _Freeze(model, *groups):
        for epoch in range(epochs):
            losses = []
            for cols in _batches(x.shape[1], cfg.batch_size, rng):
                loss, grads = nn.loss_and_grads(model, x[:, cols], "ce_at_decoder", part.subset(cols))
                nn.sgd_step(model, _clip(grads, cfg.grad_clip), opt)
                losses.append(loss)
            report.log(phase, epoch, np.mean(losses), accuracy(model, x, part))


def _run_ldr(model: Model, x, part: Partition, epochs: int, lr: float, cfg: TrainConfig,
             rng: np.random.Generator, report: TrainReport, phase: str, ssl: bool) -> None:
    """Encoder + side branch under -delta_R; decoder frozen."""
    if epochs <= 0:
        return
    opt = OptimizerState(lr, cfg.momentum, cfg.weight_decay)
    spec = cfg.augment
    per_batch = max(1, cfg.batch_size // spec.n) if ssl else cfg.batch_size
    with _Freeze(model, "enc", "side"):
        for epoch in range(epochs):
            losses = []
            for cols in _batches(x.shape[1], per_batch, rng):
                if ssl:
                    batch = expand_batch(x[:, cols], spec, rng)
                    xb, pb = batch.xa, batch.part
                else:
                    xb, pb = x[:, cols], part.subset(cols)
                if xb.shape[1] < 2:
                    continue
                loss, grads = nn.loss_and_grads(model, xb, "ldr_at_side", pb, cfg.ldr)
                nn.sgd_step(model, _clip(grads, cfg.grad_clip), opt)
                losses.append(loss)
            report.log(phase, epoch, np.mean(losses) if losses else 0.0, accuracy(model, x, part))


def duphil_round(model: Model, x, labels, enc_loss: Literal["ldr", "ldr_ssl"], cfg: TrainConfig,
                 enc_epochs: int, dec_epochs: int, report: Optional[TrainReport] = None,
                 tag: str = "duphil", lr: Optional[float] = None) -> Model:
    """Encoder phase under the LDR loss (decoder frozen), then decoder phase under CE
    (encoder frozen). Returns a new model."""
    if enc_epochs <= 0 and dec_epochs <= 0:
        raise ConfigError("duphil_round needs at least one non-empty phase")
    if enc_loss not in ("ldr", "ldr_ssl"):
        raise ConfigError(f"unknown encoder loss {enc_loss!r}")
    report = report if report is not None else TrainReport()
    lr = cfg.lr_12 if lr is None else lr
    model = model.copy()
    x = np.asarray(x, dtype=np.float64)
    part = _as_part(labels, model.n_classes)
    _run_ldr(model, x, part, enc_epochs, lr, cfg, nn_rng(cfg, tag, "enc"), report,
             f"{tag}_enc", enc_loss == "ldr_ssl")
    _run_ce(model, x, part, dec_epochs, lr, cfg, nn_rng(cfg, tag, "dec"), report,
            f"{tag}_dec", groups=("dec",))
    return model


def nn_rng(cfg: TrainConfig, *tags) -> np.random.Generator:
    return derive_rng(cfg.seed, *tags)


def ce_train(model: Model, train, epochs: int, lr: float, cfg: TrainConfig,
             report: Optional[TrainReport] = None, phase: str = "e2e") -> Model:
    """End-to-end CE training of encoder and decoder (side branch untouched)."""
    model = model.copy()
    x, labels = train
    _run_ce(model, np.asarray(x, dtype=np.float64), _as_part(labels, model.n_classes), epochs, lr,
            cfg, nn_rng(cfg, "e2e"), report if report is not None else TrainReport(), phase)
    return model


def _finish(model: Model, report: TrainReport, train, test, cfg: TrainConfig, t0: float) -> None:
    report.train_accuracy = accuracy(model, *train)
    if test is not None:
        report.test_accuracy = accuracy(model, *test)
    report.wall_clock = time.perf_counter() - t0
    report.config = cfg.echo()
    report.checksum = model.checksum()


def pretrain_ce(model: Model, train, test, cfg: TrainConfig):
    """The CE-T baseline: plain end-to-end CE for ``cfg.ce_epochs`` at lr_12."""
    t0 = time.perf_counter()
    report = TrainReport()
    model = ce_train(model, train, cfg.ce_epochs, cfg.lr_12, cfg, report, phase="ce")
    _finish(model, report, train, test, cfg, t0)
    return model, report


def three_step_train(model: Model, train, test, cfg: TrainConfig):
    """Step 1: DuPHiL with the supervised LDR loss. Step 2: DuPHiL with the
    self-supervised LDR loss. Step 3: end-to-end CE at lr_3."""
    cfg.validate()
    t0 = time.perf_counter()
    report = TrainReport()
    x, labels = train
    if cfg.e1_enc or cfg.e1_dec:
        model = duphil_round(model, x, labels, "ldr", cfg, cfg.e1_enc, cfg.e1_dec, report, "s1")
    if cfg.e2_enc or cfg.e2_dec:
        model = duphil_round(model, x, labels, "ldr_ssl", cfg, cfg.e2_enc, 0, report, "s2",
                             lr=cfg.lr_ssl) if cfg.e2_enc else model
        if cfg.e2_dec:
            model = duphil_round(model, x, labels, "ldr_ssl", cfg, 0, cfg.e2_dec, report, "s2")
    model = ce_train(model, train, cfg.e3, cfg.lr_3, cfg, report, phase="s3_e2e")
    _finish(model, report, train, test, cfg, t0)
    return model, report


def duphil_train(model: Model, train, test, cfg: TrainConfig):
    """The DuPHiL baseline: a single supervised round (Step 1 alone)."""
    t0 = time.perf_counter()
    report = TrainReport()
    model = duphil_round(model, train[0], train[1], "ldr", cfg, cfg.e1_enc, cfg.e1_dec, report, "s1")
    _finish(model, report, train, test, cfg, t0)
    return model, report


def screen_latent_dims(train, test, cfg: TrainConfig, dims: Optional[Sequence[int]] = None, **build_kw):
    """CE-train one side-branch-free model per candidate width; pick the best test
    accuracy, ties going to the smaller width."""
    dims = tuple(cfg.screening_dims if dims is None else dims)
    if not dims:
        raise ConfigError("screening needs at least one candidate latent dimension")
    x, labels = train
    k = int(build_kw.pop("n_classes", int(np.max(np.asarray(getattr(labels, "labels", labels)))) + 1))
    table = []
    for d_y in sorted(set(dims)):
        model = nn.build_model(x.shape[0], d_y, k, side_dim=0, seed=cfg.seed, **build_kw)
        model = ce_train(model, train, cfg.screening_epochs, cfg.lr_12, cfg, phase="screen")
        table.append((d_y, accuracy(model, *test)))
    best = max(table, key=lambda row: (row[1], -row[0]))
    return best[0], table


def truncate(model: Model, keep) -> Model:
    """Drop bottleneck units not listed in ``keep`` (bool mask or index set)."""
    d_y = model.d_y
    keep = np.asarray(keep)
    idx = np.flatnonzero(keep) if keep.dtype == bool else np.unique(keep.astype(np.int64))
    if idx.size == 0:
        raise MaskEmpty("truncation must keep at least one latent entry")
    if idx.max() >= d_y or idx.min() < 0:
        raise ValueError("truncation index out of range")
    out = model.copy()
    last = len(model.encoder) - 1
    p = out.params
    p[f"enc.{last}.weight"] = p[f"enc.{last}.weight"][idx].copy()
    p[f"enc.{last}.bias"] = p[f"enc.{last}.bias"][idx].copy()
    p["dec.0.weight"] = p["dec.0.weight"][:, idx].copy()
    if model.side_dim:
        p["side.weight"] = p["side.weight"][:, idx].copy()
    n = idx.size
    out.encoder[last] = replace(out.encoder[last], out_dim=n)
    out.decoder[0] = replace(out.decoder[0], in_dim=n)
    return out


def keep_first_half(d_y: int) -> np.ndarray:
    mask = np.zeros(d_y, dtype=bool)
    mask[: d_y - d_y // 2] = True
    return mask


def truncate_and_finetune(model: Model, keep, mode: Literal["ldr_ft", "ce_ft"], train, test,
                          cfg: TrainConfig):
    """Truncate the bottleneck, then fine-tune either with the three-step schedule
    (ldr_ft) or with end-to-end CE for the same total epoch budget (ce_ft)."""
    model = truncate(model, keep)
    if mode == "ldr_ft":
        return three_step_train(model, train, test, cfg)
    if mode != "ce_ft":
        raise ConfigError(f"unknown fine-tune mode {mode!r}")
    t0 = time.perf_counter()
    report = TrainReport()
    head = cfg.total_epochs() - cfg.e3
    model = ce_train(model, train, head, cfg.lr_12, cfg, report, phase="ft_ce")
    model = _ce_tail(model, train, cfg, report)
    _finish(model, report, train, test, cfg, t0)
    return model, report


def _ce_tail(model, train, cfg, report):
    model = model.copy()
    x, labels = train
    _run_ce(model, np.asarray(x, dtype=np.float64), _as_part(labels, model.n_classes), cfg.e3,
            cfg.lr_3, cfg, nn_rng(cfg, "e2e_tail"), report, "ft_ce_tail")
    return model
