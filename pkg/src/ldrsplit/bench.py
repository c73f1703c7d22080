"""Split-inference simulation, rate-accuracy sweeps, and CSV/SVG emission."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import codec, nn
from .augment import AugmentSpec, distort_eval_set
from .codec import QuantizationProfile
from .data import DatasetHandle
from .errors import ConfigError
from .nn import Model
from .numerics import make_rng

SWEEP_COLUMNS = ("model", "dataset", "d_y", "s", "total_entropy_bits",
                 "mean_bits_per_sample", "accuracy", "drops")


@dataclass(frozen=True)
class ChannelSpec:
    bit_budget_per_sample: Optional[int] = None  # None means unlimited
    drop_policy: str = "reject"

    def __post_init__(self):
        if self.drop_policy not in ("reject", "report_only"):
            raise ConfigError(f"unknown drop policy {self.drop_policy!r}")
        if self.bit_budget_per_sample is not None and self.bit_budget_per_sample < 1:
            raise ConfigError("bit budget must be positive")


@dataclass(frozen=True)
class RateAccuracyPoint:
    model: str
    dataset: str
    d_y: int
    s: float
    total_entropy_bits: float
    mean_bits_per_sample: float
    accuracy: float
    drops: int = 0

    def row(self) -> list:
        return [self.model, self.dataset, self.d_y, repr(float(self.s)), repr(float(self.total_entropy_bits)),
                repr(float(self.mean_bits_per_sample)), repr(float(self.accuracy)), self.drops]


@dataclass
class SplitResult:
    predictions: np.ndarray   # -1 for samples rejected by the channel
    bits: np.ndarray          # full stream length per sample, header included
    drops: int


def split_inference(model: Model, prof: QuantizationProfile, channel: ChannelSpec, x) -> SplitResult:
    """Edge: encode, quantize, serialize. Channel: budget check. Server: parse,
    dequantize, classify."""
    y = nn.encode(model, x)
    symbols = codec.quantize(y, prof)
    streams = [codec.encode_stream(symbols[:, j], prof) for j in range(symbols.shape[1])]
    bits = np.array([8 * len(s) for s in streams], dtype=np.int64)
    budget = channel.bit_budget_per_sample
    over = np.zeros(len(streams), dtype=bool) if budget is None else bits > budget
    delivered = np.flatnonzero(~over) if channel.drop_policy == "reject" else np.arange(len(streams))
    preds = np.full(len(streams), -1, dtype=np.int64)
    if delivered.size:
        received = np.stack([codec.decode_stream(streams[j], prof) for j in delivered], axis=1)
        logits = nn.classify(model, codec.dequantize(received, prof))
        preds[delivered] = np.argmax(logits, axis=0)
    return SplitResult(preds, bits, int(over.sum()))


def local_predictions(model: Model, prof: QuantizationProfile, x) -> np.ndarray:
    """Monolithic in-process pipeline without serialization."""
    y = nn.encode(model, x)
    return np.argmax(nn.classify(model, codec.dequantize(codec.quantize(y, prof), prof)), axis=0)


def fit_model_profile(model: Model, ds: DatasetHandle, s: float = 1.0, **kw) -> QuantizationProfile:
    return codec.fit_profile(nn.encode(model, ds.x_train), s, **kw)


def _sweep_on(models: Mapping[str, Model], ds: DatasetHandle, x_eval, y_eval, s_grid, channel,
              profiles: Optional[Mapping[str, QuantizationProfile]] = None):
    points = []
    for tag in sorted(models):
        model = models[tag]
        base = profiles[tag] if profiles and tag in profiles else fit_model_profile(model, ds)
        latents = nn.encode(model, x_eval)
        for s in sorted(float(v) for v in s_grid):
            prof = base.with_scale(s)
            ent = codec.total_entropy(latents, prof)
            res = split_inference(model, prof, channel, x_eval)
            acc = float(np.mean(res.predictions == y_eval))
            points.append(RateAccuracyPoint(tag, ds.name, model.d_y, s, ent.total_bits,
                                            float(res.bits.mean()), acc, res.drops))
    return points


def sweep_rate_accuracy(models: Mapping[str, Model], ds: DatasetHandle, s_grid: Iterable[float],
                        channel: ChannelSpec = ChannelSpec(),
                        profiles: Optional[Mapping[str, QuantizationProfile]] = None) -> list:
    """One point per (model tag, s), sorted by tag then s. Profiles come from the
    training split unless given."""
    return _sweep_on(models, ds, ds.x_test, ds.y_test, s_grid, channel, profiles)


def eval_distortion_robustness(models: Mapping[str, Model], ds: DatasetHandle, spec: AugmentSpec,
                               s_grid: Iterable[float], channel: ChannelSpec = ChannelSpec(),
                               seed: Optional[int] = None) -> list:
    """The rate-accuracy sweep on a randomly distorted copy of the test split."""
    rng = make_rng(spec.seed if seed is None else seed)
    x = distort_eval_set(ds.x_test, spec, rng)
    return _sweep_on(models, ds, x, ds.y_test, s_grid, channel)


def parse_grid(text: str) -> list:
    """"a:b:step" (inclusive of b within rounding) or a comma list."""
    if ":" in text:
        a, b, step = (float(v) for v in text.split(":"))
        if step <= 0 or b < a:
            raise ConfigError(f"bad grid {text!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return [round(a + i * step, 12) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def scale_for_entropy(y_eval, prof: QuantizationProfile, target_bits: float, s_start: float = 0.1,
                      iters: int = 60) -> float:
    """Smallest scale (to bisection precision) whose total entropy on ``y_eval``
    is at most ``target_bits``. Relies on total entropy being non-increasing in s."""
    def bits(s):
        return codec.total_entropy(y_eval, prof.with_scale(s)).total_bits

    lo = hi = float(s_start)
    if bits(lo) <= target_bits:
        return lo
    while bits(hi) > target_bits:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise ConfigError("entropy target unreachable")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if bits(mid) > target_bits:
            lo = mid
        else:
            hi = mid
    return hi


def quantized_accuracy(model: Model, prof: QuantizationProfile, x, labels) -> float:
    return float(np.mean(local_predictions(model, prof, x) == np.asarray(labels)))


def train_model_set(ds: DatasetHandle, cfg, d_y: int, tags=("CE-T", "DuPHiL", "LDR-FT")) -> dict:
    """CE-T baseline, then DuPHiL and the three-step schedule starting from it.

    Returns {tag: (model, report)}.
    """
    from . import trainer

    base = nn.build_model(ds.d_in, d_y, ds.k, seed=cfg.seed,
                          side_normalize=cfg.ldr.normalize_columns)
    ce, ce_rep = trainer.pretrain_ce(base, ds.train, ds.test, cfg)
    out = {"CE-T": (ce, ce_rep)}
    if "DuPHiL" in tags:
        out["DuPHiL"] = trainer.duphil_train(ce, ds.train, ds.test, cfg)
    if "LDR-FT" in tags:
        out["LDR-FT"] = trainer.three_step_train(ce, ds.train, ds.test, cfg)
    return out


# -- matched-entropy comparisons ---------------------------------------------

def curve(points: Sequence[RateAccuracyPoint], tag: str):
    pts = sorted((p.total_entropy_bits, p.accuracy) for p in points if p.model == tag)
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def accuracy_at_entropy(points, tag: str, bits: float) -> float:
    h, a = curve(points, tag)
    if h.size == 0:
        return float("nan")
    return float(np.interp(bits, h, a))


def matched_accuracy_gap(points, tag_a: str, tag_b: str, n: int = 11) -> float:
    """Mean of acc_a - acc_b over a grid spanning the entropy range both curves cover
    (linear interpolation in total entropy). NaN when the ranges do not overlap."""
    ha, _ = curve(points, tag_a)
    hb, _ = curve(points, tag_b)
    if ha.size == 0 or hb.size == 0:
        return float("nan")
    lo, hi = max(ha.min(), hb.min()), min(ha.max(), hb.max())
    if hi < lo:
        return float("nan")
    grid = np.linspace(lo, hi, n)
    return float(np.mean([accuracy_at_entropy(points, tag_a, g) - accuracy_at_entropy(points, tag_b, g)
                          for g in grid]))


# -- CSV -----------------------------------------------------------------------

def points_csv(points: Iterable[RateAccuracyPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in sorted(points, key=lambda p: (p.model, p.s)):
        w.writerow(p.row())
    return buf.getvalue()


def write_points(points, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(points_csv(points))


def read_points(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SWEEP_COLUMNS:
            raise ConfigError(f"unexpected sweep CSV header {header}")
        return [RateAccuracyPoint(r[0], r[1], int(r[2]), float(r[3]), float(r[4]), float(r[5]),
                                  float(r[6]), int(r[7])) for r in reader]


# -- latent statistics --------------------------------------------------------

def latent_std_report(model: Model, ds: DatasetHandle) -> list:
    """(rank, entry index, std) on the test split, sorted by std descending."""
    std = nn.encode(model, ds.x_test).std(axis=1, ddof=1)
    order = sorted(range(std.size), key=lambda i: (-std[i], i))
    return [(r, i, float(std[i])) for r, i in enumerate(order)]


def write_std_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "entry", "std"])
        for r, i, s in rows:
            w.writerow([r, i, repr(s)])


# -- SVG -----------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def svg_lines(series: Mapping[str, Sequence[tuple]], xlabel: str, ylabel: str, title: str = "") -> str:
    """Deterministic line chart: one polyline per series of (x, y) pairs."""
    w, h, ml, mr, mt, mb = 640, 420, 70, 150, 40, 60
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = w - ml - mr, h - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for i in range(5):
        fx, fy = x0 + (x1 - x0) * i / 4, y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_fmt(px(fx))}" y="{mt + ph + 18}" font-size="11" text-anchor="middle">{fx:.3g}</text>')
        out.append(f'<text x="{ml - 6}" y="{_fmt(py(fy) + 4)}" font-size="11" text-anchor="end">{fy:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{h - 15}" font-size="13" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="18" y="{mt + ph / 2}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 18 {mt + ph / 2})">{_esc(ylabel)}</text>')
    if title:
        out.append(f'<text x="{ml + pw / 2}" y="24" font-size="14" text-anchor="middle">{_esc(title)}</text>')
    for n, name in enumerate(sorted(series)):
        color = _PALETTE[n % len(_PALETTE)]
        pts = sorted(series[name])
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = mt + 16 * n + 10
        out.append(f'<line x1="{ml + pw + 12}" y1="{ly}" x2="{ml + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly + 4}" font-size="12">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plot(points: Iterable[RateAccuracyPoint], path, title: str = "") -> None:
    """Accuracy against total entropy, one polyline per model tag."""
    series: dict = {}
    for p in points:
        series.setdefault(p.model, []).append((p.total_entropy_bits, p.accuracy))
    with open(path, "w") as fh:
        fh.write(svg_lines(series, "total entropy (bits)", "accuracy", title))


def emit_std_plot(reports: Mapping[str, list], path) -> None:
    series = {tag: [(float(r), s) for r, _, s in rows] for tag, rows in reports.items()}
    with open(path, "w") as fh:
        fh.write(svg_lines(series, "entry (sorted)", "std of latent entry"))
