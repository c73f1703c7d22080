"""Entropy-proportional latent quantization and the latent bitstream.

Each latent entry i gets a Gaussian fit (mean, std) on training latents, a
differential entropy H_i = max(1/2 log2(2 pi e std^2), h_min) and a step size
q_i = s * H_i. Quantized symbols are round((y_i - mean_i) / q_i), rounding
half away from zero.

Bitstream layout (little-endian)::

    "LDRB" | version u16 | d_y u16 | s f32 | kept bitmap ceil(d_y/8) bytes
           | profile crc32 u32 | payload length u32 | payload

Bitmap bit i lives in byte i // 8 at position i % 8 (LSB first).
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

from .errors import DegenerateInput, FormatError, MaskEmpty, ModelMismatch, ProfileMismatch
from .numerics import as_matrix
from .rangecoder import MAX_TOTAL, RangeDecoder, RangeEncoder

LOG2_2PIE = math.log2(2.0 * math.pi * math.e)
STREAM_MAGIC = b"LDRB"
STREAM_VERSION = 1
PROFILE_MAGIC = "LDRP"
MAX_HALF_WIDTH = 2048  # symbols beyond +/- this go through the escape path
ESCAPE_CHUNK_BITS = 16


@dataclass(frozen=True)
class QuantizationProfile:
    mean: np.ndarray
    std: np.ndarray
    entropy: np.ndarray
    scale: float
    mask: np.ndarray
    h_min: float = 0.1
    mode: Literal["proportional", "inverse"] = "proportional"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        for name in ("mean", "std", "entropy"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mask = np.array(self.mask, dtype=bool).reshape(-1)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        d = self.mean.size
        if not (self.std.size == self.entropy.size == mask.size == d):
            raise ProfileMismatch("profile arrays disagree in length")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not mask.any():
            raise MaskEmpty("profile keeps no entries")
        if self.mode not in ("proportional", "inverse"):
            raise ValueError(f"unknown quantizer mode {self.mode!r}")

    @property
    def d_y(self) -> int:
        return int(self.mean.size)

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def steps(self) -> np.ndarray:
        if self.mode == "proportional":
            return self.scale * self.entropy
        return self.scale / self.entropy

    @property
    def levels(self) -> np.ndarray:
        """Std in units of the quantization step, per entry."""
        return self.std / self.steps

    def with_scale(self, s: float) -> "QuantizationProfile":
        return replace(self, scale=float(s), _cache={})

    def with_mask(self, mask) -> "QuantizationProfile":
        return replace(self, mask=np.asarray(mask, dtype=bool), _cache={})

    def bitmap(self) -> bytes:
        return np.packbits(self.mask.astype(np.uint8), bitorder="little").tobytes()

    def to_bytes(self) -> bytes:
        body = profile_body(self)
        return body + struct.pack("<I", zlib.crc32(body))

    def checksum(self) -> int:
        if "crc" not in self._cache:
            self._cache["crc"] = zlib.crc32(profile_body(self))
        return self._cache["crc"]


def profile_body(prof: QuantizationProfile) -> bytes:
    text = (
        f"{PROFILE_MAGIC} 1\n"
        f"d_y={prof.d_y}\n"
        f"s={prof.scale!r}\n"
        f"h_min={prof.h_min!r}\n"
        f"mode={prof.mode}\n"
        f"mask={prof.bitmap().hex()}\n"
        "\n"
    ).encode("ascii")
    arrays = np.concatenate([prof.mean, prof.std, prof.entropy]).astype("<f8").tobytes()
    return text + arrays


def profile_from_bytes(data: bytes) -> QuantizationProfile:
    if len(data) < 4:
        raise FormatError("profile too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("profile checksum mismatch")
    head, sep, arrays = body.partition(b"\n\n")
    if not sep:
        raise FormatError("profile header not terminated")
    lines = head.decode("ascii").split("\n")
    if lines[0] != f"{PROFILE_MAGIC} 1":
        raise FormatError("bad profile magic")
    fields = dict(line.split("=", 1) for line in lines[1:])
    try:
        d = int(fields["d_y"])
        mask = np.unpackbits(np.frombuffer(bytes.fromhex(fields["mask"]), np.uint8),
                             bitorder="little")[:d].astype(bool)
        vals = np.frombuffer(arrays, dtype="<f8").astype(np.float64)
        if vals.size != 3 * d:
            raise FormatError("profile array block has wrong length")
        return QuantizationProfile(vals[:d], vals[d:2 * d], vals[2 * d:], float(fields["s"]), mask,
                                   float(fields["h_min"]), fields["mode"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad profile header: {exc}") from None


def save_profile(prof: QuantizationProfile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(prof.to_bytes())


def load_profile(path) -> QuantizationProfile:
    with open(path, "rb") as fh:
        return profile_from_bytes(fh.read())


def gaussian_entropy_bits(std) -> np.ndarray:
    """Differential entropy of N(., std^2) in bits; -inf where std == 0."""
    std = np.asarray(std, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 0.5 * (LOG2_2PIE + 2.0 * np.log2(std))


def fit_profile(y_train, s: float = 1.0, mask=None, h_min: float = 0.1,
                mode: Literal["proportional", "inverse"] = "proportional") -> QuantizationProfile:
    """Per-entry Gaussian fit on training latents (d_y x N)."""
    y = as_matrix(y_train, "Y_train")
    if y.shape[1] < 2:
        raise DegenerateInput("need at least two training samples")
    mean = y.mean(axis=1)
    std = y.std(axis=1, ddof=1)
    ent = np.maximum(gaussian_entropy_bits(std), h_min)
    if mask is None:
        mask = np.ones(y.shape[0], dtype=bool)
    return QuantizationProfile(mean, std, ent, float(s), mask, float(h_min), mode)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y, prof: QuantizationProfile) -> np.ndarray:
    """Integer symbols for the kept entries of a vector (d_y,) or matrix (d_y, B)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != prof.d_y:
        raise ProfileMismatch(f"latent has {y.shape[0]} entries, profile {prof.d_y}")
    k = prof.kept
    if y.ndim == 1:
        return _round_half_away((y[k] - prof.mean[k]) / prof.steps[k]).astype(np.int64)
    return _round_half_away((y[k] - prof.mean[k, None]) / prof.steps[k, None]).astype(np.int64)


def dequantize(v, prof: QuantizationProfile) -> np.ndarray:
    v = np.asarray(v)
    k = prof.kept
    if v.shape[0] != k.size:
        raise ProfileMismatch(f"{v.shape[0]} symbols for {k.size} kept entries")
    if v.ndim == 1:
        out = prof.mean.copy()
        out[k] += v * prof.steps[k]
        return out
    out = np.repeat(prof.mean[:, None], v.shape[1], axis=1)
    out[k] += v * prof.steps[k, None]
    return out


def apply_mask(prof: QuantizationProfile, keep) -> QuantizationProfile:
    """Restrict kept entries.

    ``keep`` is "last_half" (drop the trailing half), a fraction in (0, 1]
    (keep that leading share), or an explicit index collection.
    """
    d = prof.d_y
    mask = np.zeros(d, dtype=bool)
    if isinstance(keep, str):
        if keep != "last_half":
            raise ValueError(f"unknown mask mode {keep!r}")
        mask[: d - d // 2] = True
    elif isinstance(keep, float):
        if not 0.0 < keep <= 1.0:
            raise MaskEmpty("keep fraction must lie in (0, 1]")
        mask[: int(round(keep * d))] = True
    else:
        idx = np.asarray(list(keep), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= d):
            raise ProfileMismatch("mask index out of range")
        mask[idx] = True
    mask &= prof.mask
    if not mask.any():
        raise MaskEmpty("mask keeps no entries")
    return prof.with_mask(mask)


@dataclass(frozen=True)
class EntropyReport:
    total_bits: float
    per_entry_bits: np.ndarray
    histogram_bits: np.ndarray
    test_std: np.ndarray

    @property
    def histogram_total(self) -> float:
        return float(self.histogram_bits.sum())


def _plugin_entropy(symbols: np.ndarray) -> float:
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def total_entropy(y_test, prof: QuantizationProfile) -> EntropyReport:
    """Gaussian high-rate entropy of the quantized latent, summed over kept entries.

    Each entry contributes max(0, 1/2 log2(2 pi e (std_test / q)^2)). The
    plug-in entropy of the actual quantized symbols is reported alongside.
    """
    y = as_matrix(y_test, "Y_test")
    if y.shape[0] != prof.d_y:
        raise ProfileMismatch(f"latent has {y.shape[0]} entries, profile {prof.d_y}")
    if y.shape[1] < 2:
        raise DegenerateInput("need at least two test samples")
    k = prof.kept
    std = y[k].std(axis=1, ddof=1)
    with np.errstate(divide="ignore"):
        bits = np.maximum(0.0, gaussian_entropy_bits(std) - np.log2(prof.steps[k]))
    sym = quantize(y, prof)
    hist = np.array([_plugin_entropy(row) for row in sym])
    return EntropyReport(float(bits.sum()), bits, hist, std)


# -- entropy-coded bitstream -------------------------------------------------

def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class _EntryTable:
    half: int          # symbols -half..half, then escape at index 2*half+1
    cum: list          # cumulative frequencies, len 2*half+3

    @property
    def escape(self) -> int:
        return 2 * self.half + 1


def _entry_table(ratio: float) -> _EntryTable:
    """Discretized N(0, ratio^2) over unit bins with an escape for the tails."""
    if not math.isfinite(ratio) or ratio < 0:
        ratio = 0.0
    half = int(min(MAX_HALF_WIDTH, max(1, math.ceil(8.0 * ratio) + 1)))
    nsym = 2 * half + 2
    budget = MAX_TOTAL - nsym
    if ratio > 0:
        edges = [_norm_cdf((v - 0.5) / ratio) for v in range(-half, half + 2)]
        probs = [edges[i + 1] - edges[i] for i in range(2 * half + 1)]
        tail = 2.0 * _norm_cdf(-(half + 0.5) / ratio)
    else:
        probs = [0.0] * (2 * half + 1)
        probs[half] = 1.0
        tail = 0.0
    freqs = [1 + int(p * budget) for p in probs] + [1 + int(tail * budget)]
    freqs[half] += MAX_TOTAL - sum(freqs)
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + f)
    return _EntryTable(half, cum)


def _tables(prof: QuantizationProfile) -> list:
    key = ("tables", prof.checksum())
    if key not in prof._cache:
        ratios = prof.levels[prof.kept]
        prof._cache[key] = [_entry_table(float(r)) for r in ratios]
    return prof._cache[key]


def _zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


def _unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def _escape_chunks(u: int) -> int:
    n = max(1, -(-u.bit_length() // ESCAPE_CHUNK_BITS))
    if n > 4:
        raise ValueError("symbol magnitude exceeds 63 bits")
    return n


def model_cost_bits(v, prof: QuantizationProfile) -> float:
    """Ideal code length of ``v`` under the coder's own probability tables."""
    total = 0.0
    for sym, tab in zip(np.asarray(v).tolist(), _tables(prof)):
        idx = sym + tab.half if -tab.half <= sym <= tab.half else tab.escape
        total -= math.log2((tab.cum[idx + 1] - tab.cum[idx]) / MAX_TOTAL)
        if idx == tab.escape:
            total += 2 + ESCAPE_CHUNK_BITS * _escape_chunks(_zigzag(sym))
    return total


def header_size(d_y: int) -> int:
    return 4 + 2 + 2 + 4 + (d_y + 7) // 8 + 4 + 4


def encode_stream(v, prof: QuantizationProfile) -> bytes:
    v = np.asarray(v, dtype=np.int64).reshape(-1)
    if v.size != prof.kept.size:
        raise ProfileMismatch(f"{v.size} symbols for {prof.kept.size} kept entries")
    enc = RangeEncoder()
    for sym, tab in zip(v.tolist(), _tables(prof)):
        if -tab.half <= sym <= tab.half:
            idx = sym + tab.half
            enc.encode(tab.cum[idx], tab.cum[idx + 1] - tab.cum[idx], MAX_TOTAL)
        else:
            e = tab.escape
            enc.encode(tab.cum[e], tab.cum[e + 1] - tab.cum[e], MAX_TOTAL)
            u = _zigzag(sym)
            n = _escape_chunks(u)
            enc.encode_bits(n - 1, 2)
            for c in range(n):
                enc.encode_bits((u >> (ESCAPE_CHUNK_BITS * c)) & 0xFFFF, ESCAPE_CHUNK_BITS)
    payload = enc.finish()
    head = STREAM_MAGIC + struct.pack("<HHf", STREAM_VERSION, prof.d_y, prof.scale)
    return head + prof.bitmap() + struct.pack("<II", prof.checksum(), len(payload)) + payload


def parse_header(bits: bytes) -> dict:
    if len(bits) < 12 or bits[:4] != STREAM_MAGIC:
        raise FormatError("bad bitstream magic")
    version, d_y, s = struct.unpack("<HHf", bits[4:12])
    if version != STREAM_VERSION:
        raise FormatError(f"unsupported bitstream version {version}")
    nb = (d_y + 7) // 8
    if len(bits) < 12 + nb + 8:
        raise FormatError("bitstream header truncated")
    bitmap = bits[12:12 + nb]
    crc, plen = struct.unpack("<II", bits[12 + nb:20 + nb])
    if len(bits) != header_size(d_y) + plen:
        raise FormatError("payload length does not match header")
    return {"d_y": d_y, "s": s, "bitmap": bitmap, "crc": crc, "payload": bits[20 + nb:]}


def decode_stream(bits: bytes, prof: QuantizationProfile) -> np.ndarray:
    head = parse_header(bytes(bits))
    if (head["d_y"] != prof.d_y or head["bitmap"] != prof.bitmap()
            or head["s"] != np.float32(prof.scale) or head["crc"] != prof.checksum()):
        raise ModelMismatch("bitstream was encoded under a different profile")
    dec = RangeDecoder(head["payload"])
    out = []
    for tab in _tables(prof):
        idx = dec.decode(tab.cum)
        if idx != tab.escape:
            out.append(idx - tab.half)
            continue
        n = dec.decode_bits(2) + 1
        u = 0
        for c in range(n):
            u |= dec.decode_bits(ESCAPE_CHUNK_BITS) << (ESCAPE_CHUNK_BITS * c)
        out.append(_unzigzag(u))
    return np.asarray(out, dtype=np.int64)
