"""Synthetic multichannel signal corpus and its binary file format.

Clips are a low-amplitude background (three random-phase sinusoids plus
Gaussian noise per channel) with, for positive labels, one biphasic
sharp transient injected on a contiguous span of channels. Generation
is a pure function of the spec: every clip draws from its own stream
seeded by ``base seed + clip id``.

Sample values are quantized to 32-bit float resolution at creation, so
the file round trip (which stores 32-bit payloads) is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ValidationError

MAGIC = b"EEGS"
FORMAT_VERSION = 1


class ParseError(ValueError):
    """Corrupt or truncated dataset file; carries the failing byte offset."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"parse error at byte {offset}: {message}")
        self.offset = offset


@dataclass
class EegClip:
    """One fixed-length clip. ``spike_window`` is in-memory metadata from
    generation (timestamp range of the injected transient); it is not
    serialized."""

    clip_id: int
    group_id: int
    label: int
    data: np.ndarray                     # (channels, timestamps) float64
    spike_window: Optional[tuple[int, int]] = None

    def same_content(self, other: "EegClip") -> bool:
        return (self.clip_id == other.clip_id
                and self.group_id == other.group_id
                and self.label == other.label
                and np.array_equal(self.data, other.data))


@dataclass
class Dataset:
    channels: int
    timestamps: int
    sample_rate: int
    n_groups: int
    clips: list[EegClip] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)

    def same_content(self, other: "Dataset") -> bool:
        """Equality over the serialized fields (spike windows excluded)."""
        return (self.channels == other.channels
                and self.timestamps == other.timestamps
                and self.sample_rate == other.sample_rate
                and self.n_groups == other.n_groups
                and len(self.clips) == len(other.clips)
                and all(a.same_content(b) for a, b in zip(self.clips, other.clips)))


@dataclass
class CorpusSpec:
    n_clips: int = 2000
    channels: int = 16
    timestamps: int = 250
    sample_rate: int = 250
    class_balance: float = 0.5
    noise_sigma: float = 1.0
    spike_amplitude: float = 5.0
    spike_width_ms: tuple[float, float] = (20.0, 60.0)
    spike_channel_span: int = 4
    n_groups: int = 20
    seed: int = 42

    def validate(self) -> None:
        if self.n_clips < 1:
            raise ValidationError("n_clips must be >= 1")
        if self.channels < 1 or self.timestamps < 2:
            raise ValidationError("channels and timestamps must be positive")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValidationError(f"class_balance {self.class_balance} outside [0, 1]")
        if self.noise_sigma <= 0 or self.spike_amplitude <= 0:
            raise ValidationError("noise_sigma and spike_amplitude must be > 0")
        lo, hi = self.spike_width_ms
        if not 0 < lo <= hi:
            raise ValidationError(f"spike width range ({lo}, {hi}) must be increasing and > 0")
        clip_ms = self.timestamps / self.sample_rate * 1000.0
        # full transient: ~2 half-widths of lead-in, peak-to-trough gap, 2 of tail
        if 5.0 * hi >= clip_ms:
            raise ValidationError(
                f"spike width {hi} ms cannot fit a {clip_ms:.0f} ms clip")
        if not 1 <= self.spike_channel_span <= self.channels:
            raise ValidationError(
                f"spike_channel_span {self.spike_channel_span} outside [1, {self.channels}]")
        if self.n_groups < 1 or self.n_groups > self.n_clips:
            raise ValidationError(
                f"n_groups {self.n_groups} outside [1, n_clips={self.n_clips}]")


_SINE_AMPLITUDE = 0.3   # relative to noise_sigma
_TROUGH_RATIO = 0.6     # trough depth relative to peak


def _background(rng: np.random.Generator, channels: int, t_len: int,
                rate: float, sigma: float) -> np.ndarray:
    ts = np.arange(t_len) / rate
    data = np.zeros((channels, t_len))
    for c in range(channels):
        freqs = rng.uniform(4.0, 30.0, size=3)
        phases = rng.uniform(0.0, 2 * np.pi, size=3)
        for f, ph in zip(freqs, phases):
            data[c] += _SINE_AMPLITUDE * sigma * np.sin(2 * np.pi * f * ts + ph)
        data[c] += rng.normal(0.0, sigma, size=t_len)
    return data


def _inject_spike(rng: np.random.Generator, data: np.ndarray,
                  spec: CorpusSpec) -> tuple[int, int]:
    """Add one biphasic transient (positive peak, then trough) on a
    contiguous channel span; returns the affected timestamp window."""
    t_len = data.shape[1]
    rate = spec.sample_rate
    w_peak = rng.uniform(*spec.spike_width_ms) * rate / 1000.0   # samples (FWHM)
    w_trough = rng.uniform(*spec.spike_width_ms) * rate / 1000.0
    sig_p = w_peak / 2.355
    sig_t = w_trough / 2.355
    gap = (w_peak + w_trough) / 2.0
    lead = 2.0 * w_peak
    tail = 2.0 * w_trough
    t0 = rng.uniform(lead, t_len - 1 - tail - gap)
    t1 = t0 + gap
    c0 = int(rng.integers(0, spec.channels - spec.spike_channel_span + 1))

    ts = np.arange(t_len, dtype=np.float64)
    shape = (np.exp(-0.5 * ((ts - t0) / sig_p) ** 2)
             - _TROUGH_RATIO * np.exp(-0.5 * ((ts - t1) / sig_t) ** 2))
    data[c0:c0 + spec.spike_channel_span] += spec.spike_amplitude * shape
    start = max(0, int(np.floor(t0 - 1.5 * w_peak)))
    end = min(t_len - 1, int(np.ceil(t1 + 1.5 * w_trough)))
    return start, end


def generate(spec: CorpusSpec) -> Dataset:
    """Deterministic corpus: exact class balance, groups assigned round-robin."""
    spec.validate()
    n_pos = int(round(spec.n_clips * spec.class_balance))
    label_rng = np.random.default_rng(spec.seed)
    positives = set(label_rng.permutation(spec.n_clips)[:n_pos].tolist())

    clips = []
    for clip_id in range(spec.n_clips):
        rng = np.random.default_rng(spec.seed + clip_id)
        data = _background(rng, spec.channels, spec.timestamps,
                           spec.sample_rate, spec.noise_sigma)
        window = None
        label = int(clip_id in positives)
        if label:
            window = _inject_spike(rng, data, spec)
        data = data.astype(np.float32).astype(np.float64)  # storage resolution
        clips.append(EegClip(
            clip_id=clip_id,
            group_id=clip_id % spec.n_groups,
            label=label,
            data=data,
            spike_window=window,
        ))
    return Dataset(channels=spec.channels, timestamps=spec.timestamps,
                   sample_rate=spec.sample_rate, n_groups=spec.n_groups, clips=clips)


def split(d: Dataset, ratios: tuple[float, float, float], by_group: bool,
          seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Partition into train/val/test; with ``by_group`` every group lands
    wholly in one part. Part sizes follow largest-remainder rounding."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios {ratios} must sum to 1")
    if any(r < 0 for r in ratios):
        raise ValidationError(f"ratios {ratios} must be nonnegative")

    def allot(n: int) -> list[int]:
        exact = [r * n for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        rem = n - sum(counts)
        frac_order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in frac_order[:rem]:
            counts[i] += 1
        return counts

    rng = np.random.default_rng(seed)
    if by_group:
        groups = sorted({c.group_id for c in d.clips})
        n_parts = sum(1 for r in ratios if r > 0)
        if len(groups) < n_parts:
            raise ValidationError(
                f"{len(groups)} groups cannot cover {n_parts} non-empty splits")
        order = [groups[i] for i in rng.permutation(len(groups))]
        counts = allot(len(groups))
        buckets = []
        at = 0
        for n in counts:
            chosen = set(order[at:at + n])
            at += n
            buckets.append([c for c in d.clips if c.group_id in chosen])
    else:
        order = rng.permutation(len(d.clips))
        counts = allot(len(d.clips))
        buckets = []
        at = 0
        for n in counts:
            idx = sorted(order[at:at + n].tolist())
            at += n
            buckets.append([d.clips[i] for i in idx])

    def make(clips: list[EegClip]) -> Dataset:
        return Dataset(channels=d.channels, timestamps=d.timestamps,
                       sample_rate=d.sample_rate,
                       n_groups=len({c.group_id for c in clips}), clips=clips)

    return make(buckets[0]), make(buckets[1]), make(buckets[2])


def write(d: Dataset, path) -> None:
    """Binary layout: magic, u16 version, u32 header fields, then per clip
    u32 clip_id, u32 group_id, u8 label and little-endian f32 samples."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<5I", len(d.clips), d.channels, d.timestamps,
                            d.sample_rate, d.n_groups))
        for c in d.clips:
            f.write(struct.pack("<IIB", c.clip_id, c.group_id, c.label))
            f.write(c.data.astype("<f4").tobytes())


def read(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()

    def take(offset: int, n: int, what: str) -> bytes:
        if offset + n > len(raw):
            raise ParseError(offset, f"truncated while reading {what}")
        return raw[offset:offset + n]

    if take(0, 4, "magic") != MAGIC:
        raise ParseError(0, f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", take(4, 2, "version"))
    if version != FORMAT_VERSION:
        raise ParseError(4, f"unsupported version {version}")
    n_clips, channels, timestamps, rate, n_groups = struct.unpack(
        "<5I", take(6, 20, "header"))
    offset = 26
    payload = channels * timestamps * 4
    clips = []
    for i in range(n_clips):
        clip_id, group_id, label = struct.unpack("<IIB", take(offset, 9, f"clip {i} header"))
        offset += 9
        if label not in (0, 1):
            raise ParseError(offset - 1, f"clip {i} label {label} not binary")
        samples = np.frombuffer(take(offset, payload, f"clip {i} samples"), dtype="<f4")
        offset += payload
        clips.append(EegClip(
            clip_id=clip_id, group_id=group_id, label=int(label),
            data=samples.astype(np.float64).reshape(channels, timestamps)))
    if offset != len(raw):
        raise ParseError(offset, f"{len(raw) - offset} trailing bytes")
    return Dataset(channels=channels, timestamps=timestamps, sample_rate=rate,
                   n_groups=n_groups, clips=clips)
