"""Entropy-weighted feature selection driven by banked gradients.

A channel weight vector (from the gradient bank) turns the feature map
into a heat map; per-location channel entropy of the batch-pooled heat
map measures how uncertain each location is, and locations are
re-weighted by one minus their normalized entropy before being fused
back onto the features through a residual connection.

The weight vector is a constant with respect to the current forward
pass; everything downstream of it (heat-map normalization, pooling,
probabilities, entropies, location weights) is differentiable, so the
training gradient flows through the full selection path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, DimensionError, Tensor, ValidationError
from .bank import AlphaWeights, GradientBank, apply_decay, compute_alpha


class ConfigurationError(RuntimeError):
    """Selector used in a mode its state cannot support."""


@dataclass
class FsState:
    """Mutable per-insertion-site state of the selection module."""

    channels: int
    activation_kind: str = "softmax"
    bn: BatchNormState = None  # type: ignore[assignment]
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    eps_h: float = 1e-12
    warmup_done: bool = False
    last_lambda: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.activation_kind not in ("softmax", "sigmoid"):
            raise ValidationError(
                f"activation_kind must be softmax|sigmoid, got {self.activation_kind!r}")
        if self.bn is None:
            self.bn = BatchNormState(self.channels)


@dataclass
class AttributionMap:
    """Per-location weights expanded back to input-signal resolution."""

    lambda_per_location: np.ndarray     # (S,)
    upsampled_per_timestamp: np.ndarray  # (t,)
    clip_id: int
    layer: int


def batch_pool(h: Tensor) -> Tensor:
    """Mean over the batch axis of (B, C, S) -> (C, S)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.data.ndim != 3:
        raise DimensionError(f"batch_pool: need (B,C,S), got {h.shape}")
    return ad.mean_over_axes(h, (0,))


def heat_map(h: Tensor, alpha: np.ndarray, fs: FsState, mode: str) -> Tensor:
    """Channel-weighted feature map, batch-normalized per channel.

    ``alpha`` multiplies each channel of ``h``; the product is normalized
    with the selector's own running statistics (affine fixed at identity).
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.data.ndim != 3:
        raise DimensionError(f"heat_map: need (B,C,S), got {h.shape}")
    chans = h.shape[1]
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (chans,):
        raise DimensionError(f"heat_map: alpha shape {alpha.shape} != ({chans},)")
    weighted = ad.mul(h, Tensor(alpha.reshape(chans, 1)))
    return ad.batchnorm(weighted, Tensor(np.ones(chans)), Tensor(np.zeros(chans)),
                        fs.bn, mode, eps=fs.bn_eps, momentum_bn=fs.bn_momentum)


def probability(v: np.ndarray, kind: str) -> np.ndarray:
    """Channel probabilities of heat-map values: softmax over the channel
    axis (first axis), or independent per-channel sigmoids."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "softmax":
        e = np.exp(v - v.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True)
    if kind == "sigmoid":
        return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                        np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    raise ValidationError(f"kind must be softmax|sigmoid, got {kind!r}")


def entropy(p: np.ndarray, kind: str) -> float | np.ndarray:
    """Channel entropy in nats, with 0 log 0 = 0.

    Softmax kind treats the channel axis as one distribution; sigmoid
    kind sums independent binary entropies over channels. A 1-D input
    yields a float; a (C, S) input yields per-location entropies (S,).
    """
    p = np.asarray(p, dtype=np.float64)

    def xlogx(a):
        return np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)

    if kind == "softmax":
        h = -xlogx(p).sum(axis=0)
    elif kind == "sigmoid":
        h = -(xlogx(p) + xlogx(1.0 - p)).sum(axis=0)
    else:
        raise ValidationError(f"kind must be softmax|sigmoid, got {kind!r}")
    return float(h) if p.ndim == 1 else h


def lambda_weights(entropies: np.ndarray, eps_h: float = 1e-12) -> np.ndarray:
    """One minus entropy normalized by its maximum, per location.

    When every entropy is below ``eps_h`` there is no uncertainty signal
    to normalize by; all locations are kept fully (weights of one).
    """
    h = np.asarray(entropies, dtype=np.float64)
    if (h < 0).any():
        raise ValidationError("entropies must be nonnegative")
    hmax = h.max()
    if hmax < eps_h:
        return np.ones_like(h)
    return 1.0 - h / hmax


def _entropy_op(p: Tensor, kind: str) -> Tensor:
    """Taped per-location entropy of channel probabilities (C, S) -> (S,)."""
    if kind == "softmax":
        return ad.mul(ad.sum_over_axes(ad.xlogx(p), (0,)), -1.0)
    inner = ad.add(ad.xlogx(p), ad.xlogx(ad.sub(1.0, p)))
    return ad.mul(ad.sum_over_axes(inner, (0,)), -1.0)


class FeatureSelector:
    """Encoder hook mapping a feature map to its selected version.

    Owns the gradient bank, the momentum blend coefficient, and the
    selection state. During training the channel weights are recomputed
    from the bank every iteration once the bank is full; before that the
    hook is an exact identity. At evaluation time the frozen weights are
    used, falling back to the most recent training weights mid-run.
    """

    def __init__(self, bank: GradientBank, momentum: float, state: FsState):
        if not 0.0 <= momentum <= 1.0:
            raise ValidationError(f"momentum must lie in [0, 1], got {momentum}")
        self.bank = bank
        self.momentum = momentum
        self.state = state
        self.current_alpha: Optional[AlphaWeights] = None
        self.frozen_alpha: Optional[np.ndarray] = None

    def eval_alpha(self) -> Optional[np.ndarray]:
        if self.frozen_alpha is not None:
            return self.frozen_alpha
        if self.current_alpha is not None:
            return self.current_alpha.alpha
        return None

    def freeze(self) -> None:
        """Persist the current channel weights for inference. Called once,
        at the end of training."""
        if self.current_alpha is not None:
            self.frozen_alpha = self.current_alpha.alpha.copy()

    def __call__(self, h: Tensor, mode: str) -> Tensor:
        return fs_forward(h, self.bank, self, mode)


def fs_forward(h: Tensor, bank: GradientBank, sel: FeatureSelector, mode: str) -> Tensor:
    """Full selection pass: weights -> heat map -> entropies -> residual fuse.

    Returns ``h`` unchanged (the same tensor, bit-exact) while the bank is
    still warming up in training, or when no weights exist yet at eval.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be train|eval, got {mode!r}")

    if mode == "train":
        if not bank.is_full:
            return h
        sampled = apply_decay(bank.sample_top_k(), bank.decay)
        sel.current_alpha = compute_alpha(sampled, sel.momentum)
        sel.state.warmup_done = True
        alpha = sel.current_alpha.alpha
    else:
        alpha = sel.eval_alpha()
        if alpha is None:
            return h

    fs = sel.state
    v = heat_map(h, alpha, fs, mode)
    pooled = batch_pool(v)
    if fs.activation_kind == "softmax":
        p = ad.softmax(pooled, axis=0)
    else:
        p = ad.sigmoid(pooled)
    entropies = _entropy_op(p, fs.activation_kind)

    hmax = ad.max_over_axis(entropies, 0)
    if float(hmax.data) < fs.eps_h:
        lam = Tensor(np.ones(h.shape[2]))
    else:
        lam = ad.sub(1.0, ad.div(entropies, hmax))
    fs.last_lambda = lam.data.copy()

    return ad.add(h, ad.mul(v, lam))


def export_attribution(fs: FsState, clip, stride_product: int,
                       layer: int = 0) -> AttributionMap:
    """Expand the last location weights to raw-signal resolution.

    Nearest-neighbor upsampling by the encoder's cumulative temporal
    reduction factor; timestamps past the covered span (convolution edge
    loss) take the last location's weight.
    """
    if fs.last_lambda is None:
        raise ConfigurationError("no location weights recorded yet; run a forward pass")
    if stride_product < 1:
        raise ValidationError(f"stride_product must be >= 1, got {stride_product}")
    lam = fs.last_lambda
    t_len = clip.data.shape[1]
    idx = np.minimum(np.arange(t_len) // stride_product, len(lam) - 1)
    return AttributionMap(
        lambda_per_location=lam.copy(),
        upsampled_per_timestamp=lam[idx],
        clip_id=clip.clip_id,
        layer=layer,
    )


def write_attribution_csv(amap: AttributionMap, path) -> None:
    """CSV with one row per sample point: ``timestamp,weight`` (9 sig. digits)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp", "weight"])
        for ts, w in enumerate(amap.upsampled_per_timestamp):
            writer.writerow([ts, f"{w:.9g}"])
