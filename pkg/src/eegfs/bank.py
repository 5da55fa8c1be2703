"""Gradient memory bank: a FIFO of per-sample feature-map gradients.

The bank holds gradient batches from the most recent iterations. The
newest entry acts as the anchor set; strictly older entries form the
search pool. Sampling keeps, per anchor, the top-k pool gradients by
cosine similarity; an exponential age decay is applied before averaging
everything down to one channel-weight vector, blended between the
sampled history and the newest batch by a momentum coefficient.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import DimensionError, ValidationError


class BankUsageError(RuntimeError):
    """Bank operation called outside its protocol (ordering, double decay)."""


class WarmupError(BankUsageError):
    """Sampling requested before the bank holds enough entries."""


def cosine_sim(g1: np.ndarray, g2: np.ndarray) -> float:
    """Cosine similarity of two equal-shape gradients, flattened.

    Returns 0 when either norm is below 1e-12, so degenerate gradients
    never outrank informative ones.
    """
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim: shapes {g1.shape} and {g2.shape} differ")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass
class SampledGradients:
    """Output of bank sampling: the newest batch plus selected older rows.

    ``ages`` counts iterations back from the one being processed: the
    newest banked batch has age 1 (tracked implicitly for ``recent``),
    selected rows have ages in 2..capacity+1.
    """

    recent: np.ndarray                 # (b, C, S)
    sampled: np.ndarray                # (n_selected, C, S)
    ages: np.ndarray                   # (n_selected,) ints >= 2
    selected_keys: list = field(default_factory=list)  # (iteration, sample) per row
    decayed: bool = False


@dataclass
class AlphaWeights:
    """Channel weight vector with its blend coefficient."""

    alpha: np.ndarray                  # (C,)
    m: float
    frozen_alpha: Optional[np.ndarray] = None


class GradientBank:
    """FIFO queue of (iteration, gradients) entries, at most capacity+1 long.

    ``capacity`` counts the historical iterations searched by sampling;
    one extra slot holds the newest batch, which anchors the search.
    Entries are plain arrays: nothing in the bank participates in
    differentiation.
    """

    def __init__(self, capacity: int, top_k: int, decay: float,
                 channels: int, spatial: int):
        if capacity < 1:
            raise ValidationError(f"bank capacity must be >= 1, got {capacity}")
        if top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {top_k}")
        if not 0.0 <= decay <= 1.0:
            raise ValidationError(f"decay must lie in [0, 1], got {decay}")
        self.capacity = capacity
        self.top_k = top_k
        self.decay = decay
        self.channels = channels
        self.spatial = spatial
        self.entries: deque[tuple[int, np.ndarray]] = deque()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def is_full(self) -> bool:
        return len(self.entries) == self.capacity + 1

    def push(self, iteration: int, grads: np.ndarray) -> None:
        """Enqueue one iteration's per-sample gradients; evict the oldest
        entry once more than capacity+1 are held."""
        grads = np.asarray(grads, dtype=np.float64)
        if grads.ndim != 3 or grads.shape[1:] != (self.channels, self.spatial):
            raise DimensionError(
                f"push: gradients shape {grads.shape} does not match "
                f"(b, {self.channels}, {self.spatial})")
        if self.entries and iteration <= self.entries[-1][0]:
            raise BankUsageError(
                f"push: iteration {iteration} not after {self.entries[-1][0]}")
        self.entries.append((iteration, grads.copy()))
        if len(self.entries) > self.capacity + 1:
            self.entries.popleft()

    def sample_top_k(self) -> SampledGradients:
        """Select, per anchor row of the newest entry, the top-k most
        cosine-similar rows from all strictly older entries.

        Ties break toward the lower (iteration, sample index). Rows may
        be selected by several anchors; duplicates are kept.
        """
        if len(self.entries) < 2:
            raise WarmupError("sampling needs the newest entry plus at least one older one")
        newest_iter, anchors = self.entries[-1]

        pool_rows = []
        pool_keys = []
        pool_ages = []
        for it, grads in list(self.entries)[:-1]:
            for si in range(grads.shape[0]):
                pool_rows.append(grads[si].ravel())
                pool_keys.append((it, si))
                pool_ages.append(newest_iter - it + 1)
        pool = np.stack(pool_rows)
        pool_norms = np.linalg.norm(pool, axis=1)
        iters = np.array([k[0] for k in pool_keys])
        samples = np.array([k[1] for k in pool_keys])

        k = self.top_k
        if k > len(pool_rows):
            raise ValidationError(
                f"top_k={k} exceeds the {len(pool_rows)} gradients available")

        chosen_rows = []
        chosen_ages = []
        chosen_keys = []
        for i in range(anchors.shape[0]):
            a = anchors[i].ravel()
            na = np.linalg.norm(a)
            if na < 1e-12:
                sims = np.zeros(len(pool_rows))
            else:
                sims = pool @ a / np.where(pool_norms < 1e-12, 1.0, pool_norms * na)
                sims[pool_norms < 1e-12] = 0.0
            # lexsort: last key is primary -> sort by -sim, then iter, then sample
            order = np.lexsort((samples, iters, -sims))[:k]
            for j in order:
                chosen_rows.append(pool[j].reshape(self.channels, self.spatial))
                chosen_ages.append(pool_ages[j])
                chosen_keys.append(pool_keys[j])

        return SampledGradients(
            recent=anchors.copy(),
            sampled=np.stack(chosen_rows),
            ages=np.array(chosen_ages, dtype=np.int64),
            selected_keys=chosen_keys,
        )

    def snapshot(self) -> list[tuple[int, np.ndarray]]:
        """Copy of the queue contents, oldest first, for checkpointing."""
        return [(it, g.copy()) for it, g in self.entries]

    def restore(self, entries: list[tuple[int, np.ndarray]]) -> None:
        self.entries.clear()
        for it, g in entries:
            self.push(it, g)


def apply_decay(s: SampledGradients, decay: float) -> SampledGradients:
    """Scale each gradient by decay**age (the newest batch has age 1)."""
    if s.decayed:
        raise BankUsageError("decay already applied to this sample set")
    factors = np.power(float(decay), s.ages.astype(np.float64))
    return SampledGradients(
        recent=s.recent * decay,
        sampled=s.sampled * factors[:, None, None],
        ages=s.ages.copy(),
        selected_keys=list(s.selected_keys),
        decayed=True,
    )


def compute_alpha(s: SampledGradients, m: float) -> AlphaWeights:
    """Blend the decayed sample average with the decayed recent average.

    Both terms are averaged over their sample and spatial axes, leaving a
    per-channel vector; ``m`` weights the historical side.
    """
    if not s.decayed:
        raise BankUsageError("compute_alpha requires decayed gradients")
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"momentum m must lie in [0, 1], got {m}")
    avg_sampled = s.sampled.mean(axis=(0, 2))
    avg_recent = s.recent.mean(axis=(0, 2))
    return AlphaWeights(alpha=m * avg_sampled + (1.0 - m) * avg_recent, m=m)
