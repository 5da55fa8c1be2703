"""Training and evaluation loops, Adam optimization, checkpointing.

Each training iteration runs the encoder with the selection hook under a
fresh tape, backpropagates the mean cross-entropy, pushes the captured
feature-map gradient into the bank, and applies one Adam step. The
channel weights therefore always derive from gradients of *previous*
iterations. Shuffling is counter-based (seed plus epoch number), so a
run can be stopped at any epoch boundary and resumed bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, ValidationError
from .bank import AlphaWeights, GradientBank
from .data import Dataset, ParseError
from .encoder import Encoder, EncoderConfig
from .metrics import MetricsReport, report
from .selection import ConfigurationError, FeatureSelector, FsState

CHECKPOINT_MAGIC = b"IEFS"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 1

_ACTIVATION_CODES = {"softmax": 0.0, "sigmoid": 1.0}
_ACTIVATION_NAMES = {0.0: "softmax", 1.0: "sigmoid"}


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the failing iteration index."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss ({value}) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    bank_size: int = 8         # iterations of history searched (grid key "q")
    top_k: int = 1             # gradients kept per anchor (grid key "K")
    momentum: float = 0.2      # historical/recent blend (grid key "m")
    decay: float = 0.25        # per-age attenuation (grid key "gamma")
    fs_enabled: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError(f"momentum {self.momentum} outside [0, 1]")
        if not 0.0 < self.decay <= 1.0:
            raise ValidationError(f"decay {self.decay} outside (0, 1]")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValidationError("lr must be > 0 and weight_decay >= 0")
        self.encoder.validate()


@dataclass
class EpochRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: Optional[float]


def write_metrics_csv(rows: list[EpochRow], path) -> None:
    """Fixed-format log: 6 decimal places, absent AUROC printed as nan."""
    def fmt(v: Optional[float]) -> str:
        return "nan" if v is None else f"{v:.6f}"

    with open(path, "w") as f:
        f.write("epoch,split,loss,acc,precision,recall,f1,auroc\n")
        for r in rows:
            f.write(f"{r.epoch},{r.split},{fmt(r.loss)},{fmt(r.accuracy)},"
                    f"{fmt(r.precision)},{fmt(r.recall)},{fmt(r.f1)},{fmt(r.auroc)}\n")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "AdamMoments":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_update(theta: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, weight_decay: float, beta1: float,
                beta2: float, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step with decoupled weight decay applied
    before the moment update."""
    theta = theta * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), m, v


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              moments: AdamMoments, config: TrainConfig) -> None:
    """Update every parameter in place (sorted order for determinism)."""
    moments.t += 1
    for name in sorted(params):
        p = params[name]
        if p.data.shape != grads[name].shape:
            raise ad.DimensionError(
                f"adam_step: grad shape {grads[name].shape} != param {p.data.shape} "
                f"for {name}")
        p.data, moments.m[name], moments.v[name] = adam_update(
            p.data, grads[name], moments.m[name], moments.v[name], moments.t,
            config.lr, config.weight_decay, config.adam_beta1,
            config.adam_beta2, config.adam_eps)


# ---------------------------------------------------------------------------
# Checkpoint container


@dataclass
class Checkpoint:
    """Named-tensor container; everything (counters included) is float64."""

    tensors: dict[str, np.ndarray]

    def scalar(self, name: str) -> float:
        return float(self.tensors[name].reshape(()))

    @property
    def epoch(self) -> int:
        return int(self.scalar("state/epoch"))

    @property
    def frozen_alpha(self) -> Optional[np.ndarray]:
        return self.tensors.get("alpha/frozen")

    def config(self) -> TrainConfig:
        t = self.tensors
        blocks = tuple(tuple(int(x) for x in row) for row in t["config/enc.blocks"])
        enc = EncoderConfig(
            in_channels=int(self.scalar("config/enc.in_channels")),
            clip_len=int(self.scalar("config/enc.clip_len")),
            blocks=blocks,
            insertion_layer=int(self.scalar("config/enc.insertion_layer")),
            num_classes=int(self.scalar("config/enc.num_classes")),
            activation_kind=_ACTIVATION_NAMES[self.scalar("config/enc.activation")],
            bn_eps=self.scalar("config/enc.bn_eps"),
            bn_momentum=self.scalar("config/enc.bn_momentum"),
        )
        return TrainConfig(
            epochs=int(self.scalar("config/epochs")),
            batch_size=int(self.scalar("config/batch_size")),
            lr=self.scalar("config/lr"),
            weight_decay=self.scalar("config/weight_decay"),
            adam_beta1=self.scalar("config/adam_beta1"),
            adam_beta2=self.scalar("config/adam_beta2"),
            adam_eps=self.scalar("config/adam_eps"),
            seed=int(self.scalar("config/seed")),
            bank_size=int(self.scalar("config/bank_size")),
            top_k=int(self.scalar("config/top_k")),
            momentum=self.scalar("config/momentum"),
            decay=self.scalar("config/decay"),
            fs_enabled=bool(self.scalar("config/fs_enabled")),
            encoder=enc,
        )


def _encode_config(config: TrainConfig) -> dict[str, np.ndarray]:
    enc = config.encoder
    out = {
        "config/epochs": config.epochs, "config/batch_size": config.batch_size,
        "config/lr": config.lr, "config/weight_decay": config.weight_decay,
        "config/adam_beta1": config.adam_beta1, "config/adam_beta2": config.adam_beta2,
        "config/adam_eps": config.adam_eps, "config/seed": config.seed,
        "config/bank_size": config.bank_size, "config/top_k": config.top_k,
        "config/momentum": config.momentum, "config/decay": config.decay,
        "config/fs_enabled": float(config.fs_enabled),
        "config/enc.in_channels": enc.in_channels,
        "config/enc.clip_len": enc.clip_len,
        "config/enc.insertion_layer": enc.insertion_layer,
        "config/enc.num_classes": enc.num_classes,
        "config/enc.activation": _ACTIVATION_CODES[enc.activation_kind],
        "config/enc.bn_eps": enc.bn_eps,
        "config/enc.bn_momentum": enc.bn_momentum,
    }
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}
    arrays["config/enc.blocks"] = np.asarray(enc.blocks, dtype=np.float64)
    return arrays


def save(ckpt: Checkpoint, path) -> None:
    """Magic, version, tensor count, then sorted named f64 tensors."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()

    def take(offset: int, n: int, what: str) -> bytes:
        if offset + n > len(raw):
            raise ParseError(offset, f"truncated while reading {what}")
        return raw[offset:offset + n]

    if take(0, 4, "magic") != CHECKPOINT_MAGIC:
        raise ParseError(0, f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<H", take(4, 2, "version"))
    if version != CHECKPOINT_VERSION:
        raise ParseError(4, f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(6, 4, "tensor count"))
    offset = 10
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2, f"tensor {i} name length"))
        offset += 2
        name = take(offset, name_len, f"tensor {i} name").decode("utf-8")
        offset += name_len
        dtype, rank = struct.unpack("<BB", take(offset, 2, f"{name} dtype/rank"))
        offset += 2
        if dtype != _DTYPE_F64:
            raise ParseError(offset - 2, f"{name}: unknown dtype tag {dtype}")
        dims = struct.unpack(f"<{rank}I", take(offset, 4 * rank, f"{name} dims"))
        offset += 4 * rank
        n_bytes = 8 * int(np.prod(dims)) if rank else 8
        payload = take(offset, n_bytes, f"{name} payload")
        offset += n_bytes
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if offset != len(raw):
        raise ParseError(offset, f"{len(raw) - offset} trailing bytes")
    return Checkpoint(tensors=tensors)


def _build_checkpoint(config: TrainConfig, enc: Encoder,
                      sel: Optional[FeatureSelector], moments: AdamMoments,
                      epoch: int, iteration: int,
                      frozen_alpha: Optional[np.ndarray]) -> Checkpoint:
    tensors: dict[str, np.ndarray] = dict(_encode_config(config))
    for name, p in enc.params.items():
        tensors[f"param/{name}"] = p.data.copy()
        tensors[f"adam/m/{name}"] = moments.m[name].copy()
        tensors[f"adam/v/{name}"] = moments.v[name].copy()
    tensors["adam/t"] = np.asarray(float(moments.t))
    for key, arr in enc.state_arrays().items():
        tensors[f"state/{key}"] = arr.copy()
    tensors["state/epoch"] = np.asarray(float(epoch))
    tensors["state/iteration"] = np.asarray(float(iteration))
    if sel is not None:
        tensors["state/bn.fs.mean"] = sel.state.bn.mean.copy()
        tensors["state/bn.fs.var"] = sel.state.bn.var.copy()
        for idx, (it, grads) in enumerate(sel.bank.snapshot()):
            tensors[f"bank/{idx:04d}/iter"] = np.asarray(float(it))
            tensors[f"bank/{idx:04d}/grads"] = grads
        if sel.current_alpha is not None:
            tensors["alpha/current"] = sel.current_alpha.alpha.copy()
        if frozen_alpha is not None:
            tensors["alpha/frozen"] = frozen_alpha.copy()
    return Checkpoint(tensors=tensors)


def _make_selector(config: TrainConfig) -> FeatureSelector:
    chans, spat = config.encoder.feature_shape()
    bank = GradientBank(capacity=config.bank_size, top_k=config.top_k,
                        decay=config.decay, channels=chans, spatial=spat)
    state = FsState(channels=chans,
                    activation_kind=config.encoder.activation_kind,
                    bn_eps=config.encoder.bn_eps,
                    bn_momentum=config.encoder.bn_momentum)
    return FeatureSelector(bank, config.momentum, state)


def restore_model(ckpt: Checkpoint) -> tuple[TrainConfig, Encoder, Optional[FeatureSelector]]:
    """Rebuild an evaluable model (frozen weights and statistics) from a
    checkpoint."""
    config = ckpt.config()
    enc = Encoder(config.encoder, seed=config.seed)
    for name, p in enc.params.items():
        p.data = ckpt.tensors[f"param/{name}"].copy()
    for i, st in enumerate(enc.bn_states):
        st.mean = ckpt.tensors[f"state/bn.enc.{i}.mean"].copy()
        st.var = ckpt.tensors[f"state/bn.enc.{i}.var"].copy()
    sel = None
    if config.fs_enabled:
        sel = _make_selector(config)
        sel.state.bn.mean = ckpt.tensors["state/bn.fs.mean"].copy()
        sel.state.bn.var = ckpt.tensors["state/bn.fs.var"].copy()
        bank_items = sorted(n for n in ckpt.tensors if n.startswith("bank/")
                            and n.endswith("/iter"))
        entries = []
        for name in bank_items:
            idx = name.split("/")[1]
            entries.append((int(ckpt.scalar(name)), ckpt.tensors[f"bank/{idx}/grads"]))
        sel.bank.restore(entries)
        if "alpha/current" in ckpt.tensors:
            sel.current_alpha = AlphaWeights(
                alpha=ckpt.tensors["alpha/current"].copy(), m=config.momentum)
        if "alpha/frozen" in ckpt.tensors:
            sel.frozen_alpha = ckpt.tensors["alpha/frozen"].copy()
    return config, enc, sel


# ---------------------------------------------------------------------------
# Loops


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack(ds: Dataset, idx) -> tuple[Tensor, np.ndarray]:
    x = np.stack([ds.clips[i].data for i in idx])
    y = np.array([ds.clips[i].label for i in idx], dtype=np.int64)
    return Tensor(x), y


def _positive_probs(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True))[:, 1]


def _run_eval(enc: Encoder, sel: Optional[FeatureSelector], ds: Dataset,
              batch_size: int) -> tuple[list[tuple[float, int]], float]:
    scores: list[tuple[float, int]] = []
    loss_sum = 0.0
    for start in range(0, len(ds.clips), batch_size):
        idx = range(start, min(start + batch_size, len(ds.clips)))
        x, y = _stack(ds, idx)
        logits, _ = enc.forward(x, fs=sel, mode="eval")
        loss_sum += ad.cross_entropy_logits(logits, y).item() * len(y)
        for p, label in zip(_positive_probs(logits.data), y):
            scores.append((float(p), int(label)))
    return scores, loss_sum / len(ds.clips)


def _row(epoch: int, split: str, loss: float,
         scores: list[tuple[float, int]]) -> EpochRow:
    r = report(scores)
    return EpochRow(epoch=epoch, split=split, loss=loss, accuracy=r.accuracy,
                    precision=r.precision, recall=r.recall, f1=r.f1, auroc=r.auroc)


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    best_epoch: int
    log: list[EpochRow]
    alpha_trajectory_sha256: Optional[str]


def train(config: TrainConfig, ds_train: Dataset, ds_val: Dataset,
          resume: Optional[Checkpoint] = None) -> TrainResult:
    """Full training run; returns the final checkpoint, the best-validation
    checkpoint, and the per-epoch metrics log.

    With ``resume``, continues from the checkpoint's epoch to
    ``config.epochs``; the checkpoint's configuration must match (the
    epoch budget may differ). The combined log of the interrupted and
    resumed runs is identical to an uninterrupted run's.
    """
    config.validate()
    if not ds_train.clips or not ds_val.clips:
        raise ValidationError("train and validation datasets must be non-empty")
    if (ds_train.channels != config.encoder.in_channels
            or ds_train.timestamps != config.encoder.clip_len):
        raise ValidationError(
            f"dataset shape ({ds_train.channels}, {ds_train.timestamps}) does not "
            f"match encoder ({config.encoder.in_channels}, {config.encoder.clip_len})")

    enc = Encoder(config.encoder, seed=config.seed)
    sel = _make_selector(config) if config.fs_enabled else None
    moments = AdamMoments.zeros_like(enc.params)
    start_epoch = 0
    iteration = 0

    if resume is not None:
        saved = resume.config()
        if replace(saved, epochs=0) != replace(config, epochs=0):
            raise ConfigurationError(
                "resume checkpoint configuration does not match the active one")
        _, enc, restored_sel = restore_model(resume)
        if restored_sel is not None:
            sel = restored_sel
            sel.frozen_alpha = None  # frozen only at the true end of training
        for name in enc.params:
            moments.m[name] = resume.tensors[f"adam/m/{name}"].copy()
            moments.v[name] = resume.tensors[f"adam/v/{name}"].copy()
        moments.t = int(resume.scalar("adam/t"))
        start_epoch = resume.epoch
        iteration = int(resume.scalar("state/iteration"))
        if start_epoch >= config.epochs:
            raise ValidationError(
                f"checkpoint is already at epoch {start_epoch}; nothing to resume "
                f"within an epoch budget of {config.epochs}")

    log: list[EpochRow] = []
    traj = hashlib.sha256() if config.fs_enabled else None
    best: Optional[Checkpoint] = None
    best_epoch = 0
    best_acc = -1.0

    for epoch in range(start_epoch + 1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        train_scores: list[tuple[float, int]] = []
        loss_sum = 0.0
        n_seen = 0
        for idx in _batches(len(ds_train.clips), config.batch_size, rng):
            iteration += 1
            x, y = _stack(ds_train, idx)
            tape = ad.Tape()
            with tape:
                logits, h_l = enc.forward(x, fs=sel, mode="train")
                loss = ad.cross_entropy_logits(logits, y)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise DivergenceError(iteration, loss_val)
            ad.backward(loss, tape)
            if sel is not None:
                sel.bank.push(iteration, h_l.grad)
                if sel.current_alpha is not None and traj is not None:
                    traj.update(sel.current_alpha.alpha.tobytes())
            adam_step(enc.params, {k: p.grad for k, p in enc.params.items()},
                      moments, config)
            loss_sum += loss_val * len(y)
            n_seen += len(y)
            for p, label in zip(_positive_probs(logits.data), y):
                train_scores.append((float(p), int(label)))

        log.append(_row(epoch, "train", loss_sum / n_seen, train_scores))
        val_scores, val_loss = _run_eval(enc, sel, ds_val, config.batch_size)
        val_row = _row(epoch, "val", val_loss, val_scores)
        log.append(val_row)

        if val_row.accuracy > best_acc:
            best_acc = val_row.accuracy
            best_epoch = epoch
            frozen = sel.eval_alpha() if sel is not None else None
            best = _build_checkpoint(config, enc, sel, moments, epoch,
                                     iteration, frozen)

    if sel is not None:
        sel.freeze()
    final = _build_checkpoint(config, enc, sel, moments, config.epochs, iteration,
                              sel.frozen_alpha if sel is not None else None)
    assert best is not None
    return TrainResult(final=final, best=best, best_epoch=best_epoch, log=log,
                       alpha_trajectory_sha256=traj.hexdigest() if traj else None)


def evaluate(ckpt: Checkpoint, ds: Dataset, batch_size: int = 64) -> MetricsReport:
    """Eval-mode metrics of a completed checkpoint on a dataset."""
    config, enc, sel = restore_model(ckpt)
    if config.fs_enabled and ckpt.frozen_alpha is None:
        raise ConfigurationError(
            "checkpoint has no frozen channel weights; evaluation with the "
            "selection module enabled requires a completed training run")
    if sel is not None:
        sel.current_alpha = None  # inference must use the frozen weights only
    scores, _ = _run_eval(enc, sel, ds, batch_size)
    return report(scores)
