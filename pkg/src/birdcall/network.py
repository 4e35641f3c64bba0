"""Distributed CNN-LSTM classifier with handwritten forward/backward passes.

Every feature image (25x40) passes through a shared 2x2 convolution (50
kernels, stride 1, no padding), ReLU, and 2x2 max-pooling, then is
flattened (11400) and linearly projected to 1000. The per-feature
vectors form a sequence consumed by a 10-unit LSTM; its final hidden
state feeds a 10-node linear layer and a softmax output layer. Training
is RMSProp on the mean categorical cross-entropy under a cosine
annealing schedule with warm restarts.

All math is numpy float64 with a fixed summation order, so a (seed,
dataset, config) triple fully determines the trained parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit as _sigmoid

from .container import ContainerError, read_container, write_container
from .windowing import IMAGE_SHAPE, Sample


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class ModelFormatError(ValueError):
    """A model file failed validation (version, shapes, or checksum)."""


@dataclass(frozen=True)
class ArchConfig:
    """Network topology. The defaults reproduce the full-size classifier."""

    class_count: int
    feature_count: int
    conv_kernels: int = 50
    kernel_size: tuple[int, int] = (2, 2)
    pool_size: tuple[int, int] = (2, 2)
    projection_dim: int | None = 1000
    lstm_units: int = 10
    dense1_units: int = 10
    image_shape: tuple[int, int] = IMAGE_SHAPE
    share_cnn_weights: bool = True

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_count < 1:
            raise ValueError("need at least 1 feature")
        h, w = self.image_shape
        kh, kw = self.kernel_size
        if kh > h or kw > w:
            raise ValueError("kernel larger than the image")
        ch, cw = self.conv_out_shape
        ph, pw = self.pool_size
        if ph > ch or pw > cw:
            raise ValueError("pool window larger than the convolution output")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ValueError("projection_dim must be positive or None")

    @property
    def conv_out_shape(self) -> tuple[int, int]:
        h, w = self.image_shape
        kh, kw = self.kernel_size
        return h - kh + 1, w - kw + 1

    @property
    def pool_out_shape(self) -> tuple[int, int]:
        ch, cw = self.conv_out_shape
        ph, pw = self.pool_size
        return ch // ph, cw // pw

    @property
    def flat_dim(self) -> int:
        ph, pw = self.pool_out_shape
        return ph * pw * self.conv_kernels

    @property
    def lstm_input_dim(self) -> int:
        return self.projection_dim if self.projection_dim is not None else self.flat_dim

    def to_meta(self) -> dict:
        return {
            "class_count": self.class_count,
            "feature_count": self.feature_count,
            "conv_kernels": self.conv_kernels,
            "kernel_size": list(self.kernel_size),
            "pool_size": list(self.pool_size),
            "projection_dim": self.projection_dim,
            "lstm_units": self.lstm_units,
            "dense1_units": self.dense1_units,
            "image_shape": list(self.image_shape),
            "share_cnn_weights": self.share_cnn_weights,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ArchConfig":
        return cls(
            class_count=int(meta["class_count"]),
            feature_count=int(meta["feature_count"]),
            conv_kernels=int(meta["conv_kernels"]),
            kernel_size=tuple(meta["kernel_size"]),
            pool_size=tuple(meta["pool_size"]),
            projection_dim=None if meta["projection_dim"] is None else int(meta["projection_dim"]),
            lstm_units=int(meta["lstm_units"]),
            dense1_units=int(meta["dense1_units"]),
            image_shape=tuple(meta["image_shape"]),
            share_cnn_weights=bool(meta["share_cnn_weights"]),
        )


@dataclass(frozen=True)
class SchedulerConfig:
    """Cosine annealing with warm restarts every ``cycle_epochs`` epochs."""

    eta_max: float = 1e-5
    eta_min: float = 0.0
    cycle_epochs: int = 20
    total_epochs: int = 200

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")
        if self.cycle_epochs < 1 or self.total_epochs < 1:
            raise ValueError("epoch counts must be positive")
        if self.total_epochs % self.cycle_epochs:
            raise ValueError(
                f"total_epochs ({self.total_epochs}) must be a whole number of "
                f"cycles of length {self.cycle_epochs}"
            )

    @property
    def cycles(self) -> int:
        return self.total_epochs // self.cycle_epochs


@dataclass
class ModelParams:
    """Named trainable tensors plus the topology they belong to."""

    arch: ArchConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class OptimizerState:
    """Per-tensor mean-square gradient accumulators for RMSProp."""

    acc: dict[str, np.ndarray]
    rho: float = 0.9
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(acc={k: np.zeros_like(v) for k, v in params.tensors.items()})


def expected_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """The exact shape of every trainable tensor for a topology."""
    kh, kw = arch.kernel_size
    k = arch.conv_kernels
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.share_cnn_weights:
        shapes["conv_w"] = (k, 1, kh, kw)
        shapes["conv_b"] = (k,)
    else:
        shapes["conv_w"] = (arch.feature_count, k, 1, kh, kw)
        shapes["conv_b"] = (arch.feature_count, k)
    if arch.projection_dim is not None:
        shapes["proj_w"] = (arch.flat_dim, arch.projection_dim)
        shapes["proj_b"] = (arch.projection_dim,)
    u = arch.lstm_units
    shapes["lstm_w"] = (arch.lstm_input_dim, 4 * u)
    shapes["lstm_u"] = (u, 4 * u)
    shapes["lstm_b"] = (4 * u,)
    shapes["dense1_w"] = (u, arch.dense1_units)
    shapes["dense1_b"] = (arch.dense1_units,)
    shapes["dense2_w"] = (arch.dense1_units, arch.class_count)
    shapes["dense2_b"] = (arch.class_count,)
    return shapes


def init_params(arch: ArchConfig, seed) -> ModelParams:
    """Draw initial parameters deterministically from one RNG stream.

    Weights use Xavier-uniform bounds sqrt(6 / (fan_in + fan_out)); the
    recurrent kernel is built gate-by-gate from QR factorizations with
    the sign fixed so R's diagonal is positive; biases start at zero
    except the forget gate, which starts at one. The draw order is conv,
    projection, LSTM, dense1, dense2.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def xavier(shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    kh, kw = arch.kernel_size
    k = arch.conv_kernels
    receptive = kh * kw
    u = arch.lstm_units
    tensors: dict[str, np.ndarray] = {}

    conv_shape = expected_shapes(arch)["conv_w"]
    tensors["conv_w"] = xavier(conv_shape, receptive, k * receptive)
    tensors["conv_b"] = np.zeros(expected_shapes(arch)["conv_b"])

    if arch.projection_dim is not None:
        tensors["proj_w"] = xavier(
            (arch.flat_dim, arch.projection_dim), arch.flat_dim, arch.projection_dim
        )
        tensors["proj_b"] = np.zeros(arch.projection_dim)

    d_in = arch.lstm_input_dim
    tensors["lstm_w"] = xavier((d_in, 4 * u), d_in, 4 * u)
    recurrent = np.empty((u, 4 * u))
    for gate in range(4):
        q, r = np.linalg.qr(rng.standard_normal((u, u)))
        q = q * np.sign(np.diag(r))
        recurrent[:, gate * u : (gate + 1) * u] = q
    tensors["lstm_u"] = recurrent
    lstm_b = np.zeros(4 * u)
    lstm_b[u : 2 * u] = 1.0  # forget gate opens fully at the start
    tensors["lstm_b"] = lstm_b

    tensors["dense1_w"] = xavier((u, arch.dense1_units), u, arch.dense1_units)
    tensors["dense1_b"] = np.zeros(arch.dense1_units)
    tensors["dense2_w"] = xavier(
        (arch.dense1_units, arch.class_count), arch.dense1_units, arch.class_count
    )
    tensors["dense2_b"] = np.zeros(arch.class_count)
    return ModelParams(arch=arch, tensors=tensors)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, dict]:
    arch = params.arch
    t = params.tensors
    if x.ndim != 4:
        raise ValueError(f"expected a (batch, features, H, W) array, got shape {x.shape}")
    batch, n, h, w = x.shape
    if n != arch.feature_count:
        raise ValueError(
            f"model expects {arch.feature_count} feature images per sample, got {n}"
        )
    if (h, w) != tuple(arch.image_shape):
        raise ValueError(f"model expects {arch.image_shape} images, got {(h, w)}")

    kh, kw = arch.kernel_size
    k = arch.conv_kernels
    patch_dim = kh * kw
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    patches = view.reshape(batch, n, *arch.conv_out_shape, patch_dim)

    if arch.share_cnn_weights:
        w2d = t["conv_w"].reshape(k, patch_dim).T
        pre = patches @ w2d + t["conv_b"]
    else:
        w2d = t["conv_w"].reshape(n, k, patch_dim).transpose(0, 2, 1)
        pre = np.einsum("bnxyp,npk->bnxyk", patches, w2d)
        pre += t["conv_b"][None, :, None, None, :]
    relu_mask = pre > 0
    activated = np.where(relu_mask, pre, 0.0)

    ph, pw = arch.pool_size
    hp, wp = arch.pool_out_shape
    windows = (
        activated[:, :, : hp * ph, : wp * pw, :]
        .reshape(batch, n, hp, ph, wp, pw, k)
        .transpose(0, 1, 2, 4, 6, 3, 5)
        .reshape(batch, n, hp, wp, k, ph * pw)
    )
    winner_idx = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, winner_idx[..., None], axis=-1)[..., 0]
    # winner indices fit in a byte; keep the cache light
    winners = winner_idx.astype(np.uint8)
    flat = pooled.reshape(batch, n, arch.flat_dim)

    if arch.projection_dim is not None:
        z = flat @ t["proj_w"] + t["proj_b"]
    else:
        z = flat

    u = arch.lstm_units
    h_state = np.zeros((batch, u))
    c_state = np.zeros((batch, u))
    steps = []
    for step in range(n):
        gates = z[:, step] @ t["lstm_w"] + h_state @ t["lstm_u"] + t["lstm_b"]
        gi = _sigmoid(gates[:, :u])
        gf = _sigmoid(gates[:, u : 2 * u])
        gg = np.tanh(gates[:, 2 * u : 3 * u])
        go = _sigmoid(gates[:, 3 * u :])
        c_new = gf * c_state + gi * gg
        tanh_c = np.tanh(c_new)
        steps.append((h_state, c_state, gi, gf, gg, go, tanh_c))
        c_state = c_new
        h_state = go * tanh_c

    d1 = h_state @ t["dense1_w"] + t["dense1_b"]
    logits = d1 @ t["dense2_w"] + t["dense2_b"]
    probs = _softmax(logits)

    cache = {
        "patches": patches,
        "relu_mask": relu_mask,
        "winners": winners,
        "flat": flat,
        "z": z,
        "lstm_steps": steps,
        "h_last": h_state,
        "d1": d1,
        "logits": logits,
        "probs": probs,
    }
    return probs, cache


def forward(params: ModelParams, images: np.ndarray) -> tuple[np.ndarray, dict]:
    """Class probabilities for one sample (N,H,W) or a batch (B,N,H,W)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        probs, cache = _forward_batch(params, images[None])
        return probs[0], cache
    return _forward_batch(params, images)


def cross_entropy_loss(logits: np.ndarray, true_class) -> float:
    """Mean negative log softmax probability of the true class.

    Computed in log-sum-exp form, so extreme logits stay finite.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(true_class, dtype=np.intp))
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("class index out of range")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def backward(params: ModelParams, cache: dict, true_class) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean cross-entropy w.r.t. every tensor."""
    arch = params.arch
    t = params.tensors
    probs = cache["probs"]
    labels = np.atleast_1d(np.asarray(true_class, dtype=np.intp))
    batch = probs.shape[0]
    if labels.shape[0] != batch:
        raise ValueError("label count does not match the cached batch")

    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch

    grads: dict[str, np.ndarray] = {}
    grads["dense2_w"] = cache["d1"].T @ dlogits
    grads["dense2_b"] = dlogits.sum(axis=0)
    dd1 = dlogits @ t["dense2_w"].T
    grads["dense1_w"] = cache["h_last"].T @ dd1
    grads["dense1_b"] = dd1.sum(axis=0)
    dh = dd1 @ t["dense1_w"].T

    u = arch.lstm_units
    n = arch.feature_count
    z = cache["z"]
    dw_l = np.zeros_like(t["lstm_w"])
    du_l = np.zeros_like(t["lstm_u"])
    db_l = np.zeros_like(t["lstm_b"])
    dz = np.zeros_like(z)
    dc = np.zeros((batch, u))
    for step in range(n - 1, -1, -1):
        h_prev, c_prev, gi, gf, gg, go, tanh_c = cache["lstm_steps"][step]
        d_o = dh * tanh_c
        dc = dc + dh * go * (1.0 - tanh_c * tanh_c)
        d_i = dc * gg
        d_f = dc * c_prev
        d_g = dc * gi
        dc_prev = dc * gf
        dgates = np.concatenate(
            [
                d_i * gi * (1.0 - gi),
                d_f * gf * (1.0 - gf),
                d_g * (1.0 - gg * gg),
                d_o * go * (1.0 - go),
            ],
            axis=1,
        )
        dw_l += z[:, step].T @ dgates
        du_l += h_prev.T @ dgates
        db_l += dgates.sum(axis=0)
        dz[:, step] = dgates @ t["lstm_w"].T
        dh = dgates @ t["lstm_u"].T
        dc = dc_prev
    grads["lstm_w"] = dw_l
    grads["lstm_u"] = du_l
    grads["lstm_b"] = db_l

    flat = cache["flat"]
    if arch.projection_dim is not None:
        flat2 = flat.reshape(-1, arch.flat_dim)
        dz2 = dz.reshape(-1, arch.projection_dim)
        grads["proj_w"] = flat2.T @ dz2
        grads["proj_b"] = dz2.sum(axis=0)
        dflat = (dz2 @ t["proj_w"].T).reshape(flat.shape)
    else:
        dflat = dz

    kh, kw = arch.kernel_size
    ph, pw = arch.pool_size
    hp, wp = arch.pool_out_shape
    k = arch.conv_kernels
    ch, cw = arch.conv_out_shape
    dpooled = dflat.reshape(batch, n, hp, wp, k)
    dwindows = np.zeros((batch, n, hp, wp, k, ph * pw))
    np.put_along_axis(
        dwindows, cache["winners"][..., None].astype(np.intp), dpooled[..., None], axis=-1
    )
    dcropped = (
        dwindows.reshape(batch, n, hp, wp, k, ph, pw)
        .transpose(0, 1, 2, 5, 3, 6, 4)
        .reshape(batch, n, hp * ph, wp * pw, k)
    )
    dpre = np.zeros((batch, n, ch, cw, k))
    dpre[:, :, : hp * ph, : wp * pw, :] = dcropped
    dpre *= cache["relu_mask"]

    patches = cache["patches"]
    patch_dim = kh * kw
    if arch.share_cnn_weights:
        dw2d = patches.reshape(-1, patch_dim).T @ dpre.reshape(-1, k)
        grads["conv_w"] = dw2d.T.reshape(k, 1, kh, kw)
        grads["conv_b"] = dpre.sum(axis=(0, 1, 2, 3))
    else:
        dw2d = np.einsum("bnxyp,bnxyk->npk", patches, dpre)
        grads["conv_w"] = dw2d.transpose(0, 2, 1).reshape(n, k, 1, kh, kw)
        grads["conv_b"] = dpre.sum(axis=(0, 2, 3))
    return grads


def cosine_annealing_lr(epoch: int, cfg: SchedulerConfig) -> float:
    """Learning rate at an epoch; restarts to eta_max when a cycle begins."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    t_cur = epoch % cfg.cycle_epochs
    return cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (
        1.0 + math.cos(math.pi * t_cur / cfg.cycle_epochs)
    )


def rmsprop_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> tuple[ModelParams, OptimizerState]:
    """One un-centered RMSProp update, in place.

    Accumulators decay on every step, including when a gradient is zero.
    """
    for name, tensor in params.tensors.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in tensor {name!r}")
        acc = state.acc[name]
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        tensor -= lr * g / (np.sqrt(acc) + state.eps)
    return params, state


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float


def epoch_log_to_csv(log: Sequence[EpochStats]) -> str:
    lines = ["epoch,lr,loss,train_accuracy"]
    for s in log:
        lines.append(f"{s.epoch},{s.lr:.12g},{s.loss:.12g},{s.accuracy:.12g}")
    return "\n".join(lines) + "\n"


def train(
    samples: Sequence[Sample],
    arch: ArchConfig,
    sched: SchedulerConfig,
    seed: int,
    batch_size: int = 128,
    target_accuracy: float | None = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Train from scratch; deterministic in (samples, configs, seed).

    One RNG stream drives initialization and the per-epoch shuffles, in
    that order. Accuracy is measured on the pre-update forward pass of
    each batch. When ``target_accuracy`` is set, training stops at the
    end of the first epoch that reaches it.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    x = np.stack([np.asarray(s.images, dtype=np.float64) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.intp)
    if y.min() < 0 or y.max() >= arch.class_count:
        raise ValueError("sample label outside the configured class count")

    rng = np.random.default_rng(seed)
    params = init_params(arch, rng)
    state = OptimizerState.for_params(params)

    log: list[EpochStats] = []
    for epoch in range(sched.total_epochs):
        lr = cosine_annealing_lr(epoch, sched)
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            probs, cache = _forward_batch(params, x[idx])
            batch_loss = cross_entropy_loss(cache["logits"], y[idx])
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // batch_size}"
                )
            grads = backward(params, cache, y[idx])
            rmsprop_step(params, grads, state, lr)
            loss_sum += batch_loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            loss=loss_sum / len(samples),
            accuracy=correct / len(samples),
        )
        log.append(stats)
        if target_accuracy is not None and stats.accuracy >= target_accuracy:
            break
    return params, log


def aggregate_segment_probs(probs: np.ndarray) -> tuple[int, np.ndarray]:
    """Record-level decision: mean over segments, ties to the lowest class."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[0] < 1:
        raise ValueError("need at least one segment")
    mean_probs = probs.mean(axis=0)
    return int(np.argmax(mean_probs)), mean_probs


def predict_record(
    params: ModelParams, segments: np.ndarray
) -> tuple[int, np.ndarray]:
    """Classify a record from all of its segments."""
    segments = np.asarray(segments, dtype=np.float64)
    if segments.ndim != 4 or segments.shape[0] < 1:
        raise ValueError("expected a non-empty (segments, features, H, W) array")
    probs, _ = _forward_batch(params, segments)
    return aggregate_segment_probs(probs)


@dataclass(frozen=True)
class LoadedModel:
    params: ModelParams
    feature_set: str
    class_names: tuple[str, ...]


def save_model(
    path,
    params: ModelParams,
    feature_set: str,
    class_names: Sequence[str],
) -> None:
    """Write a self-describing model file; identical inputs give identical bytes."""
    if len(class_names) != params.arch.class_count:
        raise ValueError(
            f"{len(class_names)} class names for {params.arch.class_count} classes"
        )
    meta = {
        "kind": "model",
        "arch": params.arch.to_meta(),
        "feature_set": feature_set,
        "class_names": list(class_names),
    }
    write_container(path, meta, params.tensors)


def load_model(path, expected_arch: ArchConfig | None = None) -> LoadedModel:
    """Read and validate a model file.

    Raises ModelFormatError on checksum failures, shape drift, or an
    architecture that differs from ``expected_arch`` when one is given.
    """
    try:
        meta, arrays = read_container(path)
    except ContainerError as exc:
        raise ModelFormatError(str(exc)) from exc
    if meta.get("kind") != "model":
        raise ModelFormatError(f"{path} is not a model file")
    arch = ArchConfig.from_meta(meta["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ModelFormatError("model architecture does not match the expected one")
    shapes = expected_shapes(arch)
    if set(arrays) != set(shapes):
        raise ModelFormatError(
            f"model tensors {sorted(arrays)} do not match the architecture's "
            f"{sorted(shapes)}"
        )
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise ModelFormatError(
                f"tensor {name!r} has shape {arrays[name].shape}, expected {shape}"
            )
    tensors = {name: arrays[name].astype(np.float64) for name in shapes}
    return LoadedModel(
        params=ModelParams(arch=arch, tensors=tensors),
        feature_set=meta["feature_set"],
        class_names=tuple(meta["class_names"]),
    )
