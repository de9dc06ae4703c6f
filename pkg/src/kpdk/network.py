"""Keypoints-only depth prediction network and its trainer.

A two-layer fully connected network maps the concatenated source and
target keypoints (4K values, landmark-major) to K depth proxies and, for
the map-emitting variants, 8 affine parameters.  Training minimizes the
reprojection loss; the ``pseudoinverse`` variant routes gradients through
the closed-form affine solve, the ``separate``/``secondary_lsq`` variants
use the explicitly predicted map.  The two map-emitting variants differ
only at prediction time: ``secondary_lsq`` discards the predicted map and
re-solves from the predicted depths.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import structured
from .geometry import AffineMap, apply_affine, compose3d, solve_affine
from .synthetic import PairSample

__all__ = [
    "AFFINE_VARIANTS",
    "DivergenceError",
    "HIDDEN_UNITS",
    "MlpModel",
    "TrainConfig",
    "TrainLog",
    "VARIANTS",
    "forward",
    "init_model",
    "load_model",
    "model_input",
    "predict_target",
    "save_model",
    "train",
    "training_loss",
]

HIDDEN_UNITS = 256

VARIANTS = ("separate", "secondary_lsq", "pseudoinverse")
# Variants whose prediction head also emits the 8 map parameters.
AFFINE_VARIANTS = frozenset({"separate", "secondary_lsq"})

# Row-major parameters of the identity map, used to seed the affine head.
_IDENTITY_PARAMS = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])


class DivergenceError(ArithmeticError):
    """Training produced a non-finite or runaway loss."""


@dataclass
class MlpModel:
    """Two-layer rectifier network: 4K -> 256 -> K (+8 for map variants)."""

    k: int
    variant: str
    w1: np.ndarray  # (4K, 256)
    b1: np.ndarray  # (256,)
    w2: np.ndarray  # (256, o)
    b2: np.ndarray  # (o,)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        o = self.k + 8 if self.variant in AFFINE_VARIANTS else self.k
        shapes = {
            "w1": (4 * self.k, HIDDEN_UNITS),
            "b1": (HIDDEN_UNITS,),
            "w2": (HIDDEN_UNITS, o),
            "b2": (o,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: contains non-finite values")
            setattr(self, name, arr)

    @property
    def has_affine_head(self) -> bool:
        return self.variant in AFFINE_VARIANTS

    @property
    def output_units(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            k=self.k,
            variant=self.variant,
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            seed=self.seed,
        )


def init_model(k: int, variant: str, seed: int = 0) -> MlpModel:
    """Seeded initialization.

    Hidden weights are Glorot-uniform with rectifier gain sqrt(2); hidden
    biases zero.  Output weights are zero, so fresh depth predictions
    equal their biases, drawn Normal(0, 0.5); the affine head's biases
    spell the identity map.
    """
    if k < 4:
        raise ValueError(f"k must be >= 4, got {k}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    fan_in = 4 * k
    limit = np.sqrt(2.0) * np.sqrt(6.0 / (fan_in + HIDDEN_UNITS))
    w1 = rng.uniform(-limit, limit, (fan_in, HIDDEN_UNITS))
    b1 = np.zeros(HIDDEN_UNITS)
    o = k + 8 if variant in AFFINE_VARIANTS else k
    w2 = np.zeros((HIDDEN_UNITS, o))
    b2 = np.zeros(o)
    b2[:k] = rng.normal(0.0, 0.5, k)
    if variant in AFFINE_VARIANTS:
        b2[k:] = _IDENTITY_PARAMS
    return MlpModel(k=k, variant=variant, w1=w1, b1=b1, w2=w2, b2=b2, seed=seed)


def model_input(src, tgt) -> np.ndarray:
    """Concatenated network input: source (x, y) pairs then target pairs."""
    return np.concatenate([np.asarray(src, dtype=np.float64).reshape(-1),
                           np.asarray(tgt, dtype=np.float64).reshape(-1)])


def _forward_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x (B, 4K) -> (pre-activation (B, 256), hidden (B, 256), out (B, o))."""
    pre = x @ model.w1 + model.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ model.w2 + model.b2
    return pre, hidden, out


def forward(model: MlpModel, src, tgt) -> tuple[np.ndarray, AffineMap | None]:
    """Predict depths (and the affine map, for map-emitting variants)."""
    s = np.asarray(src, dtype=np.float64)
    t = np.asarray(tgt, dtype=np.float64)
    if s.shape != (model.k, 2) or t.shape != (model.k, 2):
        raise ValueError(
            f"expected two ({model.k}, 2) keypoint sets, got {s.shape} and {t.shape}"
        )
    out = _forward_batch(model, model_input(s, t)[None, :])[2][0]
    z = out[: model.k]
    amap = AffineMap.from_params(out[model.k:]) if model.has_affine_head else None
    return z, amap


def _loss_grads_batch(
    model: MlpModel,
    x: np.ndarray,
    src: np.ndarray,
    tgt: np.ndarray,
    variant: str,
    damping: float,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Per-sample losses and batch-mean parameter gradients."""
    bsz = x.shape[0]
    k = model.k
    pre, hidden, out = _forward_batch(model, x)
    z = out[:, :k]
    if variant == "pseudoinverse":
        losses, grad_z, _, _ = structured.structured_loss_batch(z, src, tgt, damping)
        dout = np.zeros_like(out)
        dout[:, :k] = grad_z
    else:
        if not model.has_affine_head:
            raise ValueError(f"variant {variant!r} needs a model with an affine head")
        maps = out[:, k:].reshape(bsz, 2, 4)
        losses, grad_map, grad_z = structured.eq1_loss_batch(maps, z, src, tgt)
        dout = np.concatenate([grad_z, grad_map.reshape(bsz, 8)], axis=1)
    dw2 = hidden.T @ dout / bsz
    db2 = dout.mean(axis=0)
    dhidden = dout @ model.w2.T
    dhidden *= pre > 0.0
    dw1 = x.T @ dhidden / bsz
    db1 = dhidden.mean(axis=0)
    return losses, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def training_loss(
    model: MlpModel,
    sample: PairSample,
    variant: str | None = None,
    damping: float = 1e-8,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of one sample and its exact gradient for every model parameter.

    secondary_lsq trains exactly like separate (the predicted map is used
    in the loss); pseudoinverse differentiates through the solve.
    """
    v = variant or model.variant
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {v!r}")
    if v == "secondary_lsq":
        v = "separate"
    x = model_input(sample.src, sample.tgt)[None, :]
    losses, grads = _loss_grads_batch(
        model, x, sample.src[None], sample.tgt[None], v, damping
    )
    loss = float(losses[0])
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss for sample with K={sample.k}")
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; defaults follow the reference recipe."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    variant: str = "pseudoinverse"
    damping: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.damping <= 0:
            raise ValueError(f"training damping must be > 0, got {self.damping}")


@dataclass
class TrainLog:
    """Per-epoch mean training loss, validation loss and wall-clock seconds."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)


def _dataset_arrays(dataset: list[PairSample], k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    srcs = np.stack([s.src for s in dataset])
    tgts = np.stack([s.tgt for s in dataset])
    x = np.concatenate([srcs.reshape(len(dataset), -1), tgts.reshape(len(dataset), -1)], axis=1)
    if srcs.shape[1] != k:
        raise ValueError(f"dataset has K={srcs.shape[1]}, model expects K={k}")
    return x, srcs, tgts


def _mean_loss(model: MlpModel, x, srcs, tgts, variant: str, damping: float) -> float:
    total = 0.0
    for lo in range(0, x.shape[0], 512):
        hi = min(lo + 512, x.shape[0])
        _, _, out = _forward_batch(model, x[lo:hi])
        z = out[:, : model.k]
        if variant == "pseudoinverse":
            losses, *_ = structured.structured_loss_batch(z, srcs[lo:hi], tgts[lo:hi], damping)
        else:
            maps = out[:, model.k:].reshape(hi - lo, 2, 4)
            losses, *_ = structured.eq1_loss_batch(maps, z, srcs[lo:hi], tgts[lo:hi])
        total += float(losses.sum())
    return total / x.shape[0]


def train(
    model: MlpModel,
    dataset: list[PairSample],
    config: TrainConfig,
    val_dataset: list[PairSample] | None = None,
) -> tuple[MlpModel, TrainLog]:
    """Nesterov-momentum SGD over shuffled mini-batches.

    Gradients are evaluated at the momentum look-ahead point; the batch
    gradient is the mean of per-sample gradients (fixed summation order,
    so results are bit-reproducible for a given seed).  When no validation
    set is supplied the training set doubles as one.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    variant = config.variant
    if variant == "secondary_lsq":
        variant = "separate"
    if variant == "separate" and not model.has_affine_head:
        raise ValueError("separate/secondary_lsq training needs a model with an affine head")
    x, srcs, tgts = _dataset_arrays(dataset, model.k)
    vx, vsrcs, vtgts = (
        _dataset_arrays(val_dataset, model.k) if val_dataset else (x, srcs, tgts)
    )
    out = model.copy()
    params = {"w1": out.w1, "b1": out.b1, "w2": out.w2, "b2": out.b2}
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    n = x.shape[0]
    mu, lr = config.momentum, config.learning_rate
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        perm = rng.permutation(n)
        epoch_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            ahead = out.copy()
            for name in params:
                setattr(ahead, name, params[name] + mu * velocity[name])
            losses, grads = _loss_grads_batch(
                ahead, x[idx], srcs[idx], tgts[idx], variant, config.damping
            )
            batch_mean = float(losses.mean())
            if not np.isfinite(batch_mean) or batch_mean > 1e6:
                raise DivergenceError(
                    f"training diverged at epoch {epoch} (batch starting at index {lo}): "
                    f"mean loss {batch_mean}"
                )
            epoch_sum += float(losses.sum())
            for name in params:
                velocity[name] = mu * velocity[name] - lr * grads[name]
                params[name] += velocity[name]
        out.w1, out.b1, out.w2, out.b2 = params["w1"], params["b1"], params["w2"], params["b2"]
        log.train_loss.append(epoch_sum / n)
        log.val_loss.append(_mean_loss(out, vx, vsrcs, vtgts, variant, config.damping))
        log.wall_clock.append(time.perf_counter() - tic)
    return out, log


def predict_target(
    model: MlpModel,
    sample: PairSample,
    variant: str | None = None,
    damping: float = 1e-8,
) -> tuple[np.ndarray, AffineMap]:
    """Re-pose the source keypoints onto the target geometry.

    separate applies the network-predicted map; secondary_lsq and
    pseudoinverse solve the affine fit from the predicted depths.  Returns
    the transformed points and the map that produced them.
    """
    v = variant or model.variant
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {v!r}")
    z, amap = forward(model, sample.src, sample.tgt)
    if v == "separate":
        if amap is None:
            raise ValueError("separate prediction needs a model with an affine head")
        used = amap
    else:
        used = solve_affine(compose3d(sample.src, z), sample.tgt, damping=damping)
    return apply_affine(used, compose3d(sample.src, z)), used


# ---------------------------------------------------------------------------
# Checkpoints: a single JSON document, written atomically.  Weights are
# flattened row-major; floats round-trip exactly.
# ---------------------------------------------------------------------------


def save_model(model: MlpModel, path: str):
    doc = {
        "k": model.k,
        "variant": model.variant,
        "layer1_w": model.w1.reshape(-1).tolist(),
        "layer1_b": model.b1.tolist(),
        "layer2_w": model.w2.reshape(-1).tolist(),
        "layer2_b": model.b2.tolist(),
        "seed": model.seed,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path: str) -> MlpModel:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        k = int(doc["k"])
        variant = doc["variant"]
        o = k + 8 if variant in AFFINE_VARIANTS else k
        return MlpModel(
            k=k,
            variant=variant,
            w1=np.asarray(doc["layer1_w"], dtype=np.float64).reshape(4 * k, HIDDEN_UNITS),
            b1=np.asarray(doc["layer1_b"], dtype=np.float64),
            w2=np.asarray(doc["layer2_w"], dtype=np.float64).reshape(HIDDEN_UNITS, o),
            b2=np.asarray(doc["layer2_b"], dtype=np.float64),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
