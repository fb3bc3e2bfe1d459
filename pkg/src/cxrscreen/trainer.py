"""Reference classifier: augmentation, softmax regression, weighted CE, Adam.

The model is multinomial logistic regression on downsampled pixels. It is
convex and small enough to gradient-check, which is what the bias audits
need; it is not a stand-in for a convolutional backbone's accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ClassWeights, SplitPlan, compute_class_weights
from .imgcore import resize_area, resize_bilinear

P_FLOOR = 1e-12


@dataclass(frozen=True)
class AugmentParams:
    rotate_deg_max: float = 0.0
    zoom_range: float = 0.0
    shear_deg_max: float = 0.0
    hflip_prob: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        vals = (self.rotate_deg_max, self.zoom_range, self.shear_deg_max, self.noise_sigma)
        if min(vals) < 0:
            raise ValueError("augmentation magnitudes must be non-negative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    patience: int = 3
    seed: int = 0
    input_side: int = 28
    weights: ClassWeights | None = None
    augment: AugmentParams | None = None
    init_scale: float = 0.01
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and patience >= 1 are required")


# Hyperparameters used for the fine-tuned backbone in the source study.
LOW_LR_PRESET = TrainConfig(learning_rate=1e-6, epochs=30, batch_size=8, patience=3)


@dataclass
class ModelParams:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)

    def to_json(self) -> dict:
        return {
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ModelParams":
        shape = tuple(data["shape"])
        w = np.asarray(data["weights"], dtype=np.float64).reshape(shape)
        b = np.asarray(data["bias"], dtype=np.float64)
        if b.shape != (shape[0],):
            raise ValueError("bias length must equal the number of classes")
        return cls(w, b)

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy())


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_json(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
        }


# --- augmentation -------------------------------------------------------------


def _sample_zero_pad(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    padded = np.pad(img, 1)
    # Coordinates within one pixel of the border blend with the zero ring.
    sx = np.clip(sx + 1.0, 0.0, w + 1.0)
    sy = np.clip(sy + 1.0, 0.0, h + 1.0)
    x0 = np.clip(np.floor(sx).astype(np.intp), 0, w)
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, h)
    fx, fy = sx - x0, sy - y0
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bottom = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def affine(img: np.ndarray, rotate_deg=0.0, zoom=1.0, shear_deg=0.0, flip=False) -> np.ndarray:
    """Rotate (counter-clockwise as displayed), zoom and shear about the centre.

    Bilinear resampling; samples falling outside the source are 0.
    """
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx - cx, cy - yy  # v points up so positive angles turn counter-clockwise
    th = math.radians(rotate_deg)
    sh = math.tan(math.radians(shear_deg))
    # Forward map: shear, then rotate, then zoom. Invert it for each output pixel.
    c, s = math.cos(th), math.sin(th)
    u1 = (c * u + s * v) / zoom
    v1 = (-s * u + c * v) / zoom
    u0 = u1 - sh * v1
    out = _sample_zero_pad(arr, u0 + cx, cy - v1)
    if flip:
        out = out[:, ::-1]
    return out


def augment(img: np.ndarray, params: AugmentParams, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-params.rotate_deg_max, params.rotate_deg_max)
    zoom = 1.0 + rng.uniform(-params.zoom_range, params.zoom_range)
    shear = rng.uniform(-params.shear_deg_max, params.shear_deg_max)
    flip = rng.random() < params.hflip_prob
    out = affine(img, rot, zoom, shear, flip)
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# --- model maths --------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_ce(probs, label: int, weights) -> tuple[float, np.ndarray]:
    """Loss ``-w[y] log p[y]`` and its gradient w.r.t. the logits, ``w[y] (p - onehot)``."""
    p = np.asarray(probs, dtype=np.float64)
    w = _weight_vector(weights, p.shape[-1])
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range")
    loss = -w[label] * math.log(max(p[label], P_FLOOR))
    grad = p.copy()
    grad[label] -= 1.0
    return loss, w[label] * grad


def _weight_vector(weights, n_classes) -> np.ndarray:
    if weights is None:
        return np.ones(n_classes)
    if isinstance(weights, ClassWeights):
        weights = weights.weights
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights, got {w.shape}")
    return w


def batch_loss_grad(params: ModelParams, x: np.ndarray, y: np.ndarray, class_w: np.ndarray):
    """Mean weighted CE over a batch with gradients for weights and bias."""
    probs = softmax(x @ params.weights.T + params.bias)
    n = x.shape[0]
    sw = class_w[y]
    loss = float(np.mean(-sw * np.log(np.maximum(probs[np.arange(n), y], P_FLOOR))))
    g = probs
    g[np.arange(n), y] -= 1.0
    g *= sw[:, None] / n
    return loss, g.T @ x, g.sum(axis=0)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """One bias-corrected Adam update. ``params`` and ``grads`` are lists of arrays."""
    if len(params) != len(grads) or any(np.shape(p) != np.shape(g) for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes do not match")
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("step count t must be >= 1")
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params.append(np.asarray(p, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(ms, vs, t)


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


# --- training -----------------------------------------------------------------


def downsample(img: np.ndarray, side: int) -> np.ndarray:
    """Area-average when shrinking, bilinear when enlarging."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape == (side, side):
        return arr
    if arr.shape[0] >= side and arr.shape[1] >= side:
        return resize_area(arr, side, side)
    return resize_bilinear(arr, side, side)


def features(img: np.ndarray, side: int = 28) -> np.ndarray:
    return downsample(img, side).ravel()


def init_params(n_classes: int, n_features: int, seed: int, scale: float = 0.01) -> ModelParams:
    rng = np.random.default_rng([seed, 0])
    w = rng.uniform(-scale, scale, size=(n_classes, n_features))
    return ModelParams(w, np.zeros(n_classes))


def evaluate_loss(params, x, y, class_w) -> tuple[float, float]:
    loss, _, _ = batch_loss_grad(params, x, y, class_w)
    acc = float(np.mean(np.argmax(x @ params.weights.T + params.bias, axis=1) == y))
    return loss, acc


def _fold_scaling(params: ModelParams, mu: np.ndarray, sd: np.ndarray) -> ModelParams:
    # Weights learned on (x - mu) / sd become weights on raw x.
    w = params.weights / sd
    return ModelParams(w, params.bias - w @ mu)


def fit(x_train, y_train, x_val, y_val, config: TrainConfig, n_classes: int | None = None,
        train_images=None, on_epoch=None) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam with early stopping on validation loss.

    ``train_images`` (``(n, side, side)``) enables per-sample augmentation
    seeded by ``(seed, epoch, index)``; features are then recomputed from the
    augmented image each time the sample is drawn.

    With ``config.standardize`` the optimiser works on features z-scored by
    training-set statistics; the returned parameters act on raw features.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.intp)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.intp)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation partitions must be non-empty")
    n_classes = n_classes or int(max(y_train.max(), y_val.max())) + 1
    weights = config.weights
    if weights is None:
        weights = compute_class_weights(np.bincount(y_train, minlength=n_classes).clip(min=1))
    class_w = _weight_vector(weights, n_classes)

    if config.standardize:
        mu = x_train.mean(axis=0)
        sd = x_train.std(axis=0)
        sd = np.where(sd > 1e-8, sd, 1.0)
    else:
        mu, sd = np.zeros(x_train.shape[1]), np.ones(x_train.shape[1])
    z_train, z_val = (x_train - mu) / sd, (x_val - mu) / sd

    params = init_params(n_classes, x_train.shape[1], config.seed, config.init_scale)
    history = TrainHistory()
    state = AdamState.zeros_like([params.weights, params.bias])
    stopper = EarlyStopping(config.patience)
    best = params.copy()
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(x_train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if train_images is not None and config.augment is not None:
                xb = np.stack([
                    augment(train_images[i], config.augment, [config.seed, 2, epoch, int(i)]).ravel()
                    for i in idx
                ])
                xb = (xb - mu) / sd
            else:
                xb = z_train[idx]
            _, gw, gb = batch_loss_grad(params, xb, y_train[idx], class_w)
            (w, b), state = adam_step([params.weights, params.bias], [gw, gb], state,
                                      config.learning_rate)
            params = ModelParams(w, b)
        train_loss, _ = evaluate_loss(params, z_train, y_train, class_w)
        val_loss, val_acc = evaluate_loss(params, z_val, y_val, class_w)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.stopped_epoch = epoch
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best = params.copy()
        if on_epoch is not None:
            on_epoch(epoch, _fold_scaling(params, mu, sd))
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    return _fold_scaling(best if config.epochs else params, mu, sd), history


def train(split: SplitPlan, images, labels, config: TrainConfig) -> tuple[ModelParams, TrainHistory]:
    """Train on ``split.train`` and early-stop on ``split.val``.

    ``images`` is indexable by manifest index and yields preprocessed images;
    ``labels`` gives each record's class index.
    """
    tr, va = split.indices("train"), split.indices("val")
    if not tr or not va:
        raise ValueError("training and validation partitions must be non-empty")
    side = config.input_side
    imgs_tr = np.stack([downsample(images[i], side) for i in tr])
    x_tr = imgs_tr.reshape(len(tr), -1)
    x_va = np.stack([features(images[i], side) for i in va])
    y = np.asarray(labels, dtype=np.intp)
    return fit(x_tr, y[tr], x_va, y[va], config, n_classes=len(split.classes),
               train_images=imgs_tr if config.augment is not None else None)


def predict(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {params.weights.shape[1]}")
    return softmax(x @ params.weights.T + params.bias)


def predict_class(probs) -> np.ndarray:
    # np.argmax picks the lowest index on ties.
    return np.argmax(np.asarray(probs), axis=-1)


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")
