"""Convolutional image towers with hand-written backpropagation.

A :class:`Tower` maps a fixed-length stack of ``P`` images to a
``latent_dim`` vector: one shared convolutional encoder is applied to every
image, the per-image feature vectors are concatenated slot by slot, and a
linear head compresses the concatenation.  The item side uses ``P = 1``, in
which case the concatenation is the identity.

All parameters live in one flat float64 vector (``Tower.theta``); per-layer
arrays are views into it.  That keeps the weight prior, the optimizer and the
checkpoint format trivial.

Tensors inside the encoder are channel-first ``(batch, C, H, W)``; images
enter as ``(H, W, C)`` to match how they are stored on disk.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_logger = logging.getLogger(__name__)

DEFAULT_LAYERS: tuple[dict[str, Any], ...] = (
    {"type": "conv", "kernel": 5, "channels": 16, "stride": 1},
    {"type": "relu"},
    {"type": "maxpool", "window": 2},
    {"type": "conv", "kernel": 5, "channels": 32, "stride": 1},
    {"type": "relu"},
    {"type": "maxpool", "window": 2},
    {"type": "conv", "kernel": 3, "channels": 64, "stride": 1},
    {"type": "relu"},
    {"type": "maxpool", "window": 2},
    {"type": "flatten"},
    {"type": "dense", "out": 128},
)

_LAYER_KEYS = {
    "conv": {"kernel", "channels", "stride"},
    "relu": set(),
    "maxpool": {"window"},
    "flatten": set(),
    "dense": {"out"},
}

# images per chunk for inference-only passes; bounds the im2col buffer
_CHUNK = 64


class DivergenceError(FloatingPointError):
    """Raised when a loss becomes NaN or infinite during training."""


def normalize_layers(layers: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Validate a layer list and fill defaults (conv stride 1)."""
    out = []
    for pos, spec in enumerate(layers):
        kind = spec.get("type")
        if kind not in _LAYER_KEYS:
            raise ValueError(f"layer {pos}: unknown type {kind!r}")
        extra = set(spec) - _LAYER_KEYS[kind] - {"type"}
        if extra:
            raise ValueError(f"layer {pos} ({kind}): unknown keys {sorted(extra)}")
        spec = dict(spec)
        if kind == "conv":
            spec.setdefault("stride", 1)
            for key in ("kernel", "channels", "stride"):
                if int(spec.get(key, 0)) < 1:
                    raise ValueError(f"layer {pos} (conv): {key} must be >= 1")
                spec[key] = int(spec[key])
        elif kind == "maxpool":
            if int(spec.get("window", 0)) < 1:
                raise ValueError(f"layer {pos} (maxpool): window must be >= 1")
            spec["window"] = int(spec["window"])
        elif kind == "dense":
            if int(spec.get("out", 0)) < 1:
                raise ValueError(f"layer {pos} (dense): out must be >= 1")
            spec["out"] = int(spec["out"])
        out.append(spec)
    if not any(s["type"] == "flatten" for s in out):
        out.append({"type": "flatten"})
    return out


@dataclass
class _Step:
    spec: dict[str, Any]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: list[tuple[int, int, tuple[int, ...]]] = field(default_factory=list)


def _plan(layers, input_shape, n_slots, latent_dim):
    """Shape inference.  Returns (steps, head param slots, feature_dim, n_params)."""
    height, width, channels = input_shape
    shape: tuple[int, ...] = (channels, height, width)
    offset = 0
    steps = []

    def alloc(*dims):
        nonlocal offset
        size = int(np.prod(dims))
        slot = (offset, offset + size, tuple(dims))
        offset += size
        return slot

    for pos, spec in enumerate(layers):
        kind = spec["type"]
        step = _Step(spec, shape, shape)
        if kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {pos}: conv after flatten")
            c, h, w = shape
            k, s = spec["kernel"], spec["stride"]
            if k > h or k > w:
                raise ValueError(f"layer {pos}: kernel {k} larger than input {h}x{w}")
            step.out_shape = (spec["channels"], (h - k) // s + 1, (w - k) // s + 1)
            step.params = [alloc(spec["channels"], c, k, k), alloc(spec["channels"])]
        elif kind == "maxpool":
            if len(shape) != 3:
                raise ValueError(f"layer {pos}: maxpool after flatten")
            c, h, w = shape
            p = spec["window"]
            if p > h or p > w:
                raise ValueError(f"layer {pos}: pool window {p} larger than input {h}x{w}")
            step.out_shape = (c, h // p, w // p)
        elif kind == "flatten":
            step.out_shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"layer {pos}: dense before flatten")
            step.out_shape = (spec["out"],)
            step.params = [alloc(shape[0], spec["out"]), alloc(spec["out"])]
        shape = step.out_shape
        steps.append(step)
    if len(shape) != 1:
        raise ValueError("encoder does not end in a flat feature vector")
    feature_dim = shape[0]
    head = [alloc(n_slots * feature_dim, latent_dim), alloc(latent_dim)]
    return steps, head, feature_dim, offset


def _conv_forward(x, w, b, stride):
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, o)
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), win


def _conv_backward(dout, x_shape, win, w, stride, need_dx):
    k = w.shape[-1]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    dx = np.zeros(x_shape)
    oh, ow = dout.shape[2], dout.shape[3]
    for ki in range(k):
        for kj in range(k):
            contrib = np.tensordot(dout, w[:, :, ki, kj], axes=([1], [0]))
            dx[:, :, ki:ki + stride * (oh - 1) + 1:stride,
               kj:kj + stride * (ow - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x, p):
    n, c, h, w = x.shape
    oh, ow = h // p, w // p
    blocks = x[:, :, :oh * p, :ow * p].reshape(n, c, oh, p, ow, p)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, p * p)
    # argmax returns the first maximum in row-major window order
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, x_shape, arg, p):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    blocks = np.zeros((n, c, oh, ow, p * p))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, oh, ow, p, p).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape)
    dx[:, :, :oh * p, :ow * p] = blocks.reshape(n, c, oh * p, ow * p)
    return dx


class Tower:
    """Shared-weight encoder over ``n_slots`` images followed by a linear head.

    ``n_slots`` is the bundle length ``P`` on the user side and 1 on the item
    side.
    """

    def __init__(
        self,
        layers: Sequence[dict[str, Any]] = DEFAULT_LAYERS,
        input_shape: tuple[int, int, int] = (60, 60, 3),
        n_slots: int = 1,
        latent_dim: int = 50,
        theta: np.ndarray | None = None,
    ):
        if n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.layers = normalize_layers(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.n_slots = int(n_slots)
        self.latent_dim = int(latent_dim)
        self._steps, self._head, self.feature_dim, self.n_params = _plan(
            self.layers, self.input_shape, self.n_slots, self.latent_dim
        )
        if theta is None:
            theta = np.zeros(self.n_params)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        self.theta = theta

    @classmethod
    def initialized(cls, rng: np.random.Generator, std: float | None = 0.05,
                    **kwargs) -> "Tower":
        """Gaussian weights and zero biases.

        ``std`` is the standard deviation of every weight tensor.  With
        ``std=None`` each tensor is scaled by its fan-in instead:
        ``sqrt(2 / fan_in)`` in front of a ReLU, ``sqrt(1 / fan_in)`` otherwise
        (the linear head, a final dense layer).
        """
        tower = cls(**kwargs)
        theta = np.zeros(tower.n_params)
        gains = []
        for pos, step in enumerate(tower._steps):
            if step.params:
                nxt = tower._steps[pos + 1].spec["type"] if pos + 1 < len(tower._steps) else None
                gains.append(2.0 if nxt == "relu" else 1.0)
        gains.append(1.0)  # head
        weights = [slot for slot in tower.param_slots() if len(slot[2]) > 1]
        for (lo, hi, dims), gain in zip(weights, gains):
            if std is None:
                fan_in = dims[0] if len(dims) == 2 else int(np.prod(dims[1:]))
                scale = math.sqrt(gain / fan_in)
            else:
                scale = std
            theta[lo:hi] = rng.normal(0.0, scale, size=hi - lo)
        tower.theta = theta
        return tower

    def copy(self) -> "Tower":
        return Tower(self.layers, self.input_shape, self.n_slots, self.latent_dim,
                     self.theta.copy())

    def param_slots(self) -> list[tuple[int, int, tuple[int, ...]]]:
        """(start, stop, shape) of every parameter array, encoder first, head last."""
        slots = [p for step in self._steps for p in step.params]
        return slots + list(self._head)

    def param_arrays(self) -> list[np.ndarray]:
        return [self.theta[lo:hi].reshape(dims) for lo, hi, dims in self.param_slots()]

    def describe(self) -> dict[str, Any]:
        return {
            "layers": self.layers,
            "input_shape": list(self.input_shape),
            "n_slots": self.n_slots,
            "latent_dim": self.latent_dim,
        }

    def _view(self, theta, slot):
        lo, hi, dims = slot
        return theta[lo:hi].reshape(dims)

    # -- forward -----------------------------------------------------------

    def _check_images(self, images):
        if images.shape[-3:] != self.input_shape:
            raise ValueError(
                f"image shape {images.shape[-3:]} does not match encoder input {self.input_shape}"
            )

    def _encode(self, images, theta, keep):
        """images (n, H, W, C) -> features (n, F), optionally with caches."""
        h = np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float64)
        caches = []
        for step in self._steps:
            kind = step.spec["type"]
            cache = None
            if kind == "conv":
                w = self._view(theta, step.params[0])
                b = self._view(theta, step.params[1])
                out, win = _conv_forward(h, w, b, step.spec["stride"])
                cache = (h.shape, win)
            elif kind == "relu":
                out = np.maximum(h, 0.0)
                cache = h > 0
            elif kind == "maxpool":
                out, arg = _pool_forward(h, step.spec["window"])
                cache = (h.shape, arg)
            elif kind == "flatten":
                cache = h.shape
                out = h.reshape(h.shape[0], -1)
            else:
                w = self._view(theta, step.params[0])
                b = self._view(theta, step.params[1])
                cache = h
                out = h @ w + b
            if keep:
                caches.append(cache)
            h = out
        return h, caches

    def features(self, images: np.ndarray) -> np.ndarray:
        """Encoder output for a batch of images ``(n, H, W, C)`` -> ``(n, feature_dim)``."""
        images = np.asarray(images)
        self._check_images(images)
        if len(images) == 0:
            return np.zeros((0, self.feature_dim))
        parts = [self._encode(images[s:s + _CHUNK], self.theta, False)[0]
                 for s in range(0, len(images), _CHUNK)]
        return np.concatenate(parts)

    def _head_apply(self, feats, theta):
        w = self._view(theta, self._head[0])
        b = self._view(theta, self._head[1])
        return feats @ w + b

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``x`` is ``(n, P, H, W, C)``; returns ``(n, latent_dim)``."""
        x = np.asarray(x)
        if x.ndim != 5 or x.shape[1] != self.n_slots:
            raise ValueError(
                f"expected input (n, {self.n_slots}, H, W, C), got {x.shape}"
            )
        self._check_images(x)
        n = len(x)
        feats = self.features(x.reshape((-1,) + self.input_shape))
        return self._head_apply(feats.reshape(n, self.n_slots * self.feature_dim), self.theta)

    # -- loss and gradient -------------------------------------------------

    def weight_norm2(self) -> float:
        return float(self.theta @ self.theta)

    def loss_and_grad(
        self,
        x: np.ndarray,
        targets: np.ndarray,
        lambda_target: float,
        lambda_weight: float,
        theta: np.ndarray | None = None,
    ) -> tuple[float, np.ndarray]:
        """Regularized squared error and its exact gradient w.r.t. ``theta``.

        loss = lambda_target/2 * sum ||t - f(x)||^2 + lambda_weight/2 * ||theta||^2
        """
        theta = self.theta if theta is None else theta
        x = np.asarray(x)
        targets = np.asarray(targets, dtype=np.float64)
        if len(x) != len(targets):
            raise ValueError(f"{len(x)} inputs but {len(targets)} targets")
        if x.ndim != 5 or x.shape[1] != self.n_slots:
            raise ValueError(f"expected input (n, {self.n_slots}, H, W, C), got {x.shape}")
        self._check_images(x)
        if targets.shape != (len(x), self.latent_dim):
            raise ValueError(f"targets must be (n, {self.latent_dim}), got {targets.shape}")
        n = len(x)
        grad = np.zeros_like(theta)
        loss = 0.5 * lambda_weight * float(theta @ theta)
        if n == 0:
            return loss, grad + lambda_weight * theta

        feats, caches = self._encode(x.reshape((-1,) + self.input_shape), theta, True)
        concat = feats.reshape(n, self.n_slots * self.feature_dim)
        out = self._head_apply(concat, theta)
        resid = out - targets
        loss += 0.5 * lambda_target * float(np.sum(resid * resid))

        dout = lambda_target * resid
        hw, hb = self._head
        grad[hw[0]:hw[1]] = (concat.T @ dout).ravel()
        grad[hb[0]:hb[1]] = dout.sum(axis=0)
        d = (dout @ self._view(theta, hw).T).reshape(n * self.n_slots, self.feature_dim)

        first_param = next((i for i, s in enumerate(self._steps) if s.params), len(self._steps))
        for idx in range(len(self._steps) - 1, -1, -1):
            if idx < first_param:
                break  # nothing upstream needs a gradient
            step = self._steps[idx]
            cache = caches[idx]
            kind = step.spec["type"]
            if kind == "dense":
                w = self._view(theta, step.params[0])
                (wlo, whi, _), (blo, bhi, _) = step.params
                grad[wlo:whi] = (cache.T @ d).ravel()
                grad[blo:bhi] = d.sum(axis=0)
                d = d @ w.T
            elif kind == "flatten":
                d = d.reshape(cache)
            elif kind == "maxpool":
                shape, arg = cache
                d = _pool_backward(d, shape, arg, step.spec["window"])
            elif kind == "relu":
                d = d * cache
            else:
                shape, win = cache
                w = self._view(theta, step.params[0])
                (wlo, whi, _), (blo, bhi, _) = step.params
                d, dw, db = _conv_backward(d, shape, win, w, step.spec["stride"],
                                           need_dx=idx > first_param)
                grad[wlo:whi] = dw.ravel()
                grad[blo:bhi] = db
        grad += lambda_weight * theta
        return loss, grad


class ImageRefs:
    """Lazy ``(n, P, H, W, C)`` input: row ``i`` stacks ``images[refs[i]]``."""

    def __init__(self, images: np.ndarray, refs: np.ndarray):
        self.images = images
        self.refs = np.asarray(refs, dtype=np.int64)
        if self.refs.ndim != 2:
            raise ValueError("refs must be (n, P)")

    def __len__(self):
        return len(self.refs)

    @property
    def shape(self):
        return (len(self.refs), self.refs.shape[1]) + tuple(self.images.shape[1:])

    def __getitem__(self, idx):
        return self.images[self.refs[idx]]


# -- functional surface ------------------------------------------------------


def encoder_forward(tower: Tower, img: np.ndarray) -> np.ndarray:
    """Feature vector (length ``feature_dim``) of one ``(H, W, C)`` image."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tower.input_shape:
        raise ValueError(f"image shape {img.shape} does not match {tower.input_shape}")
    return tower.features(img[None])[0]


def user_cnn_forward(tower: Tower, bundle_images: np.ndarray) -> np.ndarray:
    """Latent vector for one user from the ``(P, H, W, C)`` stack of bundle images."""
    bundle_images = np.asarray(bundle_images, dtype=np.float64)
    if bundle_images.ndim != 4 or len(bundle_images) != tower.n_slots:
        raise ValueError(
            f"bundle holds {len(bundle_images)} images, head expects {tower.n_slots}"
        )
    return tower.forward(bundle_images[None])[0]


def item_cnn_forward(tower: Tower, img: np.ndarray) -> np.ndarray:
    """Latent vector for one item image."""
    if tower.n_slots != 1:
        raise ValueError("item tower must have a single slot")
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tower.input_shape:
        raise ValueError(f"image shape {img.shape} does not match {tower.input_shape}")
    return tower.forward(img[None, None])[0]


def predict_batched(tower: Tower, inputs, batch_size: int = 256) -> np.ndarray:
    if len(inputs) == 0:
        return np.zeros((0, tower.latent_dim))
    parts = [tower.forward(inputs[np.arange(s, min(s + batch_size, len(inputs)))])
             for s in range(0, len(inputs), batch_size)]
    return np.concatenate(parts)


def regression_loss(tower: Tower, inputs, targets, lambda_target: float,
                    lambda_weight: float) -> float:
    """lambda_target/2 * sum ||t - f(x)||^2 + lambda_weight/2 * ||w||^2."""
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) != len(targets):
        raise ValueError(f"{len(inputs)} inputs but {len(targets)} targets")
    resid = predict_batched(tower, inputs) - targets
    return 0.5 * lambda_target * float(np.sum(resid * resid)) + 0.5 * lambda_weight * tower.weight_norm2()


def backward(tower: Tower, inputs, targets, lambda_target: float,
             lambda_weight: float) -> list[np.ndarray]:
    """Gradient of :func:`regression_loss`, one array per parameter tensor."""
    _, grad = tower.loss_and_grad(np.asarray(inputs[np.arange(len(inputs))]), targets,
                                  lambda_target, lambda_weight)
    return [grad[lo:hi].reshape(dims) for lo, hi, dims in tower.param_slots()]


@dataclass
class OptimizerState:
    """Minibatch SGD with momentum.  ``velocity`` persists across calls."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    epoch: int = 0
    velocity: np.ndarray | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train_epochs(
    tower: Tower,
    inputs,
    targets: np.ndarray,
    lambda_target: float,
    lambda_weight: float,
    opt: OptimizerState,
    epochs: int,
) -> list[float]:
    """Fit ``tower`` to ``targets`` by minibatch SGD with momentum.

    Steps follow the objective divided by ``n * lambda_target`` (same
    minimizer, step size independent of dataset size and target weight).
    Returns the full regression loss before training followed by its value
    after each epoch, so the trace has ``epochs + 1`` entries.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lambda_target <= 0:
        raise ValueError("lambda_target must be > 0 for training")
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    trace = [regression_loss(tower, inputs, targets, lambda_target, lambda_weight)]
    if n == 0:
        return trace * (epochs + 1)
    if opt.velocity is None or opt.velocity.shape != tower.theta.shape:
        opt.velocity = np.zeros_like(tower.theta)
    decay = lambda_weight / (n * lambda_target)
    for _ in range(epochs):
        rng = np.random.default_rng([opt.seed, opt.epoch])
        order = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = np.sort(order[start:start + opt.batch_size])
            _, g = tower.loss_and_grad(inputs[idx], targets[idx], 1.0 / len(idx), 0.0)
            g += decay * tower.theta
            opt.velocity *= opt.momentum
            opt.velocity -= opt.learning_rate * g
            tower.theta += opt.velocity
        opt.epoch += 1
        loss = regression_loss(tower, inputs, targets, lambda_target, lambda_weight)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"regression loss became {loss} at epoch {opt.epoch}; "
                f"learning rate {opt.learning_rate} is probably too high"
            )
        trace.append(loss)
    return trace


def grad_check(
    tower: Tower,
    inputs: np.ndarray,
    targets: np.ndarray,
    lambda_target: float,
    lambda_weight: float,
    n_samples: int = 100,
    h: float = 1e-4,
    seed: int = 0,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    max_kink_fraction: float = 0.25,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Up to ``n_samples`` coordinates are drawn from every parameter tensor.
    ``grad_fn(theta)`` overrides the analytic gradient (for negative controls).
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``
    with ``n`` the central difference at step ``h``.

    ReLU and max-pool make the loss only piecewise smooth.  A probe whose
    interval contains a kink measures a blend of two slopes, not the
    derivative, so each coordinate is also evaluated at ``h / 2``.  On a
    smooth piece the central difference is stable to O(h^2) and the second
    difference ``f(h) + f(-h) - 2 f(0)`` scales as h^2; a kink inside the
    interval breaks the first, a kink exactly at the point breaks the second.
    Such coordinates are skipped.  If more than ``max_kink_fraction`` of them
    are, the check raises rather than report a number it cannot back up.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    theta0 = tower.theta.copy()

    def loss_at(theta):
        return tower.loss_and_grad(inputs, targets, lambda_target, lambda_weight, theta)[0]

    if grad_fn is None:
        f0, analytic = tower.loss_and_grad(inputs, targets, lambda_target, lambda_weight)
    else:
        f0, analytic = loss_at(theta0), grad_fn(theta0)
    # rounding noise of a difference quotient at step h/2
    noise = 64 * np.finfo(float).eps * max(abs(f0), 1.0) / (h / 2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    probed = kinked = 0
    for lo, hi, _ in tower.param_slots():
        size = hi - lo
        picks = rng.choice(size, size=min(n_samples, size), replace=False) + lo
        for p in picks:
            probed += 1
            f = {}
            theta = theta0.copy()
            for step in (h, -h, h / 2, -h / 2):
                theta[p] = theta0[p] + step
                f[step] = loss_at(theta)
            central = (f[h] - f[-h]) / (2 * h)
            central_half = (f[h / 2] - f[-h / 2]) / h
            curv = (f[h] + f[-h] - 2 * f0) / h
            curv_half = (f[h / 2] + f[-h / 2] - 2 * f0) / (h / 2)
            if (abs(central - central_half) > 1e-6 * abs(central) + noise
                    or abs(2 * curv_half - curv) > 1e-3 * abs(curv) + 4 * noise):
                kinked += 1
                continue
            denom = max(abs(analytic[p]), abs(central), 1e-8)
            worst = max(worst, abs(analytic[p] - central) / denom)
    if kinked:
        _logger.debug("grad_check skipped %d of %d coordinates at kinks", kinked, probed)
    if kinked > max_kink_fraction * probed:
        raise ValueError(
            f"{kinked} of {probed} probed coordinates sit at non-differentiable points; "
            "use a smaller step or different inputs"
        )
    return worst
