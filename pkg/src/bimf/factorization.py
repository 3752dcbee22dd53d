"""Coordinate-descent MAP fitting of PMF with image-tower prior means.

Users and items carry k-dimensional factors (rows of ``U`` and ``V``).
Each factor has a Gaussian prior centred on an image tower's output: the
user tower reads a bundle of images of items the user rated, the item tower
reads the item's own image.  Dropping a tower replaces its prior mean by
zero, which gives:

* ``PMF``        - no towers,
* ``ISFMF_ITEM`` - item tower only,
* ``BI_ISFMF``   - both towers.

The objective minimized is::

    sum_ij I_ij/2 (r_ij - u_i.v_j)^2
      + lam_u/2 sum_i ||u_i - f_user(S_i)||^2 + lam_v/2 sum_j ||v_j - f_item(S_j)||^2
      + lam_wu/2 ||W_user||^2 + lam_wi/2 ||W_item||^2

U and V blocks are solved exactly (one k x k SPD system per row); the
towers are fitted to the current factors by backpropagation.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import ImageStore, RatingsDataset, SparseRatings, build_user_bundles
from .network import (
    DEFAULT_LAYERS,
    DivergenceError,
    ImageRefs,
    OptimizerState,
    Tower,
    predict_batched,
    train_epochs,
)

_logger = logging.getLogger(__name__)


class ModelKind(str, enum.Enum):
    PMF = "PMF"
    ISFMF_ITEM = "ISFMF_ITEM"
    BI_ISFMF = "BI_ISFMF"

    @property
    def user_tower(self) -> bool:
        return self is ModelKind.BI_ISFMF

    @property
    def item_tower(self) -> bool:
        return self is not ModelKind.PMF

    @property
    def code(self) -> int:
        return list(ModelKind).index(self)


@dataclass(frozen=True)
class Hyperparams:
    k: int = 50
    lambda_u: float = 1.0
    lambda_v: float = 1.0
    lambda_w_user: float = 1.0
    lambda_w_item: float = 1.0
    outer_max_iters: int = 50
    rel_tol: float = 1e-4
    cnn_epochs_per_iter: int = 5
    seed: int = 0
    factor_init_std: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("lambda_u", "lambda_v", "lambda_w_user", "lambda_w_item"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be a positive finite number, got {val!r}")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.outer_max_iters < 1:
            raise ValueError("outer_max_iters must be >= 1")
        if self.cnn_epochs_per_iter < 0:
            raise ValueError("cnn_epochs_per_iter must be >= 0")

    @classmethod
    def from_variances(cls, sigma2: float, sigma_u2: float, sigma_v2: float,
                       sigma_w_user2: float, sigma_w_item2: float, **kwargs) -> "Hyperparams":
        """Regularization weights as ratios of the rating noise to each prior variance."""
        return cls(lambda_u=sigma2 / sigma_u2, lambda_v=sigma2 / sigma_v2,
                   lambda_w_user=sigma2 / sigma_w_user2,
                   lambda_w_item=sigma2 / sigma_w_item2, **kwargs)

    def scaled(self, c: float) -> "Hyperparams":
        return replace(self, lambda_u=c * self.lambda_u, lambda_v=c * self.lambda_v,
                       lambda_w_user=c * self.lambda_w_user,
                       lambda_w_item=c * self.lambda_w_item)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NetworkConfig:
    """Tower architecture, input size, bundle length P and optimizer settings."""

    layers: tuple = DEFAULT_LAYERS
    image_size: tuple[int, int] = (60, 60)
    channels: int = 3
    bundle_size: int = 3
    init_std: float | None = 0.05  # None: fan-in scaled weights
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(x) for x in self.layers))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        if self.bundle_size < 1:
            raise ValueError("bundle_size must be >= 1")
        if self.init_std is not None and self.init_std < 0:
            raise ValueError("init_std must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # shape inference rejects layer lists that do not fit the input
        Tower(self.layers, self.input_shape, self.bundle_size, 1)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.image_size[0], self.image_size[1], self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [dict(x) for x in self.layers]
        d["image_size"] = list(self.image_size)
        return d


# -- objective ---------------------------------------------------------------


def _fit_term(U, V, train: SparseRatings) -> float:
    csr = train.by_user
    users = np.repeat(np.arange(train.num_users), csr.counts())
    pred = np.einsum("ij,ij->i", U[users], V[csr.indices])
    resid = csr.values - pred
    return 0.5 * float(resid @ resid)


def _check_dims(U, V, train):
    if U.shape[0] != train.num_users or V.shape[0] != train.num_items:
        raise ValueError(
            f"factor rows ({U.shape[0]}, {V.shape[0]}) do not match "
            f"dataset ({train.num_users}, {train.num_items})"
        )
    if U.shape[1] != V.shape[1]:
        raise ValueError("U and V have different latent dimensions")


def pmf_loss(U: np.ndarray, V: np.ndarray, train: SparseRatings,
             lambda_u: float, lambda_v: float) -> float:
    _check_dims(U, V, train)
    return (_fit_term(U, V, train) + 0.5 * lambda_u * float(np.sum(U * U))
            + 0.5 * lambda_v * float(np.sum(V * V)))


def joint_loss(U, V, train: SparseRatings, hyper: Hyperparams,
               user_prior: np.ndarray | None = None, item_prior: np.ndarray | None = None,
               user_tower: Tower | None = None, item_tower: Tower | None = None) -> float:
    """Negative log posterior up to constants; missing priors are zero."""
    _check_dims(U, V, train)
    du = U if user_prior is None else U - user_prior
    dv = V if item_prior is None else V - item_prior
    loss = (_fit_term(U, V, train) + 0.5 * hyper.lambda_u * float(np.sum(du * du))
            + 0.5 * hyper.lambda_v * float(np.sum(dv * dv)))
    if user_tower is not None:
        loss += 0.5 * hyper.lambda_w_user * user_tower.weight_norm2()
    if item_tower is not None:
        loss += 0.5 * hyper.lambda_w_item * item_tower.weight_norm2()
    if not math.isfinite(loss):
        raise DivergenceError(f"joint loss is {loss}")
    return loss


def _solve_rows(other: np.ndarray, csr, prior: np.ndarray, lam: float) -> np.ndarray:
    n = len(csr.indptr) - 1
    k = other.shape[1]
    out = np.empty((n, k))
    eye = lam * np.eye(k)
    for r in range(n):
        idx, vals = csr.row(r)
        if not len(idx):
            out[r] = prior[r]
            continue
        O = other[idx]
        A = O.T @ O + eye
        b = O.T @ vals + lam * prior[r]
        out[r] = cho_solve(cho_factor(A, lower=True, check_finite=True), b)
    return out


def update_user_factors(V: np.ndarray, train: SparseRatings, prior: np.ndarray | None,
                        lambda_u: float) -> np.ndarray:
    """Exact minimizer over every u_i with V and the prior means fixed.

    u_i = (V_i^T V_i + lam I)^-1 (V_i^T r_i + lam c_i), V_i the rows of items
    rated by i.  A user without ratings gets its prior mean.
    """
    if prior is None:
        prior = np.zeros((train.num_users, V.shape[1]))
    return _solve_rows(V, train.by_user, prior, lambda_u)


def update_item_factors(U: np.ndarray, train: SparseRatings, prior: np.ndarray | None,
                        lambda_v: float) -> np.ndarray:
    if prior is None:
        prior = np.zeros((train.num_items, U.shape[1]))
    return _solve_rows(U, train.by_item, prior, lambda_v)


# -- model state -------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: ModelKind
    hyper: Hyperparams
    net: NetworkConfig
    U: np.ndarray
    V: np.ndarray
    user_tower: Tower | None
    item_tower: Tower | None
    scale: tuple[float, float]
    train_mean: float
    cold_users: frozenset = frozenset()
    cold_items: frozenset = frozenset()

    @property
    def num_users(self) -> int:
        return self.U.shape[0]

    @property
    def num_items(self) -> int:
        return self.V.shape[0]

    def copy(self) -> "Checkpoint":
        return replace(
            self, U=self.U.copy(), V=self.V.copy(),
            user_tower=None if self.user_tower is None else self.user_tower.copy(),
            item_tower=None if self.item_tower is None else self.item_tower.copy(),
        )


@dataclass
class TrainReport:
    joint_loss: list[float] = field(default_factory=list)
    blocks: list[dict[str, float]] = field(default_factory=list)
    user_cnn_traces: list[list[float]] = field(default_factory=list)
    item_cnn_traces: list[list[float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class ColdStartError(LookupError):
    """A prediction needs an image the caller did not supply."""


def train(
    kind: ModelKind | str,
    data: RatingsDataset,
    images: ImageStore | None = None,
    hyper: Hyperparams = Hyperparams(),
    net: NetworkConfig = NetworkConfig(),
    callback=None,
) -> tuple[Checkpoint, TrainReport]:
    """Alternate U, V, user-tower and item-tower updates until convergence.

    Stops once the relative change of the joint loss over one outer
    iteration falls below ``hyper.rel_tol`` or after ``outer_max_iters``.
    ``callback(iteration, checkpoint, report)`` runs after every iteration.
    Raises :class:`DivergenceError` with ``last_good`` set to the latest
    finite checkpoint if the loss blows up.
    """
    kind = ModelKind(kind)
    if not len(data):
        raise ValueError("cannot train on an empty dataset")
    if kind.item_tower and images is None:
        raise ValueError(f"{kind.value} needs item images")
    started = time.perf_counter()
    seeds = np.random.SeedSequence(hyper.seed).spawn(5)
    factor_rng, user_rng, item_rng, bundle_seed, opt_seed = seeds
    sparse = data.sparse()
    k = hyper.k
    frng = np.random.default_rng(factor_rng)
    U = frng.normal(0.0, hyper.factor_init_std, size=(data.num_users, k))
    V = frng.normal(0.0, hyper.factor_init_std, size=(data.num_items, k))

    item_pixels = images.aligned(data) if kind.item_tower else None
    if item_pixels is not None and item_pixels.shape[1:] != net.input_shape:
        raise ValueError(f"images are {item_pixels.shape[1:]}, network expects {net.input_shape}")

    user_tower = item_tower = None
    user_inputs = item_inputs = None
    bundle_users = np.zeros(0, dtype=np.int64)
    if kind.user_tower:
        bundles = build_user_bundles(data, images, net.bundle_size,
                                     seed=int(bundle_seed.generate_state(1)[0]))
        bundle_users = np.array([b.user_index for b in bundles], dtype=np.int64)
        refs = np.array([b.image_refs for b in bundles], dtype=np.int64).reshape(-1, net.bundle_size)
        user_inputs = ImageRefs(item_pixels, refs)
        user_tower = Tower.initialized(np.random.default_rng(user_rng), net.init_std,
                                       layers=net.layers, input_shape=net.input_shape,
                                       n_slots=net.bundle_size, latent_dim=k)
    if kind.item_tower:
        item_inputs = ImageRefs(item_pixels, np.arange(data.num_items)[:, None])
        item_tower = Tower.initialized(np.random.default_rng(item_rng), net.init_std,
                                       layers=net.layers, input_shape=net.input_shape,
                                       n_slots=1, latent_dim=k)
    opt_seeds = opt_seed.generate_state(2)
    user_opt = OptimizerState(net.learning_rate, net.momentum, net.batch_size, int(opt_seeds[0]))
    item_opt = OptimizerState(net.learning_rate, net.momentum, net.batch_size, int(opt_seeds[1]))

    def priors():
        up = ip = None
        if user_tower is not None:
            up = np.zeros((data.num_users, k))
            up[bundle_users] = predict_batched(user_tower, user_inputs)
        if item_tower is not None:
            ip = predict_batched(item_tower, item_inputs)
        return up, ip

    def loss(up, ip):
        return joint_loss(U, V, sparse, hyper, up, ip, user_tower, item_tower)

    counts_u = sparse.by_user.counts()
    counts_i = sparse.by_item.counts()

    def snapshot():
        return Checkpoint(
            kind, hyper, net, U.copy(), V.copy(),
            None if user_tower is None else user_tower.copy(),
            None if item_tower is None else item_tower.copy(),
            data.scale, data.mean_rating(),
            frozenset(np.flatnonzero(counts_u == 0).tolist()),
            frozenset(np.flatnonzero(counts_i == 0).tolist()),
        )

    report = TrainReport()
    up, ip = priors()
    prev = loss(up, ip)
    report.initial_loss = prev
    last_good = snapshot()
    try:
        for it in range(1, hyper.outer_max_iters + 1):
            block = {"start": prev}
            U = update_user_factors(V, sparse, up, hyper.lambda_u)
            block["after_u"] = loss(up, ip)
            V = update_item_factors(U, sparse, ip, hyper.lambda_v)
            block["after_v"] = loss(up, ip)
            if hyper.cnn_epochs_per_iter > 0:
                if user_tower is not None and len(bundle_users):
                    report.user_cnn_traces.append(train_epochs(
                        user_tower, user_inputs, U[bundle_users], hyper.lambda_u,
                        hyper.lambda_w_user, user_opt, hyper.cnn_epochs_per_iter))
                if item_tower is not None:
                    report.item_cnn_traces.append(train_epochs(
                        item_tower, item_inputs, V, hyper.lambda_v,
                        hyper.lambda_w_item, item_opt, hyper.cnn_epochs_per_iter))
                up, ip = priors()
            cur = loss(up, ip)
            block["end"] = cur
            report.blocks.append(block)
            report.joint_loss.append(cur)
            report.iterations = it
            last_good = snapshot()
            _logger.debug("iteration %d: joint loss %.6g", it, cur)
            if callback is not None:
                callback(it, last_good, report)
            if abs(prev - cur) < hyper.rel_tol * abs(prev):
                report.converged = True
                break
            prev = cur
    except DivergenceError as exc:
        exc.last_good = last_good
        exc.report = report
        raise
    report.wall_time = time.perf_counter() - started
    return last_good, report


# -- prediction --------------------------------------------------------------


def _user_vector(ckpt: Checkpoint, i, user_images):
    if i is not None and 0 <= i < ckpt.num_users and i not in ckpt.cold_users:
        return ckpt.U[i]
    if user_images is None or ckpt.user_tower is None:
        raise ColdStartError(f"user {i} has no training ratings and no image bundle was given")
    x = np.asarray(user_images, dtype=np.float64)
    return ckpt.user_tower.forward(x[None])[0]


def _item_vector(ckpt: Checkpoint, j, item_image):
    if j is not None and 0 <= j < ckpt.num_items and j not in ckpt.cold_items:
        return ckpt.V[j]
    if item_image is None or ckpt.item_tower is None:
        raise ColdStartError(f"item {j} has no training ratings and no image was given")
    x = np.asarray(item_image, dtype=np.float64)
    return ckpt.item_tower.forward(x[None, None])[0]


def predict(ckpt: Checkpoint, i: int | None, j: int | None, *,
            item_image: np.ndarray | None = None,
            user_images: np.ndarray | None = None, clamp: bool = False) -> float:
    """Rating estimate u_i . v_j.

    A cold user (no training ratings, or ``i`` outside the model) is
    represented by the user tower applied to ``user_images`` (P images); a
    cold item by the item tower applied to ``item_image``.
    """
    u = _user_vector(ckpt, i, user_images)
    v = _item_vector(ckpt, j, item_image)
    r = float(u @ v)
    if clamp:
        r = min(max(r, ckpt.scale[0]), ckpt.scale[1])
    return r
