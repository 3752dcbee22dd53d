"""Planted low-rank ratings whose item factors are drawn into the item images.

Each item image holds a grid of flat-colored shapes (squares and discs at
fixed positions).  Latent coordinate ``d`` sets the intensity of channel
``d % C`` of shape ``d // C`` as ``(v_d + 1) / 2`` rounded to 1/255, so
:func:`decode_image` inverts :func:`render_image` to within one quantization
step.  Factor entries are drawn uniformly from ``[-1, 1]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, ImageStore, RatingsDataset

LEVELS = 255


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 200
    n_items: int = 150
    k_true: int = 3
    observed_fraction: float = 0.1
    noise_sigma: float = 0.1
    rating_scale: tuple[float, float] = (1.0, 5.0)
    image_size: tuple[int, int] = (60, 60)
    channels: int = 3
    # >0 makes users more likely to rate items they score highly
    selection_bias: float = 0.0
    clamp: bool = True
    min_ratings: int = 2
    max_retries: int = 20
    # None: centre of the scale / quarter of its width per unit score std
    offset: float | None = None
    scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "rating_scale", tuple(float(x) for x in self.rating_scale))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        if self.n_users < 2:
            raise ValueError("n_users must be >= 2")
        if self.n_items < self.min_ratings:
            raise ValueError("n_items must be >= min_ratings")
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        if not 0 < self.observed_fraction <= 1:
            raise ValueError("observed_fraction must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        lo, hi = self.rating_scale
        if not lo < hi:
            raise ValueError("invalid rating scale")
        g = _grid(self.k_true, self.channels)
        h, w = self.image_size
        if h // g < 3 or w // g < 3:
            raise ValueError(f"image size {self.image_size} too small for {g}x{g} shapes")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rating_scale"] = list(self.rating_scale)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class GroundTruth:
    user_factors: np.ndarray
    item_factors: np.ndarray
    offset: float
    scale: float
    observed: np.ndarray = field(repr=False)

    def affine_scores(self) -> np.ndarray:
        """Unclamped, noiseless rating matrix ``offset + scale * U V^T``."""
        return self.offset + self.scale * (self.user_factors @ self.item_factors.T)

    def to_json(self) -> str:
        return json.dumps({
            "user_factors": self.user_factors.tolist(),
            "item_factors": self.item_factors.tolist(),
            "offset": self.offset,
            "scale": self.scale,
            "observed": np.argwhere(self.observed).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        u = np.array(d["user_factors"], dtype=np.float64)
        v = np.array(d["item_factors"], dtype=np.float64)
        observed = np.zeros((len(u), len(v)), bool)
        pairs = np.array(d.get("observed", []), dtype=np.int64).reshape(-1, 2)
        observed[pairs[:, 0], pairs[:, 1]] = True
        return cls(u, v, d["offset"], d["scale"], observed)


def _grid(k_true, channels):
    return math.ceil(math.sqrt(math.ceil(k_true / channels)))


def _layout(k_true, channels, size):
    """Pixel masks of the shapes, one per group of ``channels`` coordinates."""
    n_shapes = math.ceil(k_true / channels)
    g = _grid(k_true, channels)
    h, w = size
    ch, cw = h // g, w // g
    yy, xx = np.mgrid[0:h, 0:w]
    masks = []
    for s in range(n_shapes):
        r, c = divmod(s, g)
        cy, cx = r * ch + (ch - 1) / 2, c * cw + (cw - 1) / 2
        ry, rx = max(1.0, 0.35 * ch), max(1.0, 0.35 * cw)
        if s % 2 == 0:
            m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        masks.append((m, (int(round(cy)), int(round(cx)))))
    return masks


def quantize(v: np.ndarray) -> np.ndarray:
    """Factor values in [-1, 1] -> intensity levels in {0, 1/255, ..., 1}."""
    return np.rint((np.clip(v, -1, 1) + 1) / 2 * LEVELS) / LEVELS


def render_image(v: np.ndarray, size=(60, 60), channels: int = 3) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    img = np.zeros((size[0], size[1], channels))
    levels = quantize(v)
    for s, (mask, _) in enumerate(_layout(len(v), channels, size)):
        for c in range(channels):
            d = s * channels + c
            if d < len(v):
                img[mask, c] = levels[d]
    return img


def decode_image(img: np.ndarray, k_true: int) -> np.ndarray:
    """Read the factor vector back from the shape centres."""
    img = np.asarray(img)
    channels = img.shape[-1]
    out = np.zeros(k_true)
    for s, (_, (cy, cx)) in enumerate(_layout(k_true, channels, img.shape[:2])):
        for c in range(channels):
            d = s * channels + c
            if d < k_true:
                out[d] = img[cy, cx, c] * 2 - 1
    return out


def generate_synthetic(cfg: SyntheticConfig, seed: int = 0):
    """Returns ``(ratings, images, ground_truth)``."""
    rng = np.random.default_rng(seed)
    k = cfg.k_true
    U = rng.uniform(-1, 1, size=(cfg.n_users, k))
    V = rng.uniform(-1, 1, size=(cfg.n_items, k))
    score_std = math.sqrt(k / 9.0)
    lo, hi = cfg.rating_scale
    offset = (lo + hi) / 2 if cfg.offset is None else float(cfg.offset)
    scale = (hi - lo) / 4 / score_std if cfg.scale is None else float(cfg.scale)
    scores = U @ V.T
    # selection bias shifts which items a user rates, not how many
    weight = np.exp(cfg.selection_bias * scores / score_std)
    prob = np.minimum(1.0, cfg.observed_fraction * weight / weight.mean(axis=1, keepdims=True))

    for _ in range(cfg.max_retries + 1):
        observed = rng.random(prob.shape) < prob
        if observed.sum(axis=1).min() >= cfg.min_ratings:
            break
    else:
        raise DataError(
            f"could not give every user {cfg.min_ratings} ratings in "
            f"{cfg.max_retries + 1} draws; raise observed_fraction"
        )
    users, items = np.nonzero(observed)
    ratings = offset + scale * scores[users, items]
    if cfg.noise_sigma > 0:
        ratings = ratings + rng.normal(0.0, cfg.noise_sigma, size=len(ratings))
    if cfg.clamp:
        ratings = np.clip(ratings, lo, hi)
    else:
        lo, hi = min(lo, float(ratings.min())), max(hi, float(ratings.max()))

    user_ids = tuple(f"u{i:05d}" for i in range(cfg.n_users))
    item_ids = tuple(f"i{j:05d}" for j in range(cfg.n_items))
    ds = RatingsDataset(user_ids, item_ids, users, items, ratings, (lo, hi))
    pixels = np.stack([render_image(v, cfg.image_size, cfg.channels) for v in V])
    images = ImageStore(item_ids, pixels)
    return ds, images, GroundTruth(U, V, offset, scale, observed)


def write_synthetic(out_dir, ds: RatingsDataset, images: ImageStore, truth: GroundTruth,
                    cfg: SyntheticConfig) -> None:
    """ratings.csv, images/<item_id>.png, ground_truth.json, dataset.bin, config.json."""
    from .data import save_packed, write_png, write_ratings

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_ratings(ds, out / "ratings.csv")
    for iid in images.item_ids:
        write_png(images.get(iid), out / "images" / f"{iid}.png")
    (out / "ground_truth.json").write_text(truth.to_json() + "\n")
    save_packed(out / "dataset.bin", ds, images)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
