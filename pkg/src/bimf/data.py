"""Rating datasets, item images and per-user image bundles.

Ratings are kept as parallel index/value arrays over a compact 0-based
index space; the original string ids are carried alongside so that files
can be written back out.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
import warnings
from collections.abc import Collection
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

_logger = logging.getLogger(__name__)

DEFAULT_SCALE = (1.0, 5.0)


class DataError(ValueError):
    """Malformed, inconsistent or empty input data."""


@dataclass(frozen=True)
class RatingsDataset:
    """Sparse user-item ratings.

    ``users[t], items[t], ratings[t]`` is the t-th triplet; ``user_ids`` and
    ``item_ids`` map compact indices back to the ids found in the source.
    """

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    scale: tuple[float, float] = DEFAULT_SCALE

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise DataError("users, items and ratings must be 1-d arrays of equal length")
        for arr in (users, items, ratings):
            arr.setflags(write=False)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "scale", (float(self.scale[0]), float(self.scale[1])))
        lo, hi = self.scale
        if not lo < hi:
            raise DataError(f"invalid rating scale {self.scale}")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise DataError("item index out of range")
            if ratings.min() < lo or ratings.max() > hi or not np.all(np.isfinite(ratings)):
                raise DataError(f"rating outside scale {self.scale}")
            keys = users * max(self.num_items, 1) + items
            if len(np.unique(keys)) != len(keys):
                raise DataError("duplicate (user, item) pair")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.ratings)

    @property
    def density(self) -> float:
        cells = self.num_users * self.num_items
        return len(self) / cells if cells else 0.0

    def triplets(self) -> list[tuple[int, int, float]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()))

    def subset(self, mask_or_index) -> "RatingsDataset":
        """Same index space, a subset of the triplets."""
        sel = np.asarray(mask_or_index)
        return RatingsDataset(self.user_ids, self.item_ids, self.users[sel],
                              self.items[sel], self.ratings[sel], self.scale)

    def sparse(self) -> "SparseRatings":
        return SparseRatings.from_dataset(self)

    def mean_rating(self) -> float:
        if not len(self):
            raise DataError("no ratings")
        return float(self.ratings.mean())

    def stats(self) -> dict:
        return {
            "users": self.num_users,
            "items": self.num_items,
            "ratings": len(self),
            "density": self.density,
        }


def format_stats(ds: RatingsDataset, name: str = "dataset") -> str:
    """One aligned table row in the users/items/ratings/density layout."""
    header = f"{'Dataset':<12}{'Users':>8}{'Items':>8}{'Ratings':>10}{'Density':>10}"
    row = (f"{name:<12}{ds.num_users:>8}{ds.num_items:>8}{len(ds):>10}"
           f"{ds.density * 100:>9.4f}%")
    return header + "\n" + row


@dataclass(frozen=True)
class CSR:
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[r], self.indptr[r + 1]
        return self.indices[lo:hi], self.values[lo:hi]

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    @classmethod
    def build(cls, rows, cols, vals, n_rows) -> "CSR":
        order = np.lexsort((cols, rows))
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
        return cls(indptr, cols[order], vals[order])


@dataclass(frozen=True)
class SparseRatings:
    """Row (per-user) and column (per-item) compressed views of one dataset."""

    by_user: CSR
    by_item: CSR
    num_users: int
    num_items: int

    @classmethod
    def from_dataset(cls, ds: RatingsDataset) -> "SparseRatings":
        return cls(
            CSR.build(ds.users, ds.items, ds.ratings, ds.num_users),
            CSR.build(ds.items, ds.users, ds.ratings, ds.num_items),
            ds.num_users,
            ds.num_items,
        )

    def user(self, i: int):
        """Item indices and ratings of user ``i`` (the diagonal of I_i and R_i)."""
        return self.by_user.row(i)

    def item(self, j: int):
        return self.by_item.row(j)

    @property
    def nnz(self) -> int:
        return len(self.by_user.values)


@dataclass(frozen=True)
class ImageStore:
    """Item images keyed by item id; ``pixels[r]`` belongs to ``item_ids[r]``."""

    item_ids: tuple[str, ...]
    pixels: np.ndarray
    _pos: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 4 or len(pixels) != len(self.item_ids):
            raise DataError("pixels must be (n_items, H, W, C) aligned with item_ids")
        if len(pixels) and (pixels.min() < 0 or pixels.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "_pos", {iid: r for r, iid in enumerate(self.item_ids)})

    def __contains__(self, item_id) -> bool:
        return item_id in self._pos

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def get(self, item_id: str) -> np.ndarray:
        return self.pixels[self._pos[item_id]]

    def aligned(self, ds: RatingsDataset) -> np.ndarray:
        """``(M, H, W, C)`` array indexed like ``ds``'s items."""
        missing = [iid for iid in ds.item_ids if iid not in self._pos]
        if missing:
            raise DataError(f"no image for items {missing[:5]}")
        return self.pixels[[self._pos[iid] for iid in ds.item_ids]]


@dataclass(frozen=True)
class UserImageBundle:
    """``P`` item references for one user; ``padding_mask`` is True on real slots."""

    user_index: int
    image_refs: tuple[int, ...]
    padding_mask: tuple[bool, ...]

    def __len__(self):
        return len(self.image_refs)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or self.train_fraction <= 0:
            raise ValueError(f"split fractions must be non-negative, train positive: {fr}")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)!r}")


# -- loading -----------------------------------------------------------------


def load_ratings(path, scale: tuple[float, float] = DEFAULT_SCALE) -> RatingsDataset:
    """Read a headered ``user_id,item_id,rating`` CSV.

    Indices are assigned in order of first appearance.
    """
    path = Path(path)
    user_pos: dict[str, int] = {}
    item_pos: dict[str, int] = {}
    users, items, ratings = [], [], []
    seen = set()
    lo, hi = scale
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            uid, iid, raw = (c.strip() for c in row)
            try:
                r = float(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: rating {raw!r} is not a number") from None
            if not (lo <= r <= hi):
                raise DataError(f"{path}:{lineno}: rating {r} outside scale {scale}")
            if not uid or not iid:
                raise DataError(f"{path}:{lineno}: empty id")
            if (uid, iid) in seen:
                raise DataError(f"{path}:{lineno}: duplicate pair ({uid}, {iid})")
            seen.add((uid, iid))
            users.append(user_pos.setdefault(uid, len(user_pos)))
            items.append(item_pos.setdefault(iid, len(item_pos)))
            ratings.append(r)
    if not ratings:
        raise DataError(f"{path}: no ratings")
    return RatingsDataset(tuple(user_pos), tuple(item_pos), np.array(users),
                          np.array(items), np.array(ratings), scale)


def write_ratings(ds: RatingsDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "rating"])
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            w.writerow([ds.user_ids[u], ds.item_ids[i], repr(float(r))])


def available_image_ids(directory) -> set[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory {directory} does not exist")
    return {p.stem for p in directory.glob("*.png")}


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of an ``(H, W, C)`` array.

    Output pixel ``(0, 0)`` and ``(H'-1, W'-1)`` sample the source corners
    exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return img.copy()

    def axis(n_src, n_dst):
        if n_dst == 1 or n_src == 1:
            pos = np.zeros(n_dst)
        else:
            pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def decode_png(path, size: tuple[int, int], channels: int = 3) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.clip(resize_bilinear(arr, size), 0.0, 1.0)


def load_images(directory, ds: RatingsDataset, size: tuple[int, int] = (60, 60),
                channels: int = 3) -> ImageStore:
    """Decode ``<dir>/<item_id>.png`` for every item of ``ds``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"image directory {directory} does not exist")
    pixels = np.empty((ds.num_items, size[0], size[1], channels))
    for j, iid in enumerate(ds.item_ids):
        path = directory / f"{iid}.png"
        if not path.exists():
            raise DataError(f"missing image for item {iid!r} ({path})")
        pixels[j] = decode_png(path, size, channels)
    return ImageStore(ds.item_ids, pixels)


def write_png(img: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


# -- filtering and splitting -------------------------------------------------


def _compact(ds: RatingsDataset, keep: np.ndarray) -> RatingsDataset:
    users, items, ratings = ds.users[keep], ds.items[keep], ds.ratings[keep]
    u_keep = np.unique(users)
    i_keep = np.unique(items)
    u_map = np.full(ds.num_users, -1)
    u_map[u_keep] = np.arange(len(u_keep))
    i_map = np.full(ds.num_items, -1)
    i_map[i_keep] = np.arange(len(i_keep))
    return RatingsDataset(
        tuple(ds.user_ids[u] for u in u_keep),
        tuple(ds.item_ids[i] for i in i_keep),
        u_map[users], i_map[items], ratings, ds.scale,
    )


def filter_dataset(ds: RatingsDataset, images: Collection[str],
                   min_ratings: int = 2) -> RatingsDataset:
    """Drop imageless items, then users below ``min_ratings``; repeat to a fixed point.

    ``images`` is anything supporting ``item_id in images`` (an
    :class:`ImageStore` or a set of ids).  Users or items left without any
    rating are dropped and the indices re-compacted.
    """
    if min_ratings < 1:
        raise ValueError("min_ratings must be >= 1")
    has_image = np.array([iid in images for iid in ds.item_ids], dtype=bool)
    keep = np.ones(len(ds), dtype=bool)
    while True:
        before = keep.sum()
        keep &= has_image[ds.items]
        counts = np.bincount(ds.users[keep], minlength=ds.num_users)
        keep &= counts[ds.users] >= min_ratings
        if keep.sum() == before:
            break
    if not keep.any():
        raise DataError("filtering removed every rating")
    if keep.all() and len(np.unique(ds.users)) == ds.num_users \
            and len(np.unique(ds.items)) == ds.num_items:
        return ds
    return _compact(ds, keep)


def _split_sizes(n, fractions):
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        sizes[-2] += sizes[-1]
        sizes[-1] = 0
    return sizes


def split_dataset(ds: RatingsDataset, spec: SplitSpec):
    """Seeded random partition of the triplets into train, validation, test."""
    if not len(ds):
        raise DataError("cannot split an empty dataset")
    fractions = (spec.train_fraction, spec.validation_fraction, spec.test_fraction)
    sizes = _split_sizes(len(ds), fractions)
    order = np.random.default_rng(spec.seed).permutation(len(ds))
    parts = []
    start = 0
    for name, frac, size in zip(("train", "validation", "test"), fractions, sizes):
        if frac > 0 and size == 0:
            warnings.warn(f"{name} split received no ratings (fraction {frac})", stacklevel=2)
        parts.append(ds.subset(np.sort(order[start:start + size])))
        start += size
    return tuple(parts)


def split_cold_items(ds: RatingsDataset, fraction: float, seed: int):
    """Move every rating of a random ``fraction`` of items into a held-out set.

    Returns ``(remaining, held_out, cold_item_indices)``; both datasets keep
    the full index space.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    n_cold = int(round(fraction * ds.num_items))
    cold = np.sort(rng.choice(ds.num_items, size=n_cold, replace=False))
    mask = np.isin(ds.items, cold)
    return ds.subset(~mask), ds.subset(mask), cold


def build_user_bundles(train: RatingsDataset, images: Collection[str], P: int,
                       seed: int = 0) -> list[UserImageBundle]:
    """One bundle of ``P`` item refs per user that has training ratings.

    Items are drawn without replacement from the user's imaged training
    items; short bundles are filled by cycling through the drawn items and
    the filler slots are marked False in ``padding_mask``.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    has_image = np.array([iid in images for iid in train.item_ids], dtype=bool)
    sparse = train.sparse()
    rng = np.random.default_rng(seed)
    bundles = []
    for i in range(train.num_users):
        rated, _ = sparse.user(i)
        if not len(rated):
            continue
        pool = rated[has_image[rated]]
        if not len(pool):
            raise DataError(f"user {train.user_ids[i]!r} has no imaged training items")
        take = rng.choice(pool, size=min(P, len(pool)), replace=False)
        real = len(take)
        refs = [int(take[s % real]) for s in range(P)]
        mask = tuple(s < real for s in range(P))
        bundles.append(UserImageBundle(i, tuple(refs), mask))
    return bundles


# -- packed binary format ----------------------------------------------------

_DS_MAGIC = b"BIDS"
_DS_VERSION = 1


def save_packed(path, ds: RatingsDataset, images: ImageStore | None = None) -> None:
    """Binary dataset file plus an ``.index.json`` sidecar with the id maps.

    Layout (little endian): magic, u32 version, u64 N, M, nnz, f64 scale lo,
    hi, i64 users[nnz], i64 items[nnz], f64 ratings[nnz], u32 has_images,
    then if present u32 H, W, C and f64 pixels[M*H*W*C] aligned with items.
    """
    import json

    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_DS_MAGIC)
        fh.write(struct.pack("<IQQQdd", _DS_VERSION, ds.num_users, ds.num_items,
                             len(ds), *ds.scale))
        fh.write(ds.users.astype("<i8").tobytes())
        fh.write(ds.items.astype("<i8").tobytes())
        fh.write(ds.ratings.astype("<f8").tobytes())
        if images is None:
            fh.write(struct.pack("<I", 0))
        else:
            pix = images.aligned(ds)
            fh.write(struct.pack("<IIII", 1, *pix.shape[1:]))
            fh.write(pix.astype("<f8").tobytes())
    sidecar = {"users": list(ds.user_ids), "items": list(ds.item_ids)}
    index_path(path).write_text(json.dumps(sidecar, indent=1) + "\n")


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".index.json")


def load_packed(path) -> tuple[RatingsDataset, ImageStore | None]:
    import json

    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _DS_MAGIC:
        raise DataError(f"{path}: not a packed dataset")
    head = struct.calcsize("<IQQQdd")
    version, n, m, nnz, lo, hi = struct.unpack_from("<IQQQdd", raw, 4)
    if version != _DS_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 4 + head

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.astype(dtype[1:])

    users = take("<i8", nnz)
    items = take("<i8", nnz)
    ratings = take("<f8", nnz)
    (has_images,) = struct.unpack_from("<I", raw, off)
    off += 4
    pixels = None
    if has_images:
        h, w, c = struct.unpack_from("<III", raw, off)
        off += 12
        pixels = take("<f8", m * h * w * c).reshape(m, h, w, c)
    side = json.loads(index_path(path).read_text())
    if len(side["users"]) != n or len(side["items"]) != m:
        raise DataError(f"{path}: index sidecar does not match header")
    ds = RatingsDataset(side["users"], side["items"], users, items, ratings, (lo, hi))
    images = ImageStore(ds.item_ids, pixels) if pixels is not None else None
    return ds, images
