"""Binary checkpoint files.

Layout, all little endian::

    b"BIMF"  u32 version  u32 kind  u32 k  u32 N  u32 M
    f64[N*k] U   f64[M*k] V
    u32 n_tensors, then per tensor: u64 count, f64[count]
        (user tower tensors first, then item tower tensors, each in layer order)
    u64 trailer_length, UTF-8 JSON trailer

The JSON trailer holds the hyperparameters, network config, tower layouts,
rating scale, training mean and the cold user/item index lists.  It is
serialized with sorted keys so that save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .factorization import Checkpoint, Hyperparams, ModelKind, NetworkConfig
from .network import Tower

MAGIC = b"BIMF"
VERSION = 1
_HEADER = "<4sIIIII"


class CheckpointError(ValueError):
    pass


def _tower_meta(tower: Tower | None):
    return None if tower is None else tower.describe()


def dumps(ckpt: Checkpoint) -> bytes:
    k = ckpt.U.shape[1]
    parts = [struct.pack(_HEADER, MAGIC, VERSION, ckpt.kind.code, k,
                         ckpt.num_users, ckpt.num_items)]
    parts.append(np.ascontiguousarray(ckpt.U, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(ckpt.V, dtype="<f8").tobytes())
    tensors = []
    for tower in (ckpt.user_tower, ckpt.item_tower):
        if tower is not None:
            tensors.extend(tower.param_arrays())
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack("<Q", t.size))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    trailer = {
        "hyper": ckpt.hyper.to_dict(),
        "net": ckpt.net.to_dict(),
        "user_tower": _tower_meta(ckpt.user_tower),
        "item_tower": _tower_meta(ckpt.item_tower),
        "scale": list(ckpt.scale),
        "train_mean": ckpt.train_mean,
        "cold_users": sorted(ckpt.cold_users),
        "cold_items": sorted(ckpt.cold_items),
    }
    blob = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def loads(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        return _parse(raw)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt or truncated checkpoint: {exc}") from exc


def _parse(raw: bytes) -> Checkpoint:
    _, version, code, k, n, m = struct.unpack_from(_HEADER, raw, 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if code >= len(ModelKind):
        raise CheckpointError(f"unknown model kind code {code}")
    kind = list(ModelKind)[code]
    off = struct.calcsize(_HEADER)

    def floats(count):
        nonlocal off
        if off + 8 * count > len(raw):
            raise CheckpointError("checkpoint is truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    U = floats(n * k).reshape(n, k)
    V = floats(m * k).reshape(m, k)
    (n_tensors,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = []
    for _ in range(n_tensors):
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        tensors.append(floats(count))
    (tlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    meta = json.loads(raw[off:off + tlen].decode())
    if off + tlen != len(raw):
        raise CheckpointError("trailing bytes after checkpoint trailer")

    towers = []
    pos = 0
    for key in ("user_tower", "item_tower"):
        desc = meta[key]
        if desc is None:
            towers.append(None)
            continue
        tower = Tower(desc["layers"], tuple(desc["input_shape"]), desc["n_slots"],
                      desc["latent_dim"])
        slots = tower.param_slots()
        mine = tensors[pos:pos + len(slots)]
        pos += len(slots)
        if len(mine) != len(slots) or any(t.size != hi - lo for t, (lo, hi, _) in zip(mine, slots)):
            raise CheckpointError(f"{key} tensors do not match its layer list")
        tower.theta = np.concatenate(mine) if mine else np.zeros(0)
        towers.append(tower)
    if pos != len(tensors):
        raise CheckpointError("unexpected extra weight tensors")

    net = meta["net"]
    return Checkpoint(
        kind=kind,
        hyper=Hyperparams(**meta["hyper"]),
        net=NetworkConfig(**net),
        U=U, V=V,
        user_tower=towers[0], item_tower=towers[1],
        scale=tuple(meta["scale"]),
        train_mean=meta["train_mean"],
        cold_users=frozenset(meta["cold_users"]),
        cold_items=frozenset(meta["cold_items"]),
    )


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
