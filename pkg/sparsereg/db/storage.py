"""Manifest + binary persistence.

Datasets: `<name>.manifest.json` plus `<name>.bin`, little-endian float64
records of obs_dim + act_dim + 1 + obs_dim doubles followed by one done byte.
Actor checkpoints follow the same two-file convention with the flattened
parameters of every layer in order (weight then bias).
"""
import json
import logging
import os
from pathlib import Path
from typing import Union

import numpy as np

from sparsereg.core.exceptions import ParseError, SchemaError
from sparsereg.core.nn import Linear, Mlp, OutputTransform, RegularizerHooks
from sparsereg.core.tensor import Tensor
from sparsereg.db.dataset import OfflineDataset

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def dataset_paths(path: PathLike) -> tuple[Path, Path]:
    """`runs/data/pm` -> (`runs/data/pm.manifest.json`, `runs/data/pm.bin`)."""
    base = Path(path)
    for suffix in (".manifest.json", ".bin"):
        if base.name.endswith(suffix):
            base = base.with_name(base.name[: -len(suffix)])
    return base.with_name(base.name + ".manifest.json"), base.with_name(base.name + ".bin")


def record_dtype(obs_dim: int, act_dim: int) -> np.dtype:
    # packed, no alignment padding
    return np.dtype(
        [
            ("s", "<f8", (obs_dim,)),
            ("a", "<f8", (act_dim,)),
            ("r", "<f8"),
            ("s_next", "<f8", (obs_dim,)),
            ("done", "u1"),
        ]
    )


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_dataset(ds: OfflineDataset, path: PathLike) -> tuple[Path, Path]:
    manifest_path, bin_path = dataset_paths(path)
    records = np.empty(len(ds), dtype=record_dtype(ds.obs_dim, ds.act_dim))
    records["s"] = ds.observations
    records["a"] = ds.actions
    records["r"] = ds.rewards
    records["s_next"] = ds.next_observations
    records["done"] = ds.dones.astype(np.uint8)
    manifest = {"format_version": FORMAT_VERSION, **ds.manifest()}
    _atomic_write(bin_path, records.tobytes())
    _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    logger.info("saved %d transitions to %s", len(ds), bin_path)
    return manifest_path, bin_path


def read_manifest(path: PathLike) -> dict:
    manifest_path, _ = dataset_paths(path)
    text = manifest_path.read_text()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest {manifest_path}: {e.msg} at line {e.lineno}", offset=e.pos) from e
    return manifest


def load_dataset(path: PathLike) -> OfflineDataset:
    manifest_path, bin_path = dataset_paths(path)
    manifest = read_manifest(path)
    required = ("env_name", "obs_dim", "act_dim", "quality", "seed", "count")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise SchemaError(f"manifest {manifest_path} is missing {missing}")
    if manifest.get("endianness", "little") != "little":
        raise SchemaError(f"unsupported endianness {manifest['endianness']!r}")
    obs_dim, act_dim, count = int(manifest["obs_dim"]), int(manifest["act_dim"]), int(manifest["count"])
    dtype = record_dtype(obs_dim, act_dim)
    payload = bin_path.read_bytes()
    if len(payload) != count * dtype.itemsize:
        if len(payload) > count * dtype.itemsize and count > 0 and len(payload) % count == 0:
            raise SchemaError(
                f"records are {len(payload) // count} bytes but the manifest "
                f"(obs_dim={obs_dim}, act_dim={act_dim}) implies {dtype.itemsize}"
            )
        complete = len(payload) // dtype.itemsize
        raise ParseError(
            f"{bin_path} holds {len(payload)} bytes, expected {count * dtype.itemsize} for {count} records",
            offset=complete * dtype.itemsize,
            record=complete,
        )
    records = np.frombuffer(payload, dtype=dtype)
    bad_flags = np.flatnonzero(records["done"] > 1)
    if bad_flags.size:
        raise ParseError("done flag is not 0 or 1", offset=int(bad_flags[0]) * dtype.itemsize, record=int(bad_flags[0]))
    for field in ("s", "a", "r", "s_next"):
        values = records[field].reshape(count, -1)
        bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
        if bad.size:
            raise ParseError(f"non-finite value in column {field}", offset=int(bad[0]) * dtype.itemsize, record=int(bad[0]))
    return OfflineDataset(
        records["s"].reshape(count, obs_dim).copy(),
        records["a"].reshape(count, act_dim).copy(),
        records["r"].copy(),
        records["s_next"].reshape(count, obs_dim).copy(),
        records["done"].astype(bool),
        env_name=manifest["env_name"],
        quality=manifest["quality"],
        generator_seed=int(manifest["seed"]),
        split=manifest.get("split", "full"),
    )


def save_actor(net: Mlp, path: PathLike, extra: dict | None = None) -> tuple[Path, Path]:
    manifest_path, bin_path = dataset_paths(path)
    flat = np.concatenate([p.data.ravel() for p in net.parameters()]).astype("<f8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "mlp",
        "count": int(flat.size),
        "endianness": "little",
        **net.describe(),
        **(extra or {}),
    }
    if net.hooks.spectral_norm_penultimate:
        layer = net.layers[net.spectral_index]
        manifest["spectral_vectors"] = {"u": layer.u.tolist(), "v": layer.v.tolist()}
    _atomic_write(bin_path, flat.tobytes())
    _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest_path, bin_path


def load_actor(path: PathLike) -> tuple[Mlp, dict]:
    manifest_path, bin_path = dataset_paths(path)
    manifest = read_manifest(path)
    if manifest.get("kind") != "mlp":
        raise SchemaError(f"{manifest_path} is not an actor checkpoint")
    sizes = manifest["sizes"]
    payload = bin_path.read_bytes()
    expected = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if len(payload) != expected * 8:
        raise ParseError(
            f"{bin_path} holds {len(payload)} bytes, expected {expected * 8}", offset=(len(payload) // 8) * 8
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    layers, start = [], 0
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weight = flat[start : start + fan_in * fan_out].reshape(fan_out, fan_in)
        start += fan_in * fan_out
        bias = flat[start : start + fan_out]
        start += fan_out
        layers.append(Linear(Tensor.parameter(weight, f"l{i}.weight"), Tensor.parameter(bias, f"l{i}.bias")))
    transform = manifest["output_transform"]
    hooks = manifest["hooks"]
    net = Mlp(
        layers=layers,
        activation=manifest["activation"],
        output_transform=OutputTransform(kind=transform["kind"], scale=transform["scale"]),
        hooks=RegularizerHooks(
            dropout=hooks["dropout"],
            layer_norm=hooks["layer_norm"],
            spectral_norm_penultimate=hooks["spectral_norm_penultimate"],
        ),
    )
    if "spectral_vectors" in manifest:
        layer = net.layers[net.spectral_index]
        layer.u = np.array(manifest["spectral_vectors"]["u"])
        layer.v = np.array(manifest["spectral_vectors"]["v"])
    return net, manifest
