"""Named parameter tensors with gradient accumulators and a binary
checkpoint codec.

Checkpoint layout (documented for interoperability, stable across versions):

    bytes 0..3    magic b"HMCK"
    bytes 4..7    manifest length M, u32 little-endian
    bytes 8..8+M  manifest, UTF-8 JSON
    8+M..         payload: raw little-endian IEEE-754 tensor data

The manifest is ``{"version": 1, "entries": [...]}`` where each entry has
``name``, ``dtype`` ("f32"/"f64"), ``shape``, ``offset`` (into the payload
section), ``nbytes`` and ``trainable``. Entry order is the canonical store
order (insertion order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, ShapeError

MAGIC = b"HMCK"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def dtype_name(dt: np.dtype) -> str:
    if np.dtype(dt) == np.float32:
        return "f32"
    if np.dtype(dt) == np.float64:
        return "f64"
    raise ShapeError(f"unsupported parameter dtype {dt}")


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


@dataclass
class ParameterStore:
    """Flat map of hierarchical names to (value, grad accumulator, trainable)."""

    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        value = np.asarray(value)
        self.params[name] = Param(value, np.zeros_like(value), trainable)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        p = self.params[name]
        if p.value.shape != value.shape:
            raise ShapeError(f"shape mismatch assigning {name}")
        p.value = np.asarray(value, dtype=p.value.dtype)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        """Canonical order: insertion order."""
        return list(self.params.keys())

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def accumulate(self, name: str, g: np.ndarray) -> None:
        p = self.params[name]
        if g.shape != p.grad.shape:
            raise ShapeError(f"gradient shape mismatch for {name}: {g.shape} vs {p.grad.shape}")
        p.grad += g

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Values under ``prefix.`` keyed by the remaining suffix."""
        pre = prefix + "."
        return {name[len(pre):]: p.value for name, p in self.params.items() if name.startswith(pre)}

    def accumulate_prefixed(self, prefix: str, grads: dict[str, np.ndarray]) -> None:
        for suffix, g in grads.items():
            self.accumulate(f"{prefix}.{suffix}", g)

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.params.items():
            out.params[name] = Param(p.value.astype(dtype), np.zeros_like(p.value, dtype=dtype), p.trainable)
        return out

    # -- checkpoint codec ---------------------------------------------------

    def save(self, path) -> None:
        entries = []
        payload = bytearray()
        for name, p in self.params.items():
            raw = np.ascontiguousarray(p.value, dtype=p.value.dtype.newbyteorder("<")).tobytes()
            entries.append({
                "name": name,
                "dtype": dtype_name(p.value.dtype),
                "shape": list(p.value.shape),
                "offset": len(payload),
                "nbytes": len(raw),
                "trainable": p.trainable,
            })
            payload.extend(raw)
        manifest = json.dumps({"version": 1, "entries": entries}).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(manifest).to_bytes(4, "little"))
            fh.write(manifest)
            fh.write(bytes(payload))

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise DecodeError("not a checkpoint file (bad magic)")
        mlen = int.from_bytes(blob[4:8], "little")
        try:
            manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DecodeError(f"corrupt checkpoint manifest: {exc}") from exc
        if manifest.get("version") != 1:
            raise DecodeError(f"unsupported checkpoint version {manifest.get('version')}")
        payload = blob[8 + mlen:]
        store = cls()
        for ent in manifest["entries"]:
            dt = _DTYPES[ent["dtype"]]
            n = ent["nbytes"]
            raw = payload[ent["offset"]:ent["offset"] + n]
            if len(raw) != n:
                raise DecodeError(f"truncated payload for {ent['name']}")
            value = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).copy()
            store.add(ent["name"], value, trainable=ent["trainable"])
        return store
