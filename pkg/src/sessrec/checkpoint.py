"""Bit-exact checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, a canonical JSON
header (config, metadata, training state, array table, digest), then the
raw little-endian array bytes in header order.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, SessionTransformer

MAGIC = b"SRCKPT01"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def array_digest(a: np.ndarray) -> str:
    a = _le(a)
    h = hashlib.sha256()
    h.update(f"{a.dtype.str}{a.shape}".encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    state: dict = field(default_factory=dict)
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SessionTransformer, state: dict | None = None,
                   moments: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(
            config=model.config.to_dict(),
            params={k: v.copy() for k, v in model.parameter_arrays().items()},
            state=copy.deepcopy(state or {}),
            moments={k: v.copy() for k, v in (moments or {}).items()},
            meta=copy.deepcopy(meta or {}),
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)

    def build_model(self) -> SessionTransformer:
        model = SessionTransformer(self.model_config(), seed=0)
        model.load_arrays(self.params)
        return model

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            copy.deepcopy(self.config),
            {k: v.copy() for k, v in self.params.items()},
            copy.deepcopy(self.state),
            {k: v.copy() for k, v in self.moments.items()},
            copy.deepcopy(self.meta),
        )

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        named = [(f"param/{k}", v) for k, v in self.params.items()]
        named += [(f"opt/{k}", v) for k, v in self.moments.items()]
        return sorted(named)

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name, arr in self._arrays():
            a = _le(arr)
            raw = a.tobytes()
            table.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        header = {"config": self.config, "meta": self.meta, "state": self.state, "arrays": table}
        digest = hashlib.sha256(_canonical(header) + payload).hexdigest()
        header["digest"] = digest
        head = _canonical(header)
        return MAGIC + struct.pack("<Q", len(head)) + head + payload

    def digest(self) -> str:
        blob = self.to_bytes()
        (n,) = struct.unpack("<Q", blob[8:16])
        return json.loads(blob[16 : 16 + n])["digest"]

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16 : 16 + n])
        payload = blob[16 + n :]
        digest = header.pop("digest")
        if hashlib.sha256(_canonical(header) + payload).hexdigest() != digest:
            raise ValueError("checkpoint digest mismatch (corrupt file)")
        params, moments = {}, {}
        for entry in header["arrays"]:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
            kind, name = entry["name"].split("/", 1)
            (params if kind == "param" else moments)[name] = arr
        return cls(header["config"], params, header["state"], moments, header["meta"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint: {p}")
        return cls.from_bytes(p.read_bytes())
