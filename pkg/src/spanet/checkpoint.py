"""Model weight snapshots and the on-disk checkpoint container.

Layout of a checkpoint file (format tag ``spanet-ckpt-v1``):
tag line, 8-byte little-endian header length, JSON header (network config,
metadata, array manifest), then the raw little-endian array bytes in
manifest order. Byte-for-byte deterministic for identical contents.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import NetworkConfig, SpaNet

FORMAT_TAG = "spanet-ckpt-v1"


class CheckpointError(Exception):
    pass


@dataclass
class ModelWeights:
    """Named parameter arrays plus normalization running statistics,
    tagged with the architecture config and run metadata."""

    config: NetworkConfig
    params: "OrderedDict[str, np.ndarray]"
    stats: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SpaNet, meta: dict | None = None) -> "ModelWeights":
        params = OrderedDict(
            (name, p.detach().cpu().numpy().copy()) for name, p in model.named_parameters()
        )
        stats = OrderedDict(
            (name, b.detach().cpu().numpy().copy()) for name, b in model.named_buffers()
        )
        full_meta = {"config_hash": model.cfg.config_hash()}
        full_meta.update(meta or {})
        return cls(config=model.cfg, params=params, stats=stats, meta=full_meta)

    def apply_to(self, model: SpaNet) -> SpaNet:
        if model.cfg.canonical_json() != self.config.canonical_json():
            raise CheckpointError("model config does not match checkpoint config")
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        state.update(
            (name, torch.from_numpy(arr.copy())) for name, arr in self.stats.items()
        )
        model.load_state_dict(state)
        return model

    def build_model(self) -> SpaNet:
        model = SpaNet(self.config)
        self.apply_to(model)
        model.eval()
        return model

    def save(self, path) -> None:
        header = {
            "format": FORMAT_TAG,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "meta": self.meta,
            "params": [
                [name, str(arr.dtype), list(arr.shape)] for name, arr in self.params.items()
            ],
            "stats": [
                [name, str(arr.dtype), list(arr.shape)] for name, arr in self.stats.items()
            ],
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(FORMAT_TAG.encode() + b"\n")
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for arr in list(self.params.values()) + list(self.stats.values()):
                fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        path = Path(path)
        try:
            fh = open(path, "rb")
        except OSError as exc:
            raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
        with fh:
            try:
                tag = fh.readline().decode().strip()
            except UnicodeDecodeError as exc:
                raise CheckpointError(f"{path}: not a checkpoint file") from exc
            if tag != FORMAT_TAG:
                raise CheckpointError(f"{path}: unknown checkpoint format {tag!r}")
            try:
                (header_len,) = struct.unpack("<Q", fh.read(8))
                header = json.loads(fh.read(header_len).decode())
                config = NetworkConfig.from_dict(header["config"])
            except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
            if config.config_hash() != header["config_hash"]:
                raise CheckpointError(f"{path}: config hash mismatch")

            def read_group(manifest):
                group = OrderedDict()
                for name, dtype, shape in manifest:
                    dt = np.dtype(dtype).newbyteorder("<")
                    n_bytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
                    raw = fh.read(n_bytes)
                    if len(raw) != n_bytes:
                        raise CheckpointError(f"{path}: truncated array {name}")
                    group[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.dtype(dtype))
                return group

            params = read_group(header["params"])
            stats = read_group(header["stats"])
        return cls(config=config, params=params, stats=stats, meta=header["meta"])
