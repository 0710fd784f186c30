"""Self-describing checkpoint container with byte-deterministic serialization.

A checkpoint is a zip of ``.npy`` entries (written with a fixed timestamp so
identical contents give identical bytes) plus a JSON metadata entry encoded as
a uint8 array.  ``load(save(c)) == c`` exactly, bit for bit.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

_META_KEY = "__meta__"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

STAGE_LAD = "lad"
STAGE_POLICY_PRE = "policy_pre"
STAGE_CRITIC = "critic"
STAGE_POLICY_FINAL = "policy_final"


@dataclass
class Checkpoint:
    module: str
    stage: str
    config_hash: str
    config: dict
    arrays: dict[str, np.ndarray]
    frozen: bool = False
    trained: bool = False
    extra: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "module": self.module,
            "stage": self.stage,
            "config_hash": self.config_hash,
            "config": self.config,
            "frozen": self.frozen,
            "trained": self.trained,
            "extra": self.extra,
            "format": 1,
        }
        meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        entries = dict(self.arrays)
        if _META_KEY in entries:
            raise CheckpointError(f"array name {_META_KEY!r} is reserved")
        entries[_META_KEY] = np.frombuffer(meta_blob, dtype=np.uint8)

        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(entries):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(entries[name]),
                                          allow_pickle=False)
                info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
                zf.writestr(info, buf.getvalue())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as npz:
                entries = {name: npz[name] for name in npz.files}
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if _META_KEY not in entries:
            raise CheckpointError(f"checkpoint {path} has no metadata entry")
        meta = json.loads(entries.pop(_META_KEY).tobytes().decode())
        return cls(
            module=meta["module"],
            stage=meta["stage"],
            config_hash=meta["config_hash"],
            config=meta["config"],
            arrays=entries,
            frozen=bool(meta["frozen"]),
            trained=bool(meta["trained"]),
            extra=meta.get("extra", {}),
        )

    def require_hash(self, config_hash: str) -> "Checkpoint":
        if self.config_hash != config_hash:
            raise CheckpointError(
                f"checkpoint config hash {self.config_hash} does not match run config {config_hash}"
            )
        return self


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if (a.module, a.stage, a.config_hash, a.frozen, a.trained) != \
       (b.module, b.stage, b.config_hash, b.frozen, b.trained):
        return False
    if a.config != b.config or a.extra != b.extra:
        return False
    if set(a.arrays) != set(b.arrays):
        return False
    return all(
        a.arrays[k].dtype == b.arrays[k].dtype
        and a.arrays[k].shape == b.arrays[k].shape
        and np.array_equal(a.arrays[k], b.arrays[k])
        for k in a.arrays
    )
