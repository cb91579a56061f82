"""Versioned checkpoint container: a zip of ``.npy`` arrays plus a JSON header.

Entries carry a fixed timestamp so identical models give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .nn import LayerGraph

FORMAT = "flowkd-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_model(model: LayerGraph, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "graph": model.describe(), "extra": extra or {}}
    arrays = model.state_arrays()
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _write_entry(zf, f"arrays/{name}.npy", buf.getvalue())
    tmp.replace(path)
    return path


def load_model(path: str | Path) -> tuple[LayerGraph, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, extra)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path} is not a flowkd checkpoint")
            if header.get("version") != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
            model = LayerGraph.from_description(header["graph"])
            arrays = {}
            for info in zf.infolist():
                if info.filename.startswith("arrays/"):
                    name = info.filename[len("arrays/"):-len(".npy")]
                    arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(info)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    params, buffers = model.parameters(), model.buffers()
    if set(arrays) != set(params) | set(buffers):
        raise CheckpointError("checkpoint arrays do not match the graph description")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data = arrays[name]
    for name, buf in buffers.items():
        buf[...] = arrays[name]
    return model, header.get("extra", {})
