"""Binary checkpoint format for model weights and trained projections.

Layout (all integers little-endian u32, all payloads little-endian f32):

    magic "FIRP" | format version | config JSON (length-prefixed UTF-8)
    tensor count | records...

Each record is ``name length | name UTF-8 | rank | dims... | payload``.
Model tensors appear in the canonical order defined by the architecture;
projection tensors follow as ``firp.proj.<step>.W`` / ``firp.proj.<step>.b``
in step order. A JSON sidecar ``<path>.proj.json`` summarises the projection
hyper-parameters. Unknown versions are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError
from .model import ModelConfig, ModelWeights
from .projections import Projection, ProjectionSet

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION", "MAGIC"]

MAGIC = b"FIRP"
FORMAT_VERSION = 1


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_u32(f) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint: expected u32")
    return struct.unpack("<I", raw)[0]


def _write_tensor(f, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    _write_u32(f, len(encoded))
    f.write(encoded)
    _write_u32(f, data.ndim)
    for dim in data.shape:
        _write_u32(f, dim)
    f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_tensor(f) -> tuple[str, np.ndarray]:
    name_len = _read_u32(f)
    name = f.read(name_len).decode("utf-8")
    rank = _read_u32(f)
    dims = tuple(_read_u32(f) for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise CheckpointError(f"truncated payload for tensor {name!r}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return name, data


def save_checkpoint(
    path: str | Path,
    weights: ModelWeights,
    projections: ProjectionSet | None = None,
) -> None:
    path = Path(path)
    records: list[tuple[str, np.ndarray]] = [
        (name, weights[name].data) for name in weights.names()
    ]
    if projections is not None:
        for proj in projections:
            records.append((f"firp.proj.{proj.step}.W", proj.w.data))
            records.append((f"firp.proj.{proj.step}.b", proj.b.data))
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, FORMAT_VERSION)
        config_blob = json.dumps(weights.config.to_dict()).encode("utf-8")
        _write_u32(f, len(config_blob))
        f.write(config_blob)
        _write_u32(f, len(records))
        for name, data in records:
            _write_tensor(f, name, data)
    sidecar = path.with_name(path.name + ".proj.json")
    if projections is not None:
        meta = {
            "K": projections.k,
            "layers": projections.layers,
            "attend_earlier": [p.attend_earlier for p in projections],
        }
        sidecar.write_text(json.dumps(meta))
    elif sidecar.exists():
        sidecar.unlink()


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, ProjectionSet | None]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_len = _read_u32(f)
        config = ModelConfig.from_dict(json.loads(f.read(config_len).decode("utf-8")))
        count = _read_u32(f)
        tensors = dict(_read_tensor(f) for _ in range(count))

    model_tensors: dict[str, Tensor] = {}
    for name in [n for n in tensors if not n.startswith("firp.proj.")]:
        model_tensors[name] = Tensor(tensors[name], requires_grad=True)
    weights = ModelWeights(config, model_tensors)

    proj_names = [n for n in tensors if n.startswith("firp.proj.")]
    if not proj_names:
        return weights, None
    sidecar = path.with_name(path.name + ".proj.json")
    if not sidecar.exists():
        raise CheckpointError(f"projection tensors present but sidecar {sidecar} missing")
    meta = json.loads(sidecar.read_text())
    k = int(meta["K"])
    layers = [int(x) for x in meta["layers"]]
    attend = [bool(x) for x in meta.get("attend_earlier", [True] * k)]
    if len(layers) != k or len(attend) != k:
        raise CheckpointError("projection sidecar inconsistent with K")
    projections = []
    for step in range(1, k + 1):
        try:
            w = tensors[f"firp.proj.{step}.W"]
            b = tensors[f"firp.proj.{step}.b"]
        except KeyError as e:
            raise CheckpointError(f"missing projection tensor for step {step}") from e
        projections.append(
            Projection(
                step=step,
                layer=layers[step - 1],
                w=Tensor(w),
                b=Tensor(b),
                attend_earlier=attend[step - 1],
            )
        )
    return weights, ProjectionSet(projections)
