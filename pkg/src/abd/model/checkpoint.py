"""Checkpoint container: a JSON manifest plus one flat little-endian fp64 blob.

Layout of a checkpoint directory::

    manifest.json   names, shapes and byte offsets of every tensor, model
                    config, seed, code version and free-form metadata
    params.bin      the tensors back to back, row-major, ``<f8``
    vocab.json      feature vocabulary and scaling statistics of the fold
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from .._io import dumps, write_json
from ..events import FeatureVocabulary
from .autodiff import Tensor
from .layers import ModelConfig

FORMAT = "abd-checkpoint-v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: str
    config: ModelConfig | None
    params: dict[str, Tensor]
    vocab: FeatureVocabulary
    seed: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    blobs = []
    for name, t in ckpt.params.items():
        data = np.ascontiguousarray(t.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += data.nbytes
        blobs.append(data.tobytes())
    manifest = {
        "format": FORMAT,
        "code_version": __version__,
        "arch": ckpt.arch,
        "seed": ckpt.seed,
        "config": None if ckpt.config is None else ckpt.config.to_dict(),
        "tensors": tensors,
        "meta": ckpt.meta,
    }
    (path / "params.bin").write_bytes(b"".join(blobs))
    write_json(path / "manifest.json", manifest)
    (path / "vocab.json").write_text(dumps(ckpt.vocab.to_dict(), indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
        vocab = FeatureVocabulary.from_dict(json.loads((path / "vocab.json").read_text()))
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc.filename} missing") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + 8 * n > len(blob):
            raise CheckpointError(f"params.bin truncated at tensor {entry['name']!r}")
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(shape)
        params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    cfg = manifest.get("config")
    return Checkpoint(
        arch=manifest["arch"],
        config=None if cfg is None else ModelConfig(**cfg),
        params=params,
        vocab=vocab,
        seed=manifest.get("seed", 0),
        meta=manifest.get("meta", {}),
    )
