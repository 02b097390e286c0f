"""Parameter archives: a single ``.npz`` holding named arrays plus a JSON header.

Layout::

    __meta__            0-d unicode array with a JSON object:
                        {"format": "rlmia-params", "version": 1, "kind": <str>,
                         "env_spec": {...} | null, "config": {...}, ...}
    <module>/<param>    one float array per network parameter or buffer

``kind`` names the object stored (``ddpg-actor``, ``bcq``, ``attack-tcn``,
``attack-resnet``); loaders refuse archives of another kind or with an
incompatible environment spec.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from rlmia.envs.base import EnvSpec

FORMAT = "rlmia-params"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_archive(path, kind: str, arrays: dict[str, np.ndarray], meta: dict,
                 env_spec: EnvSpec | None = None) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "kind": kind,
              "env_spec": env_spec.to_dict() if env_spec is not None else None, **meta}
    payload = {"__meta__": np.array(json.dumps(header, sort_keys=True))}
    for k, v in arrays.items():
        if k == "__meta__":
            raise CheckpointError("reserved array name")
        payload[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_archive(path, kind: str, expected_spec: EnvSpec | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise CheckpointError(f"{path}: not a parameter archive")
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported archive format {meta.get('format')}/{meta.get('version')}")
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: archive holds {meta.get('kind')!r}, expected {kind!r}")
    if expected_spec is not None:
        stored = meta.get("env_spec")
        if stored is None or not EnvSpec.from_dict(stored).compatible_with(expected_spec):
            raise CheckpointError(f"{path}: environment spec {stored} incompatible with {expected_spec.to_dict()}")
    return meta, arrays
