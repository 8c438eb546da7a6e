"""On-disk format for ICNN parameters and JKO chains.

An ICNN is stored as ``<name>.json`` plus one raw little-endian float64 blob
per tensor (``<name>.<tensor>.bin``), listed in the manifest in canonical
order with shape and SHA-256. A chain directory holds ``chain.json`` and a
``step_XXX`` subdirectory per map. ``chain.json`` carries a content hash over
the step manifests so tampering is detected on load.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CorruptManifest, VersionMismatch
from .icnn import IcnnParams
from .jko import JkoChain, measure_from_spec

FORMAT_VERSION = 1
DTYPE = "<f8"


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_params(params: IcnnParams, directory, name: str = "icnn") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for key, arr in params.tensors().items():
        data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        fname = f"{name}.{key}.bin"
        (directory / fname).write_bytes(data)
        tensors.append({"name": key, "shape": list(arr.shape), "file": fname, "sha256": _sha(data)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float64",
        "endianness": "little",
        "dim": params.dim,
        "widths": params.widths,
        "alpha": params.alpha,
        "tensors": tensors,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_params(path) -> IcnnParams:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"cannot read {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format {manifest.get('format_version')} != {FORMAT_VERSION}")
    out = {}
    for t in manifest["tensors"]:
        blob = path.parent / t["file"]
        if not blob.exists():
            raise CorruptManifest(f"missing tensor blob {blob}")
        data = blob.read_bytes()
        if _sha(data) != t["sha256"]:
            raise CorruptManifest(f"checksum mismatch for {blob}")
        arr = np.frombuffer(data, dtype=DTYPE)
        if arr.size != int(np.prod(t["shape"])):
            raise CorruptManifest(f"size mismatch for {blob}")
        out[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return IcnnParams.from_tensors(out, manifest["alpha"])


def save_chain(chain: JkoChain, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    steps = []
    for k, psi in enumerate(chain.maps, start=1):
        p = save_params(psi, directory / f"step_{k:03d}")
        steps.append(str(p.relative_to(directory)))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": chain.dim,
        "h": chain.h,
        "inv_beta": chain.inv_beta,
        "K": chain.n_steps,
        "initial": chain.initial.to_spec(),
        "config_hash": chain.config_hash,
        "steps": steps,
        "content_hash": _content_hash(directory, steps),
    }
    if extra:
        manifest["extra"] = extra
    path = directory / "chain.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _content_hash(directory: Path, steps) -> str:
    h = hashlib.sha256()
    for s in steps:
        f = directory / s
        if not f.exists():
            raise CorruptManifest(f"missing step manifest {f}")
        h.update(f.read_bytes())
    return h.hexdigest()


def load_chain(directory) -> JkoChain:
    directory = Path(directory)
    path = directory / "chain.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"cannot read {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format {manifest.get('format_version')} != {FORMAT_VERSION}")
    if _content_hash(directory, manifest["steps"]) != manifest["content_hash"]:
        raise CorruptManifest("step manifests do not match the chain content hash")
    maps = [load_params(directory / s) for s in manifest["steps"]]
    if len(maps) != manifest["K"]:
        raise CorruptManifest("step count does not match K")
    return JkoChain(initial=measure_from_spec(manifest["initial"]), maps=maps, h=manifest["h"],
                    inv_beta=manifest["inv_beta"], config_hash=manifest.get("config_hash", ""))
