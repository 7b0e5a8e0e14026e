"""Stage manifests: input/output hashes, config hash, and seed per stage.

Manifests record basenames plus SHA-256 digests (never absolute paths) and
no timestamps, so identical configs reproduce byte-identical manifests and
the stage-vs-pipeline equivalence check can compare whole directories.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

from . import __version__


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def config_hash(config: Mapping) -> str:
    """Hash of the config with the paths section removed: path strings vary
    across machines while the recorded input hashes already pin the data."""
    scrubbed = {k: v for k, v in config.items() if k != "paths"}
    return hashlib.sha256(
        json.dumps(scrubbed, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def write_manifest(
    stage: str,
    outdir: str | Path,
    inputs: Mapping[str, str | Path],
    outputs: Mapping[str, str | Path],
    config: Mapping,
    seed: int,
) -> Path:
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": seed,
        "config_sha256": config_hash(config),
        "inputs": {
            name: {"file": Path(p).name, "sha256": file_sha256(p)}
            for name, p in sorted(inputs.items())
        },
        "outputs": {
            name: {"file": Path(p).name, "sha256": file_sha256(p)}
            for name, p in sorted(outputs.items())
        },
    }
    path = Path(outdir) / f"{stage}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
