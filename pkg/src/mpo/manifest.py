"""Run manifests: one JSON sidecar per CLI command.

A manifest records what a command read (role-tagged, with content
digests), what it wrote, and when. Manifests carry the only timestamps in
the pipeline, so primary artifacts stay byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import FORMAT_VERSION, __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(primary_output) -> Path:
    return Path(str(primary_output) + ".manifest.json")


def write_manifest(
    command: str,
    primary_output,
    inputs: dict[str, str],
    outputs: list[str],
    started: datetime,
    config_hash: str | None = None,
    extra: dict | None = None,
) -> Path:
    """`inputs` maps role -> path; digests are taken from the files now."""
    doc = {
        "artifact_version": __version__,
        "format_version": FORMAT_VERSION,
        "command": command,
        "config_hash": config_hash,
        "inputs": [
            {"role": role, "path": str(p), "sha256": sha256_file(p)}
            for role, p in inputs.items()
        ],
        "outputs": [{"path": str(p), "sha256": sha256_file(p)} for p in outputs],
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        doc["extra"] = extra
    path = manifest_path(primary_output)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def load_manifest(primary_output) -> dict:
    with open(manifest_path(primary_output)) as f:
        return json.load(f)


def input_digest(manifest: dict, role: str) -> str | None:
    for entry in manifest.get("inputs", []):
        if entry["role"] == role:
            return entry["sha256"]
    return None
