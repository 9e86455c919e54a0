"""Run manifests: provenance records written around every pipeline stage."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
import json
from pathlib import Path

from . import __version__

__all__ = ["RunManifest", "write_manifest", "finalize_manifest", "load_manifest"]


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    seeds: list
    artifacts: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    status: str = "started"
    code_version: str = __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(path, stage: str, config_hash: str, seeds) -> RunManifest:
    """Record stage start; overwrites any previous manifest for the stage."""
    manifest = RunManifest(
        stage=stage,
        config_hash=config_hash,
        seeds=list(seeds),
        started_at=_now(),
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2)
    return manifest


def finalize_manifest(path, manifest: RunManifest, artifacts: dict) -> RunManifest:
    """Mark the stage completed and attach its artifact paths."""
    manifest.artifacts = {k: str(v) for k, v in artifacts.items()}
    manifest.finished_at = _now()
    manifest.status = "completed"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, indent=2)
    return manifest


def load_manifest(path) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return RunManifest(**json.load(fh))
