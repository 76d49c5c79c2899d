"""Run manifests: what ran, on which inputs, producing which artifacts.

Every CLI command writes exactly one ``manifest.json``.  Input and artifact
digests let two runs be compared for reproducibility; timestamps are the
only fields expected to differ between identical runs.  Training logs are
digested in canonical form with wall-clock fields stripped, so log digests
are stable across machines of different speed.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

_TIMING_KEYS = ("wall_time",)


def file_digest(path) -> str:
    """sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_digest(obj) -> str:
    """sha256 of a JSON-serialisable object in canonical form."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def strip_timing(entries: list) -> list:
    """Copy of log entries without wall-clock fields."""
    return [{k: v for k, v in e.items() if k not in _TIMING_KEYS}
            for e in entries]


def log_digest(entries: list) -> str:
    """Canonical digest of a training log, invariant to machine speed."""
    return data_digest(strip_timing(entries))


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    seed: int
    config_digest: str = ""
    input_digests: dict = field(default_factory=dict)   # label -> sha256
    artifact_digests: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)       # relative paths
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add_input(self, label: str, path) -> None:
        self.input_digests[label] = file_digest(path)

    def add_artifact(self, path, base=None) -> None:
        path = Path(path)
        rel = str(path.relative_to(base)) if base else path.name
        self.artifacts.append(rel)
        self.artifact_digests[rel] = file_digest(path)

    def write(self, out_dir) -> Path:
        self.finished = now_iso()
        target = Path(out_dir) / "manifest.json"
        target.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return target


def start_manifest(command: str, seed: int, config: dict) -> RunManifest:
    return RunManifest(command=command, seed=seed,
                       config_digest=data_digest(config),
                       started=now_iso())
