"""Run manifests: what a command did, with which settings, and what it wrote."""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .models import _atomic_write

_PACKAGE_DIR = Path(__file__).resolve().parent


def code_hash() -> str:
    """Git commit of the source checkout if available, else a hash of the package sources."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=_PACKAGE_DIR, capture_output=True, text=True, timeout=5, check=True
        )
        rev = out.stdout.strip()
        if rev:
            return f"git:{rev}"
    except (OSError, subprocess.SubprocessError):
        pass
    h = hashlib.sha256()
    for path in sorted(_PACKAGE_DIR.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"sha256:{h.hexdigest()}"


@dataclass
class RunManifest:
    command: str
    config_snapshot: dict
    seed: int
    artifact_paths: list = field(default_factory=list)
    git_or_content_hash: str = field(default_factory=code_hash)
    timings: dict = field(default_factory=dict)

    def add_artifact(self, path) -> None:
        p = str(path)
        if p not in self.artifact_paths:
            self.artifact_paths.append(p)

    @contextmanager
    def timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - start

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n"
        _atomic_write(path, lambda tmp: Path(tmp).write_text(text))
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        known = {k: data[k] for k in ("command", "config_snapshot", "seed", "artifact_paths", "git_or_content_hash", "timings") if k in data}
        return cls(**known)
