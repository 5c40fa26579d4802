"""Run manifest: what a command was asked to do and which files it produced"""

import hashlib
import json
import logging
import subprocess
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, PrivateAttr

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def file_digest(path: Path) -> str:
    """SHA-256 hex digest of a file's bytes"""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()


def package_version() -> str:
    try:
        return metadata.version("gpvit-desk")
    except metadata.PackageNotFoundError:
        return "unknown"


def git_describe() -> Optional[str]:
    """`git describe --always --dirty` of the source checkout, None outside one"""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git describe unavailable: {e}")
        return None
    if result.returncode != 0:
        return None
    return result.stdout.strip() or None


class Artifact(BaseModel):
    path: str
    size: int
    sha256: str


class RunManifest(BaseModel):
    """One command invocation and its outputs"""
    command: str
    model: Optional[str] = None
    config_path: Optional[str] = None
    config_digest: Optional[str] = None
    seed: int = 0
    precision: str = "f32"
    out_dir: Optional[str] = None
    git_describe: Optional[str] = Field(default_factory=git_describe)
    options: Dict[str, Any] = Field(default_factory=dict)
    version: str = Field(default_factory=package_version)
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_time: float = 0.0
    succeeded: bool = False
    error: Optional[str] = None
    artifacts: List[Artifact] = Field(default_factory=list)

    _clock: float = PrivateAttr(default_factory=time.perf_counter)

    def add(self, path: Path, out_dir: Path) -> None:
        """Record an artifact; paths are stored relative to the output directory"""
        path = Path(path)
        try:
            relative = str(path.relative_to(out_dir))
        except ValueError:
            relative = str(path)
        self.artifacts.append(
            Artifact(path=relative, size=path.stat().st_size, sha256=file_digest(path))
        )

    def write(self, out_dir: Path, succeeded: bool) -> Path:
        """Finish timing and write manifest.json into out_dir"""
        self.succeeded = succeeded
        self.wall_time = round(time.perf_counter() - self._clock, 3)
        path = Path(out_dir) / MANIFEST_NAME
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.model_dump(), indent=2) + "\n")
        except OSError as e:
            raise OSError(f"Cannot write manifest {path}: {e.strerror or e}") from e
        logger.debug(f"Wrote manifest with {len(self.artifacts)} artifacts to {path}")
        return path
