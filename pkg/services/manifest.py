"""
Run Manifest Service
Config hashing, input hashing, stage timings and manifest writing
"""
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from pydantic import BaseModel

from schemas.manifest import RunManifest

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "1.0.0"
MANIFEST_NAME = "manifest.json"


def canonical_json(payload) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(payload) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunRecorder:
    """Collects everything a manifest needs while a command runs."""

    def __init__(self, command: str, config, seeds: dict[str, int] | None = None):
        self.command = command
        self.config = json.loads(canonical_json(config))
        self.seeds = dict(seeds or {})
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.notes: dict = {}
        self.started_at = datetime.now(timezone.utc).isoformat()

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def add_outputs(self, paths) -> None:
        for p in paths:
            self.outputs.append(str(p))

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)
            logger.debug(f"[manifest] stage {name} took {self.timings[name]:.3f}s")

    def finish(self, out_dir: str | Path) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config=self.config,
            config_hash=config_hash(self.config),
            seeds=self.seeds,
            toolkit_version=TOOLKIT_VERSION,
            inputs=self.inputs,
            outputs=sorted(set(self.outputs)),
            started_at=self.started_at,
            finished_at=datetime.now(timezone.utc).isoformat(),
            timings=self.timings,
            notes=self.notes,
        )
        return write_manifest(out_dir, manifest)


def read_manifest(out_dir: str | Path) -> RunManifest | None:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def write_manifest(out_dir: str | Path, manifest: RunManifest) -> RunManifest:
    """Write (or replace) the directory's manifest; equal config and input hashes mark a reproduction."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    previous = read_manifest(out_dir)
    if previous is not None and previous.config_hash == manifest.config_hash and previous.inputs == manifest.inputs:
        manifest = manifest.model_copy(update={"reproduction": True})
        logger.info(f"[manifest] {out_dir} reproduces config {manifest.config_hash[:12]}")
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest
