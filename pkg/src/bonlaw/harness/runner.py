"""Run a recipe, write its files and a manifest with content digests."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from .config import ExperimentConfig
from .io import json_bytes, sha256_hex
from .recipes import RECIPES

OUT_ENV = "BONLAW_OUT"
MANIFEST_NAME = "manifest.json"


@dataclass
class OutputFile:
    path: str
    sha256: str
    bytes: int


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str
    started_at: str
    finished_at: str
    threads: int
    files: list[OutputFile] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        d["files"] = [OutputFile(**f) for f in d.get("files", [])]
        return cls(**d)


def resolve_out_dir(cfg: ExperimentConfig, cli_out: str | None = None) -> Path:
    """``--out`` beats the environment variable, which beats the config file."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    if cfg.out:
        p = Path(cfg.out)
        return p if p.is_absolute() else cfg.base_dir / p
    return Path("runs") / cfg.command


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> RunManifest:
    out_dir = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg)
    started = _now()
    files = RECIPES[cfg.command](cfg)
    files["config.json"] = json_bytes(cfg.canonical())

    manifest = RunManifest(
        command=cfg.command,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        tool_version=__version__,
        started_at=started,
        finished_at="",
        threads=cfg.threads,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    for rel in sorted(files):
        data = files[rel]
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        manifest.files.append(OutputFile(rel, sha256_hex(data), len(data)))
    manifest.finished_at = _now()
    (out_dir / MANIFEST_NAME).write_bytes(json_bytes(manifest.to_json_dict()))
    return manifest


def verify_manifest(out_dir) -> list[str]:
    """Paths whose on-disk digest no longer matches the manifest."""
    out_dir = Path(out_dir)
    manifest = RunManifest.from_json_dict(json.loads((out_dir / MANIFEST_NAME).read_text(encoding="utf-8")))
    bad = []
    for f in manifest.files:
        p = out_dir / f.path
        if not p.is_file() or sha256_hex(p.read_bytes()) != f.sha256:
            bad.append(f.path)
    return bad
