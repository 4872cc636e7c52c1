"""Append-only run directories.

Layout: ``<output_dir>/<config hash>/config.json`` is the frozen config echo;
each command invocation adds one record directory next to it holding its
artifacts and a ``record.json`` (inputs, outputs, wall-clock). A record
directory is never rewritten.
"""
from __future__ import annotations

import json
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

from .config import ExperimentConfig


class RunExistsError(FileExistsError):
    pass


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; the message names the file and the command producing it."""

    def __init__(self, path: Path, command: str):
        self.path = Path(path)
        self.command = command
        super().__init__(f"missing artifact {self.path}; produce it with `dcppd {command}`")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class RunStore:
    def __init__(self, config: ExperimentConfig, root=None):
        self.config = config
        self.root = Path(root if root is not None else config["output_dir"])
        self.dir = self.root / config.hash()

    def ensure(self) -> Path:
        echo = self.dir / "config.json"
        if echo.exists():
            frozen = json.loads(echo.read_text())
            if frozen != json.loads(self.config.canonical_json()):
                raise RunExistsError(f"{echo} holds a different config; refusing to reuse {self.dir}")
        else:
            self.dir.mkdir(parents=True, exist_ok=True)
            echo.write_text(_dump(json.loads(self.config.canonical_json())))
        return self.dir

    def path(self, record: str) -> Path:
        return self.dir / record

    def exists(self, record: str) -> bool:
        return (self.path(record) / "record.json").exists()

    def require(self, record: str, filename: str, command: str) -> Path:
        p = self.path(record) / filename
        if not p.exists() or not self.exists(record):
            raise MissingArtifactError(p, command)
        return p

    @contextmanager
    def record(self, name: str, command: str, **inputs):
        """Build record ``name`` in a scratch directory, moved into place only on success."""
        self.ensure()
        final = self.path(name)
        if final.exists():
            raise RunExistsError(f"{final} already exists; run records are never overwritten")
        d = self.dir / f".{name}.partial"
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        info = {"command": command, "inputs": inputs, "outputs": {}}
        t0 = time.perf_counter()
        try:
            yield d, info
        except BaseException:
            shutil.rmtree(d, ignore_errors=True)
            raise
        info["wall_clock_s"] = round(time.perf_counter() - t0, 3)
        info["outputs"] = info.get("outputs") or sorted(p.name for p in d.iterdir())
        (d / "record.json").write_text(_dump(info))
        d.rename(final)

    def records(self, prefix: str = "") -> list[str]:
        if not self.dir.exists():
            return []
        return sorted(p.name for p in self.dir.iterdir() if p.is_dir() and p.name.startswith(prefix)
                      and (p / "record.json").exists())

    def next_name(self, prefix: str) -> str:
        """First ``prefix-<k>`` not yet taken, for commands whose outputs accumulate."""
        k = 1
        while self.path(f"{prefix}-{k}").exists():
            k += 1
        return f"{prefix}-{k}"
