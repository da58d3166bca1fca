"""Run-directory layout: config snapshot, metrics log, manifest, lock file.

Every command works inside one run directory. A lock file guards against
concurrent writers; a manifest records the sha256 of every emitted file so
the directory can be hash-verified after each command. Metrics are CSV
with a header row, LF line endings and 17-significant-digit reals.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.csv"
CHECKPOINT_NAME = "checkpoint.npz"
INCIDENTS_NAME = "incidents.log"

METRICS_COLUMNS = (
    "iteration",
    "n_grid",
    "loss_total",
    "loss_consistency",
    "loss_kl",
    "lambda_kl",
    "grad_norm_pre_clip",
    "grad_var_probe",
    "grad_var_ema",
    "kl_per_point",
    "lr",
    "skipped_steps",
)


class RunDirectoryError(RuntimeError):
    pass


def format_real(x: float) -> str:
    return "%.17g" % float(x)


def format_row(values) -> str:
    parts = []
    for v in values:
        if isinstance(v, bool):
            raise TypeError("booleans do not belong in metrics rows")
        if isinstance(v, int):
            parts.append(str(v))
        else:
            parts.append(format_real(v))
    return ",".join(parts) + "\n"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDirectory:
    """Filesystem handle for one run's artifacts."""

    def __init__(self, path, create: bool = False):
        self.path = Path(path)
        if create:
            self.path.mkdir(parents=True, exist_ok=True)
        if not self.path.is_dir():
            raise RunDirectoryError(f"run directory {self.path} does not exist")

    # -- paths ------------------------------------------------------------
    def file(self, name: str) -> Path:
        return self.path / name

    @property
    def config_path(self) -> Path:
        return self.file(CONFIG_NAME)

    @property
    def metrics_path(self) -> Path:
        return self.file(METRICS_NAME)

    @property
    def checkpoint_path(self) -> Path:
        return self.file(CHECKPOINT_NAME)

    # -- locking ----------------------------------------------------------
    def acquire_lock(self):
        lock = self.file(LOCK_NAME)
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryError(
                f"run directory {self.path} is locked by another command "
                f"(remove {lock} if that command is gone)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return _Lock(lock)

    # -- config snapshot ----------------------------------------------------
    def write_config_snapshot(self, raw: bytes) -> None:
        """Store the config byte-identical to the parsed input."""
        existing = self.config_path
        if existing.exists() and existing.read_bytes() != raw:
            raise RunDirectoryError(
                f"{existing} already holds a different config; refusing to overwrite"
            )
        existing.write_bytes(raw)

    # -- incidents ----------------------------------------------------------
    def log_incident(self, message: str) -> None:
        with open(self.file(INCIDENTS_NAME), "a", encoding="utf-8", newline="\n") as fh:
            fh.write(message.rstrip("\n") + "\n")

    # -- manifest -----------------------------------------------------------
    def update_manifest(self, command: str) -> dict:
        files = {}
        for p in sorted(self.path.rglob("*")):
            if not p.is_file():
                continue
            rel = p.relative_to(self.path).as_posix()
            if rel in (MANIFEST_NAME, LOCK_NAME):
                continue
            files[rel] = sha256_file(p)
        doc = {"version": 1, "updated_by": command, "files": files}
        tmp = self.file(MANIFEST_NAME + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.file(MANIFEST_NAME))
        return doc

    def verify_manifest(self) -> bool:
        mpath = self.file(MANIFEST_NAME)
        if not mpath.exists():
            return False
        doc = json.loads(mpath.read_text(encoding="utf-8"))
        on_disk = {}
        for p in sorted(self.path.rglob("*")):
            if not p.is_file():
                continue
            rel = p.relative_to(self.path).as_posix()
            if rel in (MANIFEST_NAME, LOCK_NAME):
                continue
            on_disk[rel] = sha256_file(p)
        return doc.get("files") == on_disk


class _Lock:
    def __init__(self, path: Path):
        self._path = path

    def release(self) -> None:
        try:
            os.unlink(self._path)
        except FileNotFoundError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False


class MetricsWriter:
    """Appends metric rows; on resume, rows past the resume point are dropped."""

    def __init__(self, path: Path, resume_from: int | None = None):
        self.path = Path(path)
        if resume_from is None or not self.path.exists():
            with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(",".join(METRICS_COLUMNS) + "\n")
        else:
            kept = [",".join(METRICS_COLUMNS) + "\n"]
            with open(self.path, "r", encoding="utf-8") as fh:
                header = fh.readline()
                if header.strip() != ",".join(METRICS_COLUMNS):
                    raise RunDirectoryError(f"{self.path} has an unexpected header")
                for line in fh:
                    if not line.strip():
                        continue
                    if int(line.split(",", 1)[0]) <= resume_from:
                        kept.append(line if line.endswith("\n") else line + "\n")
            with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
                fh.writelines(kept)

    def append(self, values) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(format_row(values))


def read_metrics(path) -> dict[str, list[float]]:
    """Parse a metrics CSV into column lists (floats; iteration as int)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        cols: dict[str, list] = {name: [] for name in header}
        for line in fh:
            if not line.strip():
                continue
            for name, cell in zip(header, line.strip().split(",")):
                cols[name].append(int(cell) if name in ("iteration", "skipped_steps", "n_grid") else float(cell))
    return cols
