"""Checkpoints, metrics stores, manifests and dataset digests."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from .core_types import CANONICAL_BANDS

FORMAT_VERSION = 1
METRIC_FIELDS = ("model", "fraction", "trial", "fold", "mae", "sigma", "seed", "timestamp")
_METRICS_MAGIC = f"# bandssl-metrics format_version={FORMAT_VERSION}"
_MANIFEST_KEY = "__manifest__"


class IntegrityError(ValueError):
    pass


class MetricsSchemaError(ValueError):
    pass


def _digest_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def param_digest(model: torch.nn.Module) -> str:
    return _digest_arrays(state_arrays(model))


def save_checkpoint(model, phase: str, epoch: int, directory, extra: dict | None = None) -> tuple[Path, str]:
    """Write ``<phase>_e<epoch>.ckpt.npz`` (parameters + manifest); returns (path, digest)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create checkpoint directory {directory}: {exc}") from exc
    arrays = state_arrays(model)
    digest = _digest_arrays(arrays)
    config = getattr(model, "config", None)
    manifest = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "epoch": int(epoch),
        "param_digest": digest,
        "model_config": config.to_dict() if config is not None else None,
        "has_regression_head": getattr(model, "regression_head", None) is not None,
        **(extra or {}),
    }
    path = directory / f"{phase}_e{epoch:04d}.ckpt.npz"
    payload = dict(arrays)
    payload[_MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing checkpoint {path}: {exc}") from exc
    return path, digest


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load parameter arrays and manifest, verifying the stored digest."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise IntegrityError(f"checkpoint {path} is unreadable or corrupt: {exc}") from exc
    if _MANIFEST_KEY not in arrays:
        raise IntegrityError(f"checkpoint {path} has no manifest")
    manifest = json.loads(arrays.pop(_MANIFEST_KEY).tobytes().decode())
    if _digest_arrays(arrays) != manifest.get("param_digest"):
        raise IntegrityError(f"checkpoint {path}: parameter digest mismatch")
    return arrays, manifest


def load_state_into(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` (optionally restricted to ``prefix``) into ``module``.

    Raises ValueError on any missing key or shape mismatch.
    """
    if prefix:
        arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    own = module.state_dict()
    missing = sorted(set(own) - set(arrays))
    extra = sorted(set(arrays) - set(own))
    bad = [k for k in own if k in arrays and tuple(own[k].shape) != arrays[k].shape]
    if missing or extra or bad:
        raise ValueError(
            f"checkpoint/architecture mismatch: missing={missing[:3]} unexpected={extra[:3]} shape={bad[:3]}"
        )
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})


def load_checkpoint(path):
    """Rebuild the model recorded in the checkpoint manifest."""
    from .model import ModelConfig, build_model

    arrays, manifest = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(cfg, with_regression=manifest["has_regression_head"])
    model.config = cfg
    load_state_into(model, arrays)
    return model, manifest


# ---------------------------------------------------------------------------
# metrics


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def record_metrics(rows, path) -> Path:
    """Append rows to a delimited metrics store, creating it with a header if needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        row = dict(row)
        row.setdefault("seed", "")
        row.setdefault("timestamp", _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
        missing = [f for f in METRIC_FIELDS if f not in row]
        if missing:
            raise MetricsSchemaError(f"metric row missing fields {missing}")
        writer.writerow([_fmt(row[f]) for f in METRIC_FIELDS])
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write(_METRICS_MAGIC + "\n" + ",".join(METRIC_FIELDS) + "\n")
            fh.write(buf.getvalue())
    return path


def load_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines[0] != _METRICS_MAGIC:
        raise MetricsSchemaError(f"{path}: unrecognised metrics header {lines[0]!r}")
    if tuple(lines[1].split(",")) != METRIC_FIELDS:
        raise MetricsSchemaError(f"{path}: column header {lines[1]!r} does not match schema")
    out = []
    for lineno, rec in enumerate(csv.reader(lines[2:]), start=3):
        if len(rec) != len(METRIC_FIELDS):
            raise MetricsSchemaError(f"{path}:{lineno}: expected {len(METRIC_FIELDS)} fields, got {len(rec)}")
        r = dict(zip(METRIC_FIELDS, rec))
        try:
            out.append({
                "model": r["model"],
                "fraction": float(r["fraction"]),
                "trial": int(r["trial"]),
                "fold": int(r["fold"]),
                "mae": float(r["mae"]),
                "sigma": float(r["sigma"]),
                "seed": int(r["seed"]) if r["seed"] else None,
                "timestamp": r["timestamp"],
            })
        except ValueError as exc:
            raise MetricsSchemaError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# manifests and dataset digests


def dataset_digest(dataset) -> str:
    h = hashlib.sha256()
    for obs in sorted(dataset, key=lambda o: str(o.cluster_id)):
        h.update(str(obs.cluster_id).encode())
        h.update(repr(obs.richness).encode())
        for band in CANONICAL_BANDS:
            h.update(np.ascontiguousarray(obs.images[band].pixels, dtype=np.float32).tobytes())
    return h.hexdigest()


def code_version() -> str:
    """``git describe`` of the working tree, or the package version."""
    import subprocess

    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


@dataclass
class ExperimentRecord:
    manifest: dict
    dataset_digest: str | None = None
    checkpoints: list[dict] = field(default_factory=list)
    metrics_path: str | None = None

    def add_checkpoint(self, phase: str, epoch: int, path, digest: str) -> None:
        self.checkpoints.append({"phase": phase, "epoch": epoch, "path": str(path), "param_digest": digest})

    def finalize(self, path) -> Path:
        paths = [c["path"] for c in self.checkpoints]
        if self.metrics_path:
            paths.append(self.metrics_path)
        absent = [p for p in paths if not Path(p).exists()]
        if absent:
            raise FileNotFoundError(f"experiment record references missing files: {absent}")
        payload = {"format_version": FORMAT_VERSION, **asdict(self)}
        return write_json(path, payload)

    def verify_dataset(self, dataset) -> bool:
        return self.dataset_digest == dataset_digest(dataset)

    @classmethod
    def load(cls, path) -> "ExperimentRecord":
        d = json.loads(Path(path).read_text())
        d.pop("format_version", None)
        return cls(**d)
