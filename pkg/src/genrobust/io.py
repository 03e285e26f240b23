"""Small persistence helpers: JSON records, CSV tables, image grids, run manifests."""
from __future__ import annotations

import csv
import datetime as _dt
import json
import subprocess
from pathlib import Path

import numpy as np
import torch


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, torch.Tensor):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_table(path, rows: list, columns: list):
    """Write rows (dicts) as CSV. Floats are written with ``repr`` so equal values give equal bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(_plain(r.get(c, ""))) for c in columns])
    return path


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_image_grid(images: torch.Tensor, path, nrow=8):
    from torchvision.utils import save_image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(images.detach().cpu().float().clamp(0, 1), path, nrow=nrow, padding=1)
    return path


def version_stamp() -> dict:
    from . import __version__

    stamp = {"package": __version__, "torch": torch.__version__, "numpy": np.__version__}
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        stamp["git"] = out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        stamp["git"] = None
    return stamp


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """``manifest.json`` in an output directory: resolved config, seeds, fingerprints, per-stage artifacts."""

    def __init__(self, path, data=None):
        self.path = Path(path)
        self.data = data or {"stages": {}, "datasets": {}}

    @classmethod
    def open(cls, out_dir) -> "RunManifest":
        path = Path(out_dir) / "manifest.json"
        if path.is_file():
            return cls(path, read_json(path))
        return cls(path)

    def set_config(self, cfg):
        self.data["config"] = cfg.as_dict()
        self.data["config_hash"] = cfg.hash()
        self.data["seeds"] = {"experiment": cfg.seed, "heads": cfg.heads.seed,
                              "baseline": cfg.baseline.seed if cfg.baseline is not None else None,
                              "calibration": cfg.calibration.seed, "eval": cfg.eval.seed,
                              "interpret": cfg.interpret.seed}
        self.data["version"] = version_stamp()

    def record_dataset(self, split, fingerprint):
        self.data["datasets"][split] = fingerprint

    def stage(self, name) -> dict:
        return self.data["stages"].setdefault(name, {"artifacts": [], "status": "pending"})

    def start(self, name):
        st = self.stage(name)
        st["started"] = now()
        st["status"] = "running"
        self.save()
        return st

    def finish(self, name, status="complete", artifacts=None, **extra):
        st = self.stage(name)
        if artifacts is not None:
            st["artifacts"] = sorted({str(a) for a in artifacts})
        st.update(extra)
        st["status"] = status
        st["finished"] = now()
        self.save()

    def missing_artifacts(self) -> list:
        return [a for st in self.data["stages"].values() for a in st.get("artifacts", []) if not Path(a).exists()]

    def save(self):
        write_json(self.path, self.data)
