"""CSV and JSON emission with fixed float formatting, and run manifests."""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r.get(c)) for c in columns) + "\n")
    return path


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split(",")
        return [dict(zip(head, line.rstrip("\n").split(","))) for line in fh]


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    return str(o)


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
    return path


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def manifest(config: dict, subcommand: str, artifacts: list[str], checks: dict,
             timings: dict, extra: dict | None = None) -> dict:
    """Run record: resolved config, its hash, versions, checks and timings."""
    return {
        "subcommand": subcommand,
        "config": config,
        "config_hash": config_hash(config),
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "artifacts": sorted(artifacts),
        "checks": checks,
        "passed": all(c.get("passed", False) for c in checks.values()),
        "timings": timings,
        **(extra or {}),
    }
