"""Append-only JSONL result records and their CSV summaries.

Each trial appends single-line JSON objects to
``<results>/<command>-<config_hash>-s<seed>.jsonl``. Wall-clock timings go to
a ``.timings.jsonl`` sidecar keyed by the record's sha256, which keeps the
records themselves byte-identical across re-runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
TIMINGS_SUFFIX = ".timings.jsonl"


class RecordError(ValueError):
    pass


def _plain(obj):
    """JSON-ready copy: numpy scalars/arrays unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def encode_record(record: dict) -> str:
    return json.dumps(_plain(record), sort_keys=True, separators=(",", ":"), allow_nan=False)


def record_name(command: str, config_hash: str, seed: int) -> str:
    return f"{command}-{config_hash}-s{seed}.jsonl"


def append_record(results_dir, command: str, config_hash: str, seeds: dict, body: dict,
                  timings: Optional[dict] = None) -> Path:
    out = Path(results_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {"schema_version": SCHEMA_VERSION, "command": command, "config_hash": config_hash,
              "seeds": seeds, **body}
    line = encode_record(record)
    path = out / record_name(command, config_hash, seeds.get("master", 0))
    with open(path, "a") as fh:
        fh.write(line + "\n")
    if timings is not None:
        side = path.with_name(path.name[: -len(".jsonl")] + TIMINGS_SUFFIX)
        sha = hashlib.sha256(line.encode()).hexdigest()
        with open(side, "a") as fh:
            fh.write(encode_record({"record_sha256": sha, "wall_seconds": timings}) + "\n")
    return path


def read_records(results_dir) -> list:
    """All records under ``results_dir``; byte-identical duplicates (re-runs) count once."""
    seen = set()
    out = []
    for path in sorted(Path(results_dir).glob("*.jsonl")):
        if path.name.endswith(TIMINGS_SUFFIX):
            continue
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line in seen:
                continue
            seen.add(line)
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "schema_version" not in rec:
                raise RecordError(f"{path}:{lineno}: not a result record")
            out.append(rec)
    return out


def _flatten(obj, prefix, out):
    if isinstance(obj, bool) or obj is None:
        return
    if isinstance(obj, (int, float)):
        out[prefix] = float(obj)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(obj[k], f"{prefix}.{k}" if prefix else k, out)
    elif isinstance(obj, list):
        # per-slot / per-class entries: dicts and float vectors; integer lists are identifiers
        for i, v in enumerate(obj):
            if isinstance(v, (dict, float)):
                _flatten(v, f"{prefix}.{i}", out)


STATS = ("mean", "median", "min", "max")


def aggregate(records: list) -> list:
    """One row per (command, config_hash) with count and mean/median/min/max of every numeric metric."""
    versions = {r["schema_version"] for r in records}
    if len(versions) > 1:
        raise RecordError(f"mixed schema versions {sorted(versions)}")
    groups = defaultdict(list)
    for r in records:
        flat = {}
        _flatten({k: v for k, v in r.items() if k not in ("schema_version", "seeds", "config_hash")}, "", flat)
        groups[(r["command"], r["config_hash"])].append(flat)
    rows = []
    for (command, chash), flats in sorted(groups.items()):
        row = {"command": command, "config_hash": chash, "count": len(flats)}
        for key in sorted(set().union(*flats)):
            vals = np.array([f[key] for f in flats if key in f])
            row.update({f"{key}_mean": float(vals.mean()), f"{key}_median": float(np.median(vals)),
                        f"{key}_min": float(vals.min()), f"{key}_max": float(vals.max())})
        rows.append(row)
    return rows


def to_csv(rows: list) -> str:
    """Wide CSV; missing cells are empty, floats use ``repr`` so they re-parse exactly."""
    cols = ["command", "config_hash", "count"]
    for row in rows:
        cols += [k for k in row if k not in cols]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow(["" if c not in row else repr(row[c]) if isinstance(row[c], float) else row[c]
                         for c in cols])
    return buf.getvalue()


def parse_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    for raw in reader:
        row = {}
        for k, v in raw.items():
            if v == "":
                continue
            if k in ("command", "config_hash"):
                row[k] = v
            elif k == "count":
                row[k] = int(v)
            else:
                row[k] = float(v)
        rows.append(row)
    return rows
