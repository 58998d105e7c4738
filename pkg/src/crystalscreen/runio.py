"""Run-artifact helpers: metadata headers, config hashing, atomic writes, seed derivation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import zlib
from pathlib import Path

import numpy as np

from . import __version__


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def metadata(cfg: dict, kind: str) -> dict:
    return {"tool": "crystalscreen", "version": __version__, "config_hash": config_hash(cfg), "kind": kind}


def stage_seed(root_seed: int, stage: str) -> int:
    """Per-stage seed: a SeedSequence keyed by the root seed and the CRC32 of the stage name."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1, np.uint32)[0])


def atomic_write_text(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n")


def write_csv(path, header, rows, meta=None):
    """CSV with an optional leading '# {json}' metadata comment line."""
    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + canonical_json(meta) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    atomic_write_text(path, buf.getvalue())


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else v


def read_csv(path):
    """Rows as dicts, skipping '#' comment lines."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_jsonl_records(path, records, meta=None):
    lines = []
    if meta is not None:
        lines.append(json.dumps({"_meta": meta}, sort_keys=True, default=_default))
    lines.extend(json.dumps(r, sort_keys=True, default=_default) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl_records(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                if "_meta" not in rec:
                    out.append(rec)
    return out
