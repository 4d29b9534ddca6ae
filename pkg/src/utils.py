import hashlib
import json
import logging
import os
import platform
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Sequence, Union

import numpy as np

import config


Box = Sequence[float]


def box_iou(a: Box, b: Box) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def to_json_bytes(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_json_default) + "\n").encode("utf-8")


def atomic_write_json(path: Union[str, Path], obj: Any) -> None:
    atomic_write_bytes(path, to_json_bytes(obj))


def read_json(path: Union[str, Path]) -> Any:
    with Path(path).open("r", encoding="utf-8") as f:
        return json.load(f)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def config_hash(payload: Dict[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def append_run_record(output_dir: Union[str, Path], subcommand: str, payload: Dict[str, Any],
                      seeds: Dict[str, Any]) -> Dict[str, Any]:
    """Append a provenance record to ``<output_dir>/run.json``."""
    path = Path(output_dir) / "run.json"
    records = read_json(path) if path.exists() else []
    record = {
        "subcommand": subcommand,
        "config_hash": config_hash(payload),
        "seeds": seeds,
        "versions": {
            "cwattack": config.VERSION,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "finished_at": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
    }
    records.append(record)
    atomic_write_json(path, records)
    logging.info("Appended run record for %s (config %s)", subcommand, record["config_hash"][:12])
    return record
