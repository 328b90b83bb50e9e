"""
Storage utilities for reinforced tree walk experiments.
Handles result-bundle directories, JSON summaries, CSV tables and plot data files.
"""

import csv
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

logger = logging.getLogger(__name__)


def get_output_dir() -> Path:
    """Get the base output directory from env or default."""
    return Path(os.environ.get("RTREE_OUTPUT_DIR", "./outputs"))


def bundle_name(spec_name: str, spec_hash: str) -> str:
    """Directory name of a bundle: spec name plus the first 8 hex digits of its hash."""
    return f"{spec_name}_{spec_hash[:8]}"


def ensure_bundle_dir(name: str, base: Optional[Path] = None) -> Path:
    """Create and return the bundle directory (with its plots/ subdirectory)."""
    bundle_dir = (base or get_output_dir()) / name
    bundle_dir.mkdir(parents=True, exist_ok=True)
    (bundle_dir / "plots").mkdir(exist_ok=True)
    return bundle_dir


def _default(value: Any) -> Any:
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def save_summary(bundle_dir: Path, summary: dict[str, Any]) -> Path:
    """
    Save the summary JSON of a bundle.

    Keys are sorted and nothing time-dependent belongs here, so reruns of the
    same spec produce byte-identical files.
    """
    path = bundle_dir / "summary.json"
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_default)
        f.write("\n")
    return path


def load_summary(bundle_dir: Path) -> Optional[dict[str, Any]]:
    """Load the summary JSON of a bundle."""
    path = bundle_dir / "summary.json"
    if not path.exists():
        return None
    with open(path) as f:
        return json.load(f)


def save_timing(bundle_dir: Path, started: datetime, finished: datetime) -> Path:
    """Save wall-clock information next to (not inside) the summary."""
    path = bundle_dir / "timing.json"
    with open(path, "w") as f:
        json.dump(
            {
                "started": started.isoformat(),
                "finished": finished.isoformat(),
                "wall_clock_seconds": (finished - started).total_seconds(),
            },
            f,
            indent=2,
        )
    return path


def save_table(bundle_dir: Path, name: str, rows: Sequence[dict[str, Any]], columns: Optional[list[str]] = None) -> Path:
    """Save rows as a CSV table; columns default to the keys of the first row."""
    path = bundle_dir / f"{name}.csv"
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    logger.debug(f"Wrote {len(rows)} rows to {path}")
    return path


def load_table(path: Path) -> list[dict[str, str]]:
    """Load a CSV table written by save_table."""
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def save_plot_data(bundle_dir: Path, name: str, points: Iterable[tuple[float, float]], header: str = "") -> Path:
    """Save a two-column whitespace-separated data file under plots/."""
    path = bundle_dir / "plots" / f"{name}.dat"
    with open(path, "w") as f:
        if header:
            f.write(f"# {header}\n")
        for x, y in points:
            f.write(f"{x!r} {y!r}\n")
    return path


def append_index(record: dict[str, Any], base: Optional[Path] = None) -> Path:
    """Append a bundle record to the output directory's index.jsonl."""
    base = base or get_output_dir()
    base.mkdir(parents=True, exist_ok=True)
    index_path = base / "index.jsonl"
    record = {"indexed_at": datetime.now().isoformat(), **record}
    try:
        with open(index_path, "a") as f:
            f.write(json.dumps(record, default=_default) + "\n")
    except OSError as e:
        logger.warning(f"Failed to update bundle index: {e}")
    return index_path


def get_bundle_history(limit: int = 50, base: Optional[Path] = None) -> list[dict[str, Any]]:
    """Recent bundle records from the index, newest first."""
    index_path = (base or get_output_dir()) / "index.jsonl"
    if not index_path.exists():
        return []
    records = []
    with open(index_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    records.reverse()
    return records[:limit]
