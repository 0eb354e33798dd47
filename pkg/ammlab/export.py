"""CSV and JSON artifact writers.

JSON is written with sorted keys and NaN/inf mapped to null so reruns with the
same inputs produce identical bytes.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def to_builtin(value: Any) -> Any:
    """Recursively convert numpy containers and scalars to JSON-safe Python values."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(data: Any) -> str:
    return json.dumps(to_builtin(data), sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data))
    logger.debug(f"Wrote {path}")
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(header))
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.debug(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_artifacts(directory: PathLike, stem: str, formats: Sequence[str], header: Sequence[str],
                    rows: List[Sequence[Any]], payload: Any) -> List[Path]:
    """Write `stem`.csv and/or `stem`.json according to `formats`."""
    directory = Path(directory)
    written = []
    if "csv" in formats:
        written.append(write_csv(directory / f"{stem}.csv", header, rows))
    if "json" in formats:
        written.append(write_json(directory / f"{stem}.json", payload))
    return written
