"""Writers for the three pipeline input formats.

These mirror the consumer-side readers byte for byte and are written
independently on purpose: the file layouts, not any shared code, are
the contract between the two packages. All writes are atomic (temp
file in the target directory, then rename).
"""

import json
import os
import struct
import tempfile
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import SidecarError

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1


def atomic_write_bytes(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embedding_file(row_ids: Sequence[str], matrix: np.ndarray, path: str) -> None:
    """Binary layout: magic "EMB1", u32 version, u64 n_rows, u32 dim
    (little-endian), row-major float32 data, newline-separated ids."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise SidecarError("embedding matrix must be 2-dimensional")
    if len(row_ids) != matrix.shape[0]:
        raise SidecarError(f"{len(row_ids)} ids for {matrix.shape[0]} rows")
    if not np.all(np.isfinite(matrix)):
        raise SidecarError("embedding matrix contains NaN or Inf")
    blob = (
        EMB_MAGIC
        + struct.pack("<IQI", EMB_VERSION, matrix.shape[0], matrix.shape[1])
        + matrix.tobytes()
        + "\n".join(row_ids).encode("utf-8")
    )
    atomic_write_bytes(path, blob)


def write_detections_file(
    rows: List[Tuple[str, str, float, Tuple[float, float, float, float]]],
    path: str,
) -> None:
    """One JSON line per detection: image_id, class_name, score, and a
    normalized box (x0, y0, x1, y1)."""
    lines = []
    for image_id, class_name, score, box in rows:
        x0, y0, x1, y1 = box
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise SidecarError(f"{image_id}: box {box} not normalized")
        lines.append(json.dumps({
            "image_id": image_id,
            "class_name": class_name,
            "score": float(score),
            "x0": x0, "y0": y0, "x1": x1, "y1": y1,
        }))
    atomic_write_bytes(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))


def write_predictions_file(
    rows: List[Tuple[str, str, Tuple[float, float, float]]],
    path: str,
) -> None:
    """One JSON line per (image, model): probabilities for the
    commercial, other, and residential classes."""
    lines = []
    for image_id, model_id, probs in rows:
        if abs(sum(probs) - 1.0) > 1e-6:
            raise SidecarError(f"{image_id}/{model_id}: probabilities sum to {sum(probs)}")
        lines.append(json.dumps({
            "image_id": image_id,
            "model_id": model_id,
            "p_com": probs[0], "p_oth": probs[1], "p_res": probs[2],
        }))
    atomic_write_bytes(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))
