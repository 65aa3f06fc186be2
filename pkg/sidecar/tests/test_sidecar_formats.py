import os
import struct

import numpy as np
import pytest

from geosift_sidecar.config import SidecarError
from geosift_sidecar.formats import (
    atomic_write_bytes,
    write_detections_file,
    write_embedding_file,
    write_predictions_file,
)


def test_embedding_header_layout(tmp_path):
    path = tmp_path / "e.emb"
    matrix = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_embedding_file(["a", "b", "c"], matrix, str(path))
    blob = path.read_bytes()
    assert blob[:4] == b"EMB1"
    version, n_rows, dim = struct.unpack("<IQI", blob[4:20])
    assert (version, n_rows, dim) == (1, 3, 4)
    data = np.frombuffer(blob, dtype="<f4", count=12, offset=20).reshape(3, 4)
    assert np.array_equal(data, matrix)
    assert blob[20 + 48:] == b"a\nb\nc"


def test_embedding_id_count_mismatch(tmp_path):
    with pytest.raises(SidecarError, match="ids"):
        write_embedding_file(["a"], np.zeros((2, 4), dtype=np.float32),
                             str(tmp_path / "e.emb"))


def test_embedding_rejects_nan(tmp_path):
    bad = np.zeros((1, 4), dtype=np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(SidecarError, match="NaN"):
        write_embedding_file(["a"], bad, str(tmp_path / "e.emb"))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "out.bin"
    atomic_write_bytes(str(path), b"payload")
    assert path.read_bytes() == b"payload"
    assert os.listdir(tmp_path) == ["out.bin"]


def test_atomic_write_replaces_existing(tmp_path):
    path = tmp_path / "out.bin"
    path.write_bytes(b"old")
    atomic_write_bytes(str(path), b"new")
    assert path.read_bytes() == b"new"


def test_detections_box_validation(tmp_path):
    with pytest.raises(SidecarError, match="not normalized"):
        write_detections_file(
            [("a", "Building", 0.9, (0.5, 0.0, 0.4, 1.0))], str(tmp_path / "d.jsonl")
        )
    with pytest.raises(SidecarError, match="not normalized"):
        write_detections_file(
            [("a", "Building", 0.9, (0.0, 0.0, 1.2, 1.0))], str(tmp_path / "d.jsonl")
        )


def test_empty_detections_file(tmp_path):
    path = tmp_path / "d.jsonl"
    write_detections_file([], str(path))
    assert path.read_bytes() == b""


def test_predictions_sum_validation(tmp_path):
    with pytest.raises(SidecarError, match="sum"):
        write_predictions_file(
            [("a", "m", (0.5, 0.5, 0.5))], str(tmp_path / "p.jsonl")
        )
