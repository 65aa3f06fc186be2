"""Stage 1: maximum seed similarity filtering.

Each candidate embedding is scored with the maximum cosine similarity
against a seed embedding matrix; candidates below t_sim are discarded.
Seed rows are L2-normalized once at load so the batched computation
reduces to a matrix product.
"""

import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .manifest import ValidationError

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1


@dataclass
class EmbeddingMatrix:
    """Dense row-major float32 embeddings with one image id per row."""

    data: np.ndarray  # shape (n_rows, dim), float32
    row_ids: List[str]

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError("embedding data must be 2-dimensional")
        if len(self.row_ids) != self.data.shape[0]:
            raise ValidationError(
                f"{len(self.row_ids)} ids for {self.data.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("embedding matrix contains NaN or Inf")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_embeddings(matrix: EmbeddingMatrix, path: str) -> None:
    """Write the binary embedding file.

    Layout: magic "EMB1", u32 version, u64 n_rows, u32 dim (all
    little-endian), then row-major float32 data, then newline-separated
    id strings.
    """
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IQI", EMB_VERSION, matrix.n_rows, matrix.dim))
        fh.write(matrix.data.astype("<f4").tobytes())
        fh.write("\n".join(matrix.row_ids).encode("utf-8"))


def read_embeddings(path: str) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_len = 4 + struct.calcsize("<IQI")
    if len(blob) < header_len or blob[:4] != EMB_MAGIC:
        raise ValidationError(f"{path}: not an embedding file (bad magic)")
    version, n_rows, dim = struct.unpack("<IQI", blob[4:header_len])
    if version != EMB_VERSION:
        raise ValidationError(f"{path}: unsupported embedding version {version}")
    data_len = n_rows * dim * 4
    if len(blob) < header_len + data_len:
        raise ValidationError(f"{path}: truncated embedding data")
    data = np.frombuffer(
        blob, dtype="<f4", count=n_rows * dim, offset=header_len
    ).reshape(n_rows, dim)
    id_blob = blob[header_len + data_len :]
    row_ids = id_blob.decode("utf-8").split("\n") if n_rows else []
    if len(row_ids) != n_rows:
        raise ValidationError(
            f"{path}: id table has {len(row_ids)} entries for {n_rows} rows"
        )
    return EmbeddingMatrix(data=data.copy(), row_ids=row_ids)


def cosine_similarity(v1: Sequence[float], v2: Sequence[float]) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Raises ValidationError on dimension mismatch or a zero vector.
    """
    a = np.asarray(v1, dtype=np.float64)
    b = np.asarray(v2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for zero vector")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def _normalized(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError(f"zero vector in {what} matrix")
    return matrix / norms


def max_seed_similarity(candidate: Sequence[float], seeds: EmbeddingMatrix) -> float:
    """Maximum cosine similarity of one candidate against all seed rows."""
    if seeds.n_rows == 0:
        raise ValidationError("empty seed matrix")
    cand = np.asarray(candidate, dtype=np.float32)
    if cand.shape != (seeds.dim,):
        raise ValidationError(f"candidate dim {cand.shape} != seed dim {seeds.dim}")
    best = -1.0
    for row in seeds.data:
        best = max(best, cosine_similarity(row, cand))
    return best


def filter_by_similarity(
    candidates: EmbeddingMatrix,
    seeds: EmbeddingMatrix,
    t_sim: float,
    batch_size: int = 8192,
) -> List[Tuple[str, float, bool]]:
    """Score every candidate and gate on t_sim (inclusive).

    Returns (image_id, p_sim, passed) per candidate in input order.
    Every candidate gets a recorded p_sim regardless of pass/fail so
    threshold sweeps can be answered from the cache.
    """
    if seeds.n_rows == 0:
        raise ValidationError("empty seed matrix")
    if candidates.dim != seeds.dim:
        raise ValidationError(
            f"candidate dim {candidates.dim} != seed dim {seeds.dim}"
        )
    seed_unit = _normalized(seeds.data, "seed")
    results: List[Tuple[str, float, bool]] = []
    for start in range(0, candidates.n_rows, batch_size):
        batch = candidates.data[start : start + batch_size]
        batch_unit = _normalized(batch, "candidate")
        sims = batch_unit @ seed_unit.T  # float32 accumulation
        p_sims = np.clip(sims.max(axis=1), -1.0, 1.0)
        for offset, p_sim in enumerate(p_sims):
            image_id = candidates.row_ids[start + offset]
            results.append((image_id, float(p_sim), float(p_sim) >= t_sim))
    return results
