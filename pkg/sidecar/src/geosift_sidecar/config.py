"""Run configuration for the inference sidecar."""

from dataclasses import dataclass
from typing import Optional

# Feature width of the penultimate fully connected block of the
# embedding network. The file header must carry this exact value.
EMBEDDING_DIM = 4096


class SidecarError(Exception):
    """Raised for configuration and output errors."""


@dataclass
class SidecarConfig:
    """Where to read images from and where each output file goes.

    Output paths are optional so a run can produce any subset of the
    three files.
    """

    image_dir: str
    embeddings_out: Optional[str] = None
    detections_out: Optional[str] = None
    predictions_out: Optional[str] = None
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise SidecarError(f"batch_size must be positive, got {self.batch_size}")
