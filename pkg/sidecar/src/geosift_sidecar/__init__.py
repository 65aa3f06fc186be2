"""Inference sidecar for the geosift filtering pipeline.

Turns a directory of images into the three files the pipeline ingests:
a binary embedding matrix, an object-detections file, and a per-model
class-probability file. The formats are a cross-package contract; this
package writes them without importing the pipeline itself.
"""

from .config import EMBEDDING_DIM, SidecarConfig, SidecarError

__all__ = ["EMBEDDING_DIM", "SidecarConfig", "SidecarError"]

__version__ = "0.1.0"
