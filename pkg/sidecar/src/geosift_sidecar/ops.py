"""Batch inference over an image directory.

Each operation walks the configured directory, skips unreadable files
with a warning, and writes one of the pipeline input formats. Image id
is the filename stem.
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from . import formats, models
from .config import SidecarConfig, SidecarError

log = logging.getLogger("geosift_sidecar")

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")


def list_images(image_dir: str) -> List[Tuple[str, str]]:
    """Sorted (image_id, path) pairs for every recognized image file."""
    if not os.path.isdir(image_dir):
        raise SidecarError(f"not a directory: {image_dir}")
    found = []
    for name in sorted(os.listdir(image_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            found.append((stem, os.path.join(image_dir, name)))
    return found


def _load_tensor(path: str, size: Optional[int]) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None:
            img = img.resize((size, size), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1)


def _load_all(
    config: SidecarConfig, size: Optional[int]
) -> Tuple[List[str], List[torch.Tensor], List[str]]:
    ids, tensors, skipped = [], [], []
    for image_id, path in list_images(config.image_dir):
        try:
            tensor = _load_tensor(path, size)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped.append(image_id)
            continue
        ids.append(image_id)
        tensors.append(tensor)
    return ids, tensors, skipped


def _embed(
    config: SidecarConfig, model: Optional[torch.nn.Module]
) -> Tuple[List[str], np.ndarray, List[str]]:
    if model is None:
        model = models.build_embedder(device=config.device)
    ids, tensors, skipped = _load_all(config, models.INPUT_SIZE)
    rows = []
    with torch.no_grad():
        for start in range(0, len(tensors), config.batch_size):
            batch = torch.stack(tensors[start:start + config.batch_size])
            batch = models.preprocess(batch.to(config.device))
            rows.append(model(batch).cpu().numpy().astype(np.float32))
    matrix = np.concatenate(rows) if rows else np.zeros((0, 0), dtype=np.float32)
    return ids, matrix, skipped


def extract_embeddings(
    config: SidecarConfig, model: Optional[torch.nn.Module] = None
) -> Tuple[List[str], List[str]]:
    """Write the binary embedding file; returns (row ids, skip list)."""
    if config.embeddings_out is None:
        raise SidecarError("embeddings_out not configured")
    ids, matrix, skipped = _embed(config, model)
    formats.write_embedding_file(ids, matrix, config.embeddings_out)
    log.info("embedded %d image(s), skipped %d", len(ids), len(skipped))
    return ids, skipped


def detect_objects(
    config: SidecarConfig,
    model: Optional[torch.nn.Module] = None,
    class_names: Optional[List[str]] = None,
) -> Tuple[List[str], List[str]]:
    """Write the detections file; returns (detected ids, skip list).

    Every reported detection is passed through unfiltered; score and
    size gating belong to the consumer.
    """
    if config.detections_out is None:
        raise SidecarError("detections_out not configured")
    if model is None:
        model = models.build_detector(device=config.device)
        class_names = class_names or models.detector_class_names()
    elif class_names is None:
        raise SidecarError("class_names required with a custom detector")
    ids, tensors, skipped = _load_all(config, None)
    rows = []
    with torch.no_grad():
        for start in range(0, len(ids), config.batch_size):
            chunk = tensors[start:start + config.batch_size]
            outputs = model([t.to(config.device) for t in chunk])
            for offset, output in enumerate(outputs):
                image_id = ids[start + offset]
                _, height, width = chunk[offset].shape
                boxes = output["boxes"].cpu().numpy()
                labels = output["labels"].cpu().numpy()
                scores = output["scores"].cpu().numpy()
                for box, label, score in zip(boxes, labels, scores):
                    x0 = min(max(float(box[0]) / width, 0.0), 1.0)
                    y0 = min(max(float(box[1]) / height, 0.0), 1.0)
                    x1 = min(max(float(box[2]) / width, x0), 1.0)
                    y1 = min(max(float(box[3]) / height, y0), 1.0)
                    name = (
                        class_names[label]
                        if 0 <= label < len(class_names) else f"class_{label}"
                    )
                    rows.append((image_id, name, float(score), (x0, y0, x1, y1)))
    formats.write_detections_file(rows, config.detections_out)
    log.info(
        "detected %d object(s) in %d image(s), skipped %d",
        len(rows), len(ids), len(skipped),
    )
    return ids, skipped


def predict_classes(
    config: SidecarConfig,
    checkpoints: Dict[str, str],
    embedder: Optional[torch.nn.Module] = None,
) -> Tuple[List[str], List[str]]:
    """Write one probability vector per (image, checkpoint).

    `checkpoints` maps model_id to a classifier head checkpoint path;
    each id becomes a stream the consumer can ensemble.
    """
    if config.predictions_out is None:
        raise SidecarError("predictions_out not configured")
    if not checkpoints:
        raise SidecarError("at least one checkpoint is required")
    heads = {
        model_id: models.load_head(path, config.device)
        for model_id, path in sorted(checkpoints.items())
    }
    ids, features, skipped = _embed(config, embedder)
    rows = []
    with torch.no_grad():
        tensor = torch.from_numpy(features).to(config.device)
        for model_id, head in heads.items():
            probs = head(tensor).cpu().numpy().astype(np.float64)
            # Guard the contract against float32 softmax drift.
            probs /= probs.sum(axis=1, keepdims=True)
            for image_id, row in zip(ids, probs):
                rows.append((image_id, model_id, (row[0], row[1], row[2])))
    formats.write_predictions_file(rows, config.predictions_out)
    log.info(
        "predicted %d image(s) under %d model(s), skipped %d",
        len(ids), len(heads), len(skipped),
    )
    return ids, skipped
