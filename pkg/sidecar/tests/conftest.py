import os

import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn


class TinyEmbedder(nn.Module):
    """Small deterministic stand-in with the contract feature width."""

    def __init__(self, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.linear = nn.Linear(48, 4096)
        with torch.no_grad():
            self.linear.weight.copy_(
                torch.randn(self.linear.weight.shape, generator=generator)
            )
            self.linear.bias.copy_(
                torch.randn(self.linear.bias.shape, generator=generator)
            )
        self.eval()

    def forward(self, batch):
        return torch.relu(self.linear(self.pool(batch).flatten(1)))


class StubDetector(nn.Module):
    """Emits fixed boxes for any non-blank image, nothing for blanks."""

    def forward(self, images):
        outputs = []
        for tensor in images:
            if float(tensor.std()) == 0.0:
                outputs.append({
                    "boxes": torch.zeros((0, 4)),
                    "labels": torch.zeros((0,), dtype=torch.int64),
                    "scores": torch.zeros((0,)),
                })
                continue
            _, height, width = tensor.shape
            outputs.append({
                "boxes": torch.tensor([
                    [0.1 * width, 0.2 * height, 0.9 * width, 0.8 * height],
                    [0.0, 0.0, 0.3 * width, 0.3 * height],
                ]),
                "labels": torch.tensor([1, 2]),
                "scores": torch.tensor([0.9, 0.4]),
            })
        return outputs


STUB_CLASSES = ["background", "Building", "Car"]


def write_png(path, pixels):
    Image.fromarray(pixels.astype(np.uint8), mode="RGB").save(path)


@pytest.fixture()
def image_dir(tmp_path):
    """Four readable images (one a byte-level duplicate, one blank) and
    one corrupt file."""
    root = tmp_path / "images"
    root.mkdir()
    rng = np.random.default_rng(3)
    textured = rng.integers(0, 256, size=(32, 32, 3))
    write_png(root / "alpha.png", textured)
    write_png(root / "alpha_copy.png", textured)
    write_png(root / "blank.png", np.full((32, 32, 3), 128))
    write_png(root / "gamma.png", rng.integers(0, 256, size=(32, 32, 3)))
    (root / "broken.jpg").write_bytes(b"not an image at all")
    (root / "notes.txt").write_text("ignored")
    return str(root)


@pytest.fixture()
def embedder():
    return TinyEmbedder()


@pytest.fixture()
def detector():
    return StubDetector()
