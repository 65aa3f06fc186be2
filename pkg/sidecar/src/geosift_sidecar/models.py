"""Model construction for embedding, detection, and classification."""

from typing import List, Optional

import torch
import torchvision
from torch import nn

from .config import EMBEDDING_DIM, SidecarError

# ImageNet statistics used by the pretrained backbones.
_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224


def preprocess(batch: torch.Tensor) -> torch.Tensor:
    """Normalize a float batch in [0, 1] with the backbone statistics."""
    mean = torch.tensor(_MEAN, device=batch.device).view(1, 3, 1, 1)
    std = torch.tensor(_STD, device=batch.device).view(1, 3, 1, 1)
    return (batch - mean) / std


def build_embedder(pretrained: bool = True, device: str = "cpu") -> nn.Module:
    """VGG16 truncated to its penultimate fully connected block.

    The 4096-wide activation is taken after the block's ReLU
    (post-nonlinearity), the common choice for retrieval features.
    Weights download on demand when pretrained is requested.
    """
    weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
    net = torchvision.models.vgg16(weights=weights)
    net.classifier = nn.Sequential(*list(net.classifier[:5]))
    net.eval()
    return net.to(device)


def build_detector(pretrained: bool = True, device: str = "cpu") -> nn.Module:
    """Region-proposal object detector emitting boxes, labels, scores."""
    weights = (
        torchvision.models.detection.FasterRCNN_ResNet50_FPN_Weights.DEFAULT
        if pretrained else None
    )
    net = torchvision.models.detection.fasterrcnn_resnet50_fpn(weights=weights)
    net.eval()
    return net.to(device)


def detector_class_names(pretrained: bool = True) -> List[str]:
    if pretrained:
        weights = torchvision.models.detection.FasterRCNN_ResNet50_FPN_Weights.DEFAULT
        return list(weights.meta["categories"])
    return [f"class_{i}" for i in range(91)]


class FunctionHead(nn.Module):
    """Dense three-way classifier over the embedding features."""

    def __init__(self) -> None:
        super().__init__()
        self.linear = nn.Linear(EMBEDDING_DIM, 3)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.linear(features), dim=-1)


def load_head(checkpoint_path: str, device: str = "cpu") -> FunctionHead:
    """Load a fine-tuned classifier head from a state-dict checkpoint."""
    head = FunctionHead()
    try:
        state = torch.load(checkpoint_path, map_location=device)
    except (OSError, RuntimeError) as exc:
        raise SidecarError(f"cannot load checkpoint {checkpoint_path}: {exc}") from None
    try:
        head.load_state_dict(state)
    except RuntimeError as exc:
        raise SidecarError(f"bad checkpoint {checkpoint_path}: {exc}") from None
    head.eval()
    return head.to(device)
