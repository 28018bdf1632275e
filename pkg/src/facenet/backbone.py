"""Per-spectrum convolutional encoders with a pluggable interaction point.

Three independent encoders (no parameter sharing) map each spectrum image
to a stage-wise feature map. ``extract`` stops after the configured plug
layer and hands back a continuation that finishes the remaining stages,
global average pooling, and the embedding projection; mask prediction and
cross-modal enhancement slot in between. Test-time representation is the
concatenation of the three branch embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

SPECTRUM_CHANNELS = {"rgb": 3, "ni": 1, "ti": 1}

TINY_STAGE_CHANNELS = (16, 32, 48, 64)
TINY_STAGE_STRIDES = (2, 2, 2, 2)
RESNET50_STAGE_CHANNELS = (256, 512, 1024, 2048)
RESNET50_STAGE_STRIDES = (4, 2, 2, 2)  # stage 1 folds the stem downsampling
RESNET50_BLOCKS = (3, 4, 6, 3)


@dataclass
class BackboneConfig:
    variant: str = "tiny"  # "tiny" | "resnet50-shape"
    plug_layer: int = 4    # stage after which masks/enhancement apply
    embedding_dim: int = 128

    def validate(self) -> None:
        if self.variant not in ("tiny", "resnet50-shape"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.plug_layer not in (1, 2, 3, 4):
            raise ValueError("plug_layer must be in 1..4")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")


def stage_shapes(config: BackboneConfig, input_hw) -> list[tuple[int, int, int]]:
    """Published (C, H, W) per stage for a given input size."""
    channels = TINY_STAGE_CHANNELS if config.variant == "tiny" else RESNET50_STAGE_CHANNELS
    strides = TINY_STAGE_STRIDES if config.variant == "tiny" else RESNET50_STAGE_STRIDES
    h, w = input_hw
    shapes = []
    for c, s in zip(channels, strides):
        h = (h + s - 1) // s
        w = (w + s - 1) // s
        shapes.append((c, h, w))
    return shapes


def _tiny_stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.ReLU(),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1),
        nn.ReLU(),
    )


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _resnet_layer(cin: int, width: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(cin, width, stride)]
    layers += [Bottleneck(width * Bottleneck.expansion, width) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class SpectrumEncoder(nn.Module):
    """One spectrum's feature extractor plus embedding head."""

    def __init__(self, spectrum: str, config: BackboneConfig):
        super().__init__()
        config.validate()
        if spectrum not in SPECTRUM_CHANNELS:
            raise ValueError(f"unknown spectrum {spectrum!r}")
        self.spectrum = spectrum
        self.plug_layer = config.plug_layer
        in_ch = SPECTRUM_CHANNELS[spectrum]
        if config.variant == "tiny":
            chans = (in_ch,) + TINY_STAGE_CHANNELS
            self.stages = nn.ModuleList(
                _tiny_stage(chans[i], chans[i + 1]) for i in range(4)
            )
        else:
            stem = nn.Sequential(
                nn.Conv2d(in_ch, 64, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(64),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
            widths = (64, 128, 256, 512)
            cins = (64, 256, 512, 1024)
            strides = (1, 2, 2, 2)
            layers = [
                _resnet_layer(cins[i], widths[i], RESNET50_BLOCKS[i], strides[i])
                for i in range(4)
            ]
            layers[0] = nn.Sequential(stem, layers[0])
            self.stages = nn.ModuleList(layers)
        final_c = (TINY_STAGE_CHANNELS if config.variant == "tiny" else RESNET50_STAGE_CHANNELS)[-1]
        self.proj = nn.Linear(final_c, config.embedding_dim)

    def _normalize(self, images: torch.Tensor) -> torch.Tensor:
        # uint8 [0,255] -> module dtype [-1,1]
        return images.to(self.proj.weight.dtype) / 127.5 - 1.0

    def extract(self, images: torch.Tensor):
        """Run stages up to the plug layer.

        Returns the intermediate feature map and a continuation that
        finishes the remaining stages plus pooling/projection when called
        on a (possibly enhanced) feature map of the same shape.
        """
        x = self._normalize(images)
        for stage in self.stages[: self.plug_layer]:
            x = stage(x)
        expected = x.shape[1:]
        plug = self.plug_layer

        def continuation(feat: torch.Tensor) -> torch.Tensor:
            if feat.shape[1:] != expected:
                raise ValueError(
                    f"continuation input shape {tuple(feat.shape[1:])} != plug-layer shape {tuple(expected)}"
                )
            y = feat
            for stage in self.stages[plug:]:
                y = stage(y)
            return self.proj(y.mean(dim=(2, 3)))

        return x, continuation

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        feat, continuation = self.extract(images)
        return continuation(feat)


class ClassifierHead(nn.Module):
    """Per-spectrum identity scores; softmax is applied by the losses."""

    def __init__(self, embedding_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, num_classes)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.fc(embedding)
