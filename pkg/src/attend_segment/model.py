"""Trainable networks of the attend-and-segment agent.

``GlimpseEncoder``  shallow U-net style encoder applied to every glimpse.
``LocalDecoder``    decoder symmetric to the encoder, run on the memories.
``GlobalModule``    compresses the bottleneck memory and predicts the scene
                    layout with a kernel spanning the whole compressed grid.
``FusionHead``      merges previous, local and global segmentations into a
                    refined segmentation and a certainty channel.
``OverviewNet``     encoder/decoder for the downscaled whole-scene view used by
                    hybrid and scale-only agents.

All tensors are ``B x C x H x W``.  Segmentation maps hold per-class sigmoid
probabilities; the certainty map is unbounded.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .memory import BOTTLENECK_CHANNELS, GlimpseFeatures, MemoryState


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 7
    image_height: int = 128
    image_width: int = 256
    in_channels: int = 3
    c1: int = 8
    c2: int = 16
    cb: int = BOTTLENECK_CHANNELS
    fusion_width: int = 16
    overview_size: int = 0  # 0 disables the overview network

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.image_height % 16 or self.image_width % 16:
            raise ValueError("image size must be divisible by 16")
        if self.cb != BOTTLENECK_CHANNELS:
            raise ValueError(f"bottleneck depth is fixed at {BOTTLENECK_CHANNELS}")
        if self.overview_size and self.overview_size % 4:
            raise ValueError("overview_size must be divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepOutputs:
    local_seg: torch.Tensor
    global_seg: torch.Tensor
    final_seg: torch.Tensor
    certainty: torch.Tensor

    @property
    def uncertainty(self) -> torch.Tensor:
        return torch.exp(-self.certainty)


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(conv3x3(cin, cout), nn.ReLU(), conv3x3(cout, cout), nn.ReLU())


def upsample2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


class GlimpseEncoder(nn.Module):
    """Two 2x2 poolings; returns activations at strides 1, 2 and 4."""

    def __init__(self, in_channels: int, c1: int, c2: int, cb: int):
        super().__init__()
        self.level1 = double_conv(in_channels, c1)
        self.level2 = double_conv(c1, c2)
        self.bottleneck = double_conv(c2, cb)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> GlimpseFeatures:
        f1 = self.level1(x)
        f2 = self.level2(self.pool(f1))
        fb = self.bottleneck(self.pool(f2))
        return GlimpseFeatures(f1, f2, fb)


class SkipDecoder(nn.Module):
    """Upsamples a stride-4 map to full resolution using stride-2/1 skips."""

    def __init__(self, cin: int, c1: int, c2: int, cout: int):
        super().__init__()
        self.up2 = double_conv(cin + c2, c2)
        self.up1 = double_conv(c2 + c1, c1)
        self.head = nn.Conv2d(c1, cout, 1)

    def forward(self, x, skip2, skip1):
        x = self.up2(torch.cat([upsample2(x), skip2], dim=1))
        x = self.up1(torch.cat([upsample2(x), skip1], dim=1))
        return self.head(x)


class LocalDecoder(nn.Module):
    def __init__(self, num_classes: int, c1: int, c2: int, cb: int):
        super().__init__()
        self.bottom = nn.Sequential(conv3x3(cb, cb), nn.ReLU())
        self.decoder = SkipDecoder(cb, c1, c2, num_classes)

    def forward(self, memory: MemoryState) -> torch.Tensor:
        x = self.bottom(memory.bottleneck)
        return torch.sigmoid(self.decoder(x, memory.level2, memory.level1))

    def receptive_radius(self) -> int:
        """Chebyshev reach, in image pixels, of one bottleneck memory cell.

        A change in the bottleneck cell covering pixels ``[4i, 4i + 4)`` can
        only alter outputs within this many pixels of that block.
        """
        reach = 0
        for stride, block in ((4, self.bottom), (2, self.decoder.up2), (1, self.decoder.up1),
                              (1, self.decoder.head)):
            for layer in block.modules():
                if isinstance(layer, nn.Conv2d):
                    reach += (layer.kernel_size[0] // 2) * stride
        return reach


class GlobalModule(nn.Module):
    """Scene-layout predictor with a receptive field covering the whole memory.

    The bottleneck memory (``cb x H/4 x W/4``) is compressed by two strided
    convolutions to ``cb/4 x H/16 x W/16``.  A convolution whose kernel is the
    entire compressed grid maps it to a single vector, which is reshaped back
    into a coarse ``cb/4 x H/16 x W/16`` layout, so every coarse unit sees every
    memory cell.
    """

    def __init__(self, num_classes: int, height: int, width: int, c1: int, c2: int, cb: int):
        super().__init__()
        self.coarse_shape = (cb // 4, height // 16, width // 16)
        depth, gh, gw = self.coarse_shape
        self.compress = nn.Sequential(
            conv3x3(cb, cb // 2, stride=2), nn.ReLU(),
            conv3x3(cb // 2, depth, stride=2), nn.ReLU(),
        )
        self.layout = nn.Conv2d(depth, depth * gh * gw, kernel_size=(gh, gw))
        self.expand = nn.Sequential(
            conv3x3(depth, c2), nn.ReLU(),
        )
        self.expand4 = nn.Sequential(conv3x3(c2, cb), nn.ReLU())
        self.decoder = SkipDecoder(cb, c1, c2, num_classes)

    def coarse(self, bottleneck: torch.Tensor) -> torch.Tensor:
        z = self.layout(self.compress(bottleneck))
        return z.view(z.shape[0], *self.coarse_shape)

    def forward(self, memory: MemoryState, return_coarse: bool = False):
        coarse = self.coarse(memory.bottleneck)
        x = self.expand(upsample2(coarse))
        x = self.expand4(upsample2(x))
        out = torch.sigmoid(self.decoder(x, memory.level2, memory.level1))
        if return_coarse:
            return out, coarse
        return out


class FusionHead(nn.Module):
    def __init__(self, num_classes: int, width: int):
        super().__init__()
        self.num_classes = num_classes
        self.body = nn.Sequential(
            conv3x3(3 * num_classes, width), nn.ReLU(),
            conv3x3(width, width), nn.ReLU(),
            nn.Conv2d(width, num_classes + 1, 1),
        )

    def forward(self, prev_seg, local_seg, global_seg):
        if not (prev_seg.shape == local_seg.shape == global_seg.shape):
            raise ValueError(
                f"fusion inputs disagree in shape: {tuple(prev_seg.shape)}, "
                f"{tuple(local_seg.shape)}, {tuple(global_seg.shape)}")
        out = self.body(torch.cat([prev_seg, local_seg, global_seg], dim=1))
        return torch.sigmoid(out[:, :self.num_classes]), out[:, self.num_classes:]


class OverviewNet(nn.Module):
    """Shallow U-net on the downscaled scene; predicts K classes + certainty."""

    def __init__(self, num_classes: int, in_channels: int, c1: int, c2: int, cb: int):
        super().__init__()
        self.num_classes = num_classes
        self.encoder = GlimpseEncoder(in_channels, c1, c2, cb)
        self.decoder = SkipDecoder(cb, c1, c2, num_classes + 1)

    def forward(self, small: torch.Tensor) -> torch.Tensor:
        f = self.encoder(small)
        return self.decoder(f.fb, f.f2, f.f1)


class ActiveSegmentationNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        k, c1, c2, cb = config.num_classes, config.c1, config.c2, config.cb
        self.encoder = GlimpseEncoder(config.in_channels, c1, c2, cb)
        self.local = LocalDecoder(k, c1, c2, cb)
        self.global_ = GlobalModule(k, config.image_height, config.image_width, c1, c2, cb)
        self.fusion = FusionHead(k, config.fusion_width)
        self.overview: Optional[OverviewNet] = None
        if config.overview_size:
            self.overview = OverviewNet(k, config.in_channels, c1, c2, cb)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def empty_memory(self, batch: int) -> MemoryState:
        c = self.config
        return MemoryState.empty(batch, c.image_height, c.image_width, c.c1, c.c2, c.cb,
                                 dtype=self.dtype)

    def encode(self, glimpses: torch.Tensor) -> GlimpseFeatures:
        return self.encoder(glimpses)

    def decode_local(self, memory: MemoryState) -> torch.Tensor:
        return self.local(memory)

    def decode_global(self, memory: MemoryState, return_coarse: bool = False):
        return self.global_(memory, return_coarse=return_coarse)

    def fuse(self, prev_seg, local_seg, global_seg):
        return self.fusion(prev_seg, local_seg, global_seg)

    def step(self, memory: MemoryState, prev_seg: torch.Tensor) -> StepOutputs:
        local_seg = self.decode_local(memory)
        global_seg = self.decode_global(memory)
        final_seg, certainty = self.fuse(prev_seg, local_seg, global_seg)
        return StepOutputs(local_seg, global_seg, final_seg, certainty)

    def overview_segment(self, images: torch.Tensor, overview_size: Optional[int] = None,
                         return_coarse: bool = False):
        """Segment a bilinearly downscaled copy of ``images``.

        Returns ``(seg, certainty, pixel_charge)`` upsampled to the input size,
        plus the pre-upsampling logits when ``return_coarse`` is set.
        """
        if self.overview is None:
            raise RuntimeError("model was built without an overview network")
        size = overview_size or self.config.overview_size
        if size % 4:
            raise ValueError("overview_size must be divisible by 4")
        h, w = images.shape[2:]
        small = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
        logits = self.overview(small)
        k = self.config.num_classes
        seg_small = torch.sigmoid(logits[:, :k])
        seg = F.interpolate(seg_small, size=(h, w), mode="bilinear", align_corners=False)
        certainty = F.interpolate(logits[:, k:], size=(h, w), mode="bilinear",
                                  align_corners=False)
        charge = size * size
        if return_coarse:
            return seg, certainty, charge, logits
        return seg, certainty, charge
