"""K-head 3D U-Net: shared encoder-decoder trunk with replicated output heads.

The trunk is a standard 3D U-Net (two 3x3x3 conv + instance norm + ReLU
blocks per level, 2x max-pool downsampling, trilinear upsampling with skip
concatenation). The final ``head_depth`` decoder stages plus the 1x1x1
classifier are replicated per head with independent initializations, so
the heads form an implicit ensemble over shared features. Instance norm is
used because training runs with batch size 1.

At inference the mean of the per-head softmax maps is the prediction and
the entropy of that mean is the per-voxel epistemic uncertainty estimate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import seeding
from .core_data import NUM_CLASSES
from .errors import ConfigError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    k: int = 5
    levels: int = 3
    base_channels: int = 16
    num_classes: int = NUM_CLASSES
    head_depth: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes is fixed at {NUM_CLASSES} "
                              f"(background + four organs), got {self.num_classes}")
        if not 1 <= self.head_depth <= self.levels:
            raise ConfigError(f"head_depth must be in [1, levels], got {self.head_depth}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels + 1)]


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_ch, affine=True)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_ch, affine=True)

    def forward(self, x):
        x = torch.relu(self.norm1(self.conv1(x)))
        return torch.relu(self.norm2(self.conv2(x)))


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False)
        self.conv = DoubleConv(in_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        return self.conv(torch.cat([x, skip], dim=1))


class Trunk(nn.Module):
    """Encoder + bottleneck + the decoder stages shared by all heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.channels
        self.levels = config.levels
        self.head_depth = config.head_depth
        self.encoders = nn.ModuleList(
            [DoubleConv(1 if i == 0 else ch[i - 1], ch[i]) for i in range(config.levels)])
        self.pool = nn.MaxPool3d(2)
        self.bottleneck = DoubleConv(ch[config.levels - 1], ch[config.levels])
        self.decoders = nn.ModuleList(
            [DecoderStage(ch[i + 1], ch[i], ch[i])
             for i in reversed(range(config.head_depth, config.levels))])

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for i, dec in enumerate(self.decoders):
            x = dec(x, skips[self.levels - 1 - i])
        return x, skips[:self.head_depth]


class HeadBranch(nn.Module):
    """The replicated tail: remaining decoder stages plus the classifier."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.channels
        self.head_depth = config.head_depth
        self.stages = nn.ModuleList(
            [DecoderStage(ch[i + 1], ch[i], ch[i])
             for i in reversed(range(config.head_depth))])
        self.classifier = nn.Conv3d(ch[0], config.num_classes, 1)

    def forward(self, x, skips):
        for i, stage in enumerate(self.stages):
            x = stage(x, skips[self.head_depth - 1 - i])
        return self.classifier(x)


def _init_he(module: nn.Module, generator: torch.Generator):
    """Kaiming-He normal init for convs (fan-in, ReLU gain), zeros for biases.

    Walks modules in registration order so two architectures that register
    the same layer sequence consume the generator identically.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv3d):
                fan_in = m.in_channels * int(np.prod(m.kernel_size))
                std = math.sqrt(2.0 / fan_in)
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm3d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()


class _SegmentationBase(nn.Module):
    config: ModelConfig

    def _check_input(self, x: torch.Tensor):
        div = 2 ** self.config.levels
        bad = [d for d in x.shape[-3:] if d % div != 0]
        if bad:
            raise ConfigError(
                f"input spatial dims {tuple(x.shape[-3:])} must be divisible by {div}")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def predict_window(self, image: np.ndarray) -> np.ndarray:
        """Mean class-probability map (C, z, y, x) for one image window."""
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        probs = self.mean_probs(x.unsqueeze(0).unsqueeze(0))
        return probs.squeeze(0).numpy()


class KHeadUNet3d(_SegmentationBase):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.trunk = Trunk(config)
        self.heads = nn.ModuleList([HeadBranch(config) for _ in range(config.k)])

    @property
    def k(self) -> int:
        return self.config.k

    def forward(self, x):
        """All-head logits, shape (B, K, C, z, y, x); trunk computed once."""
        self._check_input(x)
        feats, skips = self.trunk(x)
        return torch.stack([head(feats, skips) for head in self.heads], dim=1)

    def forward_head(self, x, head_index: int):
        """Logits of a single head, shape (B, C, z, y, x).

        Only the trunk and the selected head enter the autograd graph, so
        the other heads receive no gradient from a step on this output.
        """
        self._check_input(x)
        feats, skips = self.trunk(x)
        return self.heads[head_index](feats, skips)

    def mean_probs(self, x):
        logits = self.forward(x)
        return torch.softmax(logits, dim=2).mean(dim=1)


class PlainUNet3d(_SegmentationBase):
    """Single-output 3D U-Net; layer-for-layer the trunk plus one head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.k != 1:
            raise ConfigError("PlainUNet3d requires a k=1 config")
        self.config = config
        self.trunk = Trunk(config)
        self.head = HeadBranch(config)

    def forward(self, x):
        self._check_input(x)
        feats, skips = self.trunk(x)
        return self.head(feats, skips)

    def mean_probs(self, x):
        return torch.softmax(self.forward(x), dim=1)


def build_model(config: ModelConfig, seed: int) -> KHeadUNet3d:
    """Construct and Kaiming-initialize a K-head model (deterministic in seed)."""
    model = KHeadUNet3d(config)
    gen = torch.Generator()
    gen.manual_seed(seeding.torch_seed(seed, seeding.TAG_INIT))
    _init_he(model, gen)
    return model


def build_plain_model(config: ModelConfig, seed: int) -> PlainUNet3d:
    """A plain single-head U-Net initialized identically to a k=1 K-head model."""
    model = PlainUNet3d(config)
    gen = torch.Generator()
    gen.manual_seed(seeding.torch_seed(seed, seeding.TAG_INIT))
    _init_he(model, gen)
    return model


@dataclass
class KHeadOutput:
    """Per-head logits and softmax probabilities, shapes (K, C, z, y, x)."""

    logits: torch.Tensor
    probs: torch.Tensor


def forward(model: KHeadUNet3d, patch) -> KHeadOutput:
    """Inference forward pass over all heads for one (z, y, x) patch.

    ``patch`` may be a numpy array, a torch tensor, or a Volume.
    """
    if isinstance(patch, torch.Tensor):
        data = patch.to(torch.float32)
    else:
        arr = patch if isinstance(patch, np.ndarray) else patch.data  # Volume
        data = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    with torch.no_grad():
        logits = model(data.unsqueeze(0).unsqueeze(0)).squeeze(0)
    return KHeadOutput(logits=logits, probs=torch.softmax(logits, dim=1))


def mean_prediction(out: KHeadOutput) -> torch.Tensor:
    """Arithmetic mean over heads of the per-head probability maps."""
    return out.probs.mean(dim=0)


def entropy_map(mean_probs) -> np.ndarray:
    """Per-voxel entropy -sum_c p*ln(p) of a (C, z, y, x) probability map.

    Computed in float64 with the 0*ln(0) := 0 convention; values lie in
    [0, ln C].
    """
    p = np.asarray(mean_probs.detach().numpy() if isinstance(mean_probs, torch.Tensor)
                   else mean_probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=0), 0.0)


def save_checkpoint(path: str | Path, model: _SegmentationBase, step: int,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "plain": isinstance(model, PlainUNet3d),
        "step": int(step),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[_SegmentationBase, int, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint version {payload.get('checkpoint_version')!r}")
    config = ModelConfig(**payload["model_config"])
    model = PlainUNet3d(config) if payload.get("plain") else KHeadUNet3d(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload["step"], payload["extra"]
