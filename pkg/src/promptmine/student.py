"""Trainable lightweight segmentation students.

Two architectures share one contract: images in, per-pixel foreground
probabilities out (sigmoid applied inside forward).

* ``unetpp_r34`` - nested U-Net++ decoder over a torchvision resnet34
  encoder, the full-scale model (~26M parameters, downsampling factor 32).
* ``tiny_ed``    - three-level encoder-decoder with GroupNorm (~100k
  parameters, factor 8) for CPU-scale tests; normalization is per-sample,
  so results do not depend on batch composition.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
from torch import nn

from .seeding import seed_for

ARCHITECTURES = ("unetpp_r34", "tiny_ed")
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


@dataclass
class StudentConfig:
    architecture: str = "tiny_ed"
    in_channels: int = 3
    out_channels: int = 1
    pretrained_encoder: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.out_channels != 1:
            raise ValueError("binary segmentation requires out_channels == 1")


def _check_divisible(x: torch.Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h} x {w} must be divisible by {factor}")


class _GNBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int = 4):
        super().__init__()
        self.seq = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.seq(x)


class TinyED(nn.Module):
    downsample_factor = 8

    def __init__(self, config: StudentConfig, channels: Tuple[int, int, int] = (12, 24, 40)):
        super().__init__()
        self.config = config
        c1, c2, c3 = channels
        self.enc1 = _GNBlock(config.in_channels, c1)
        self.enc2 = _GNBlock(c1, c2)
        self.enc3 = _GNBlock(c2, c3)
        self.bottleneck = _GNBlock(c3, c3)
        self.dec3 = _GNBlock(c3 + c3, c2)
        self.dec2 = _GNBlock(c2 + c2, c1)
        self.dec1 = _GNBlock(c1 + c1, c1)
        self.head = nn.Conv2d(c1, config.out_channels, 1)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x):
        _check_divisible(x, self.downsample_factor)
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottleneck(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1))


class _BNBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.seq = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.seq(x)


class UNetPlusPlusR34(nn.Module):
    """Nested dense-skip decoder over resnet34 encoder features.

    Grid node X(i, j) sits at encoder level i and receives every X(i, <j)
    plus the upsampled X(i+1, j-1). A final upsampling block restores full
    resolution from the /2 feature level.
    """

    downsample_factor = 32

    def __init__(self, config: StudentConfig):
        super().__init__()
        import torchvision

        self.config = config
        weights = "IMAGENET1K_V1" if config.pretrained_encoder else None
        resnet = torchvision.models.resnet34(weights=weights)
        self.stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu)
        self.stage1 = nn.Sequential(resnet.maxpool, resnet.layer1)
        self.stage2 = resnet.layer2
        self.stage3 = resnet.layer3
        self.stage4 = resnet.layer4

        ch = (64, 64, 128, 256, 512)
        self.blocks = nn.ModuleDict()
        for i in range(4):
            for j in range(1, 5 - i):
                in_ch = ch[i] * j + ch[i + 1]
                self.blocks[f"x{i}_{j}"] = _BNBlock(in_ch, ch[i])
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.final = _BNBlock(ch[0], 32)
        self.head = nn.Conv2d(32, config.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, self.downsample_factor)
        grid = {}
        grid["x0_0"] = self.stem(x)
        grid["x1_0"] = self.stage1(grid["x0_0"])
        grid["x2_0"] = self.stage2(grid["x1_0"])
        grid["x3_0"] = self.stage3(grid["x2_0"])
        grid["x4_0"] = self.stage4(grid["x3_0"])
        for j in range(1, 5):
            for i in range(0, 5 - j):
                skips = [grid[f"x{i}_{k}"] for k in range(j)]
                up = self.up(grid[f"x{i + 1}_{j - 1}"])
                grid[f"x{i}_{j}"] = self.blocks[f"x{i}_{j}"](torch.cat(skips + [up], dim=1))
        out = self.final(self.up(grid["x0_4"]))
        return torch.sigmoid(self.head(out))


def build_student(config: StudentConfig, seed: int = 0) -> nn.Module:
    """Construct a student with deterministic weight init."""
    torch.manual_seed(seed_for(seed, "init", config.architecture))
    if config.architecture == "tiny_ed":
        return TinyED(config)
    return UNetPlusPlusR34(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(
    student: nn.Module,
    path: Path,
    epoch: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    trainer_state: Optional[dict] = None,
    manifest_hash: Optional[str] = None,
) -> None:
    """Write a self-describing checkpoint (config embedded, versioned)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "architecture": student.config.architecture,
        "config": asdict(student.config),
        "epoch": epoch,
        "model_state": student.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "trainer_state": trainer_state,
        "manifest_hash": manifest_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path, expected_architecture: Optional[str] = None):
    """Restore (student, payload). Raises on version or architecture mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version!r} != {CHECKPOINT_VERSION}")
    architecture = payload.get("architecture")
    if expected_architecture is not None and architecture != expected_architecture:
        raise ArchitectureMismatchError(
            f"checkpoint holds {architecture!r}, expected {expected_architecture!r}"
        )
    config = StudentConfig(**payload["config"])
    student = build_student(config)
    student.load_state_dict(payload["model_state"])
    return student, payload
