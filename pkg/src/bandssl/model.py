"""Shared residual feature extractor with a band-classification head and a
five-band fusion regression head."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet18

from .core_types import CANONICAL_BANDS, BandImage, ClusterObservation

FEATURE_CHANNELS = 512
N_BANDS = len(CANONICAL_BANDS)
PERMUTATIONS: tuple[tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))

# (layer, (feature-axis, band-axis, channels)) of the full-size regression head
REFERENCE_HEAD_SHAPES = (
    ("input", (512, 5, 1)),
    ("conv1", (512, 5, 1)),
    ("conv2", (510, 5, 16)),
    ("conv3", (508, 5, 64)),
    ("fc1", (1024,)),
    ("fc2", (512,)),
    ("fc3", (1,)),
)


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"non-finite values after stage {stage!r}")


@dataclass(frozen=True)
class FeatureExtractorConfig:
    backbone: str = "resnet18_like"
    input_channels: int = 1
    feature_channels: int = FEATURE_CHANNELS
    seed: int = 0

    def __post_init__(self):
        if self.backbone != "resnet18_like":
            raise ValueError(f"unsupported backbone {self.backbone!r}")
        if self.feature_channels != FEATURE_CHANNELS:
            raise ValueError("feature_channels must be 512")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")


@dataclass(frozen=True)
class RegressionHeadConfig:
    conv_channels: tuple[int, int] = (16, 64)
    fc_units: tuple[int, int] = (1024, 512)
    seed: int = 0

    @property
    def is_reference_layout(self) -> bool:
        return tuple(self.conv_channels) == (16, 64) and tuple(self.fc_units) == (1024, 512)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


class FeatureExtractor(nn.Module):
    """ResNet-18 trunk without pooling/classifier: (N, C, H, W) -> (N, 512, H/32, W/32)."""

    def __init__(self, cfg: FeatureExtractorConfig = FeatureExtractorConfig()):
        super().__init__()
        self.cfg = cfg
        net = resnet18(weights=None)
        if cfg.input_channels != 3:
            net.conv1 = nn.Conv2d(cfg.input_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(net.conv1.weight, mode="fan_out", nonlinearity="relu")
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def build_feature_extractor(cfg: FeatureExtractorConfig = FeatureExtractorConfig()) -> FeatureExtractor:
    return _seeded(cfg.seed, lambda: FeatureExtractor(cfg))


class PretextHead(nn.Module):
    """1x1 conv + BN + ReLU, global average pool, FC 512, FC n_classes (logits)."""

    def __init__(self, n_classes: int, in_channels: int = FEATURE_CHANNELS):
        super().__init__()
        if n_classes not in (N_BANDS, len(PERMUTATIONS)):
            raise ValueError(f"n_classes must be 5 (bands) or 6 (channel orders), got {n_classes}")
        self.n_classes = n_classes
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 512, kernel_size=1, bias=False),
            nn.BatchNorm2d(512),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Sequential(nn.Linear(512, 512), nn.ReLU(inplace=True), nn.Linear(512, n_classes))

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv(fmap).mean(dim=(2, 3)))


def build_pretext_head(n_classes: int, seed: int = 0) -> PretextHead:
    return _seeded(seed, lambda: PretextHead(n_classes))


class RegressionHead(nn.Module):
    """Consumes the fused (N, 512, 5) feature grid as a one-channel image.

    3x3 convolutions are unpadded along the feature axis (512 -> 510 -> 508)
    and padded along the band axis so it stays at 5.
    """

    def __init__(self, cfg: RegressionHeadConfig = RegressionHeadConfig()):
        super().__init__()
        self.cfg = cfg
        c2, c3 = cfg.conv_channels
        f1, f2 = cfg.fc_units
        self.conv1 = nn.Sequential(nn.Conv2d(1, 1, 1, bias=False), nn.BatchNorm2d(1), nn.ReLU(inplace=True))
        self.conv2 = nn.Sequential(nn.Conv2d(1, c2, 3, padding=(0, 1), bias=False), nn.BatchNorm2d(c2), nn.ReLU(inplace=True))
        self.conv3 = nn.Sequential(nn.Conv2d(c2, c3, 3, padding=(0, 1), bias=False), nn.BatchNorm2d(c3), nn.ReLU(inplace=True))
        self.fc1 = nn.Linear((FEATURE_CHANNELS - 4) * N_BANDS * c3, f1)
        self.fc2 = nn.Linear(f1, f2)
        self.fc3 = nn.Linear(f2, 1)
        for fc in (self.fc1, self.fc2, self.fc3):
            nn.init.zeros_(fc.bias)
        self.shape_chain = self._trace_shapes()
        if cfg.is_reference_layout and self.shape_chain != REFERENCE_HEAD_SHAPES:
            raise AssertionError(f"head shape chain {self.shape_chain} differs from the reference layout {REFERENCE_HEAD_SHAPES}")

    def stages(self, fused: torch.Tensor):
        """Yield (name, activation) for every row of the layer table."""
        x = fused.unsqueeze(1)  # (N, 1, 512, 5)
        yield "input", x
        for name in ("conv1", "conv2", "conv3"):
            x = getattr(self, name)(x)
            yield name, x
        x = F.relu(self.fc1(x.flatten(1)))
        yield "fc1", x
        x = F.relu(self.fc2(x))
        yield "fc2", x
        yield "fc3", self.fc3(x)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        for _, x in self.stages(fused):
            pass
        return x.squeeze(1)

    @torch.no_grad()
    def _trace_shapes(self):
        was_training = self.training
        self.eval()
        chain = []
        for name, x in self.stages(torch.zeros(1, FEATURE_CHANNELS, N_BANDS)):
            # report conv activations as (feature, band, channels)
            shape = (x.shape[2], x.shape[3], x.shape[1]) if x.dim() == 4 else (x.shape[1],)
            chain.append((name, tuple(int(s) for s in shape)))
        self.train(was_training)
        return tuple(chain)

    def set_output_bias(self, value: float) -> None:
        with torch.no_grad():
            self.fc3.bias.fill_(float(value))


def build_regression_head(cfg: RegressionHeadConfig = RegressionHeadConfig()) -> RegressionHead:
    return _seeded(cfg.seed, lambda: RegressionHead(cfg))


class BandSSLModel(nn.Module):
    """Both branches around a single shared extractor."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        pretext_head: PretextHead | None = None,
        regression_head: RegressionHead | None = None,
    ):
        super().__init__()
        self.extractor = extractor
        self.pretext_head = pretext_head
        self.regression_head = regression_head
        self.extractor_frozen = False

    def freeze_extractor(self, frozen: bool = True) -> None:
        self.extractor_frozen = frozen
        self.extractor.requires_grad_(not frozen)
        if frozen:
            self.extractor.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.extractor_frozen:
            self.extractor.eval()
        return self

    def pretext_logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.pretext_head(self.extractor(images))

    def fused_features(self, stacks: torch.Tensor) -> torch.Tensor:
        """(N, 5, C, H, W) -> (N, 512, 5) with band columns in input order."""
        n, b = stacks.shape[:2]
        fmap = self.extractor(stacks.flatten(0, 1))
        per_band = fmap.mean(dim=(2, 3)).view(n, b, -1)
        return per_band.transpose(1, 2)

    def forward(self, stacks: torch.Tensor) -> torch.Tensor:
        return self.regression_head(self.fused_features(stacks))


def _as_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(pixels, dtype=np.float32))


@torch.no_grad()
def forward_pretext(extractor: nn.Module, head: PretextHead, img: BandImage) -> np.ndarray:
    px = np.asarray(img.pixels)
    if px.ndim != 2:
        raise ValueError(f"expected a single-channel 2-D image, got shape {px.shape}")
    logits = head(extractor(_as_tensor(px)[None, None]))[0]
    return logits.numpy().astype(np.float64)


@torch.no_grad()
def forward_regression(extractor: nn.Module, reg_head: RegressionHead, obs: ClusterObservation) -> float:
    stack = _as_tensor(obs.stacked())[:, None]  # (5, 1, H, W), canonical order
    fmap = extractor(stack)
    if not torch.isfinite(fmap).all():
        raise NonFiniteError("feature_extractor")
    fused = fmap.mean(dim=(2, 3)).T[None]  # (1, 512, 5)
    for name, x in reg_head.stages(fused):
        if not torch.isfinite(x).all():
            raise NonFiniteError(name)
    return float(x.item())


def permutation_index(perm) -> int:
    try:
        return PERMUTATIONS.index(tuple(int(p) for p in perm))
    except ValueError:
        raise ValueError(f"invalid permutation {perm!r}") from None


def permute_channels(img: np.ndarray, perm) -> tuple[np.ndarray, int]:
    """Reorder channels so output[c] = img[perm[c]]; returns the lexicographic class index."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    idx = permutation_index(perm)
    return img[list(PERMUTATIONS[idx])], idx


def inverse_permutation(perm) -> tuple[int, int, int]:
    permutation_index(perm)
    return tuple(int(k) for k in np.argsort(perm))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a BandSSLModel from a checkpoint."""

    extractor: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    head: RegressionHeadConfig = field(default_factory=RegressionHeadConfig)
    pretext_classes: int = N_BANDS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        head = dict(d.get("head", {}))
        for k in ("conv_channels", "fc_units"):
            if k in head:
                head[k] = tuple(head[k])
        return cls(
            FeatureExtractorConfig(**d.get("extractor", {})),
            RegressionHeadConfig(**head),
            d.get("pretext_classes", N_BANDS),
        )


def build_model(cfg: ModelConfig = ModelConfig(), with_regression: bool = True) -> BandSSLModel:
    model = BandSSLModel(
        build_feature_extractor(cfg.extractor),
        build_pretext_head(cfg.pretext_classes, seed=cfg.extractor.seed + 1),
        build_regression_head(cfg.head) if with_regression else None,
    )
    model.config = cfg
    return model
