"""
Gesture stroke detectors over bimodal window sequences.

Inputs per batch:
    pose (B, n, 3, 15, 27)   normalized skeleton windows
    mel  (B, n, 64, T)       log-Mel spectrograms of the matching speech windows
Output: logits (B, n, 2); column 1 is the gesture class.

Variants:
    speech / vision   backbone -> encoder -> classifier on one modality
    late              both unimodal pipelines, logits averaged per window
    early             [vision || speech] per window -> 2d encoder -> classifier
    cross             per-stream encoders, bidirectional cross-attention layers,
                      streams concatenated -> classifier
    sanity            the `sanity_base` fusion with speech embeddings replaced by
                      seeded unit-Gaussian noise
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import ConfigError, ContractError
from app.core.schema import from_plain, to_plain
from app.services.pose_graph import N_JOINTS
from app.services.speech_features import N_MELS
from app.services.windowing import WINDOW_FRAMES

logger = logging.getLogger(__name__)

N_CLASSES = 2
GESTURE_COLUMN = 1
POSE_CHANNELS = 3


class FusionVariant(str, Enum):
    SPEECH = "speech"
    VISION = "vision"
    LATE = "late"
    EARLY = "early"
    CROSS = "cross"
    SANITY = "sanity"


FUSION_BASES = (FusionVariant.LATE, FusionVariant.EARLY, FusionVariant.CROSS)


@dataclass
class VisionBackboneConfig:
    # (in_channels, out_channels, temporal_kernel, stride)
    blocks: List[Tuple[int, int, int, int]] = field(default_factory=lambda: [
        (3, 64, 9, 1), (64, 64, 9, 1), (64, 128, 9, 2), (128, 256, 9, 1)])
    output_dim: int = 256
    edge_importance: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]
        if not self.blocks or self.blocks[0][0] != POSE_CHANNELS:
            raise ConfigError(f"vision backbone must start from {POSE_CHANNELS} input channels")
        for (_, out_a, _, _), (in_b, _, _, _) in zip(self.blocks, self.blocks[1:]):
            if out_a != in_b:
                raise ConfigError(f"vision blocks do not chain: {out_a} -> {in_b}")
        if any(k % 2 == 0 or s < 1 for _, _, k, s in self.blocks):
            raise ConfigError("vision temporal kernels must be odd and strides positive")


@dataclass
class SpeechBackboneConfig:
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    convs_per_block: Tuple[int, ...] = (1, 1, 2, 2)
    output_dim: int = 256

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.convs_per_block = tuple(int(c) for c in self.convs_per_block)
        if len(self.channels) != len(self.convs_per_block) or not self.channels:
            raise ConfigError("speech backbone channels and convs_per_block must have equal, nonzero length")
        if len(self.channels) > 5:
            raise ConfigError("speech backbone supports at most 5 pooling blocks for 48-frame inputs")


@dataclass
class EncoderConfig:
    d_model: int = 256
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 512
    dropout: float = 0.1
    positional_encoding: bool = True

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 0 or self.ff_dim <= 0 or not 0.0 <= self.dropout < 1.0:
            raise ConfigError("encoder n_layers >= 0, ff_dim > 0 and dropout in [0, 1) required")


@dataclass
class CrossModalEncoderConfig:
    d_model: int = 256
    n_heads: int = 4
    n_self_layers: int = 1
    n_cross_layers: int = 2
    ff_dim: int = 512
    dropout: float = 0.1
    positional_encoding: bool = True

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_cross_layers < 1:
            raise ConfigError("cross-modal encoder needs at least one cross layer")

    def stream_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.n_heads, self.n_self_layers, self.ff_dim,
                             self.dropout, self.positional_encoding)


@dataclass
class ModelConfig:
    variant: FusionVariant = FusionVariant.EARLY
    embed_dim: int = 256
    vision: VisionBackboneConfig = field(default_factory=VisionBackboneConfig)
    speech: SpeechBackboneConfig = field(default_factory=SpeechBackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    early_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(d_model=512, n_heads=4, ff_dim=1024))
    cross: CrossModalEncoderConfig = field(default_factory=CrossModalEncoderConfig)
    sanity_base: FusionVariant = FusionVariant.EARLY
    noise_seed: int = 0

    def __post_init__(self):
        self.variant = FusionVariant(self.variant)
        self.sanity_base = FusionVariant(self.sanity_base)
        d = self.embed_dim
        if self.vision.output_dim != d or self.speech.output_dim != d:
            raise ConfigError(f"backbone output dims must equal embed_dim {d}")
        if self.encoder.d_model != d or self.cross.d_model != d:
            raise ConfigError(f"unimodal and cross-modal encoders must use d_model {d}")
        if self.early_encoder.d_model != 2 * d:
            raise ConfigError(f"early-fusion encoder must use d_model {2 * d}")
        if self.sanity_base not in FUSION_BASES:
            raise ConfigError(f"sanity_base must be one of {[v.value for v in FUSION_BASES]}")

    @property
    def fusion(self) -> FusionVariant:
        """Architecture actually built: sanity runs its base fusion."""
        return self.sanity_base if self.variant == FusionVariant.SANITY else self.variant

    @property
    def uses_vision(self) -> bool:
        return self.fusion != FusionVariant.SPEECH

    @property
    def uses_speech_input(self) -> bool:
        return self.variant != FusionVariant.SANITY and self.fusion != FusionVariant.VISION

    def with_variant(self, variant: FusionVariant | str) -> "ModelConfig":
        data = to_plain(self)
        data["variant"] = FusionVariant(variant).value
        return from_plain(ModelConfig, data)


# ----------------------------------------------------------------------------------------
# Vision backbone (spatial-temporal graph convolution)
# ----------------------------------------------------------------------------------------

class ConvTemporalGraphical(nn.Module):
    """1x1 feature transform followed by aggregation over the normalized adjacency."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        return torch.einsum("nctv,vw->nctw", x, A)


def group_norm(channels: int) -> nn.GroupNorm:
    """Per-window normalization; statistics never mix windows of a batch."""
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class STGCNBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, temporal_kernel: int, stride: int = 1,
                 dropout: float = 0.0, residual: bool = True):
        super().__init__()
        padding = ((temporal_kernel - 1) // 2, 0)
        self.gcn = ConvTemporalGraphical(in_channels, out_channels)
        self.tcn = nn.Sequential(
            group_norm(out_channels),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, (temporal_kernel, 1), (stride, 1), padding),
            group_norm(out_channels),
            nn.Dropout(dropout),
        )
        if not residual:
            self.residual = None
        elif in_channels == out_channels and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=(stride, 1)),
                group_norm(out_channels),
            )

    def forward(self, x: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        res = 0 if self.residual is None else self.residual(x)
        x = self.tcn(self.gcn(x, A)) + res
        return F.relu(x)


class VisionBackbone(nn.Module):
    """(N, 3, 15, 27) windows -> (N, output_dim) embeddings, one per window."""

    def __init__(self, cfg: VisionBackboneConfig, adjacency: np.ndarray):
        super().__init__()
        A = torch.as_tensor(np.asarray(adjacency), dtype=torch.float32)
        self.register_buffer("A", A)
        self.data_norm = nn.GroupNorm(POSE_CHANNELS, POSE_CHANNELS)
        self.blocks = nn.ModuleList(
            STGCNBlock(c_in, c_out, k, s, cfg.dropout, residual=(i > 0))
            for i, (c_in, c_out, k, s) in enumerate(cfg.blocks)
        )
        if cfg.edge_importance:
            self.edge_importance = nn.ParameterList(nn.Parameter(torch.ones_like(A)) for _ in self.blocks)
        else:
            self.edge_importance = None
        last = cfg.blocks[-1][1]
        self.project = nn.Identity() if last == cfg.output_dim else nn.Linear(last, cfg.output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.data_norm(x)
        for i, block in enumerate(self.blocks):
            A = self.A if self.edge_importance is None else self.A * self.edge_importance[i]
            x = block(x, A)
        x = x.mean(dim=(2, 3))
        return self.project(x)


# ----------------------------------------------------------------------------------------
# Speech backbone (VGG-style CNN)
# ----------------------------------------------------------------------------------------

class SpeechBackbone(nn.Module):
    """(N, 64, T) log-Mel windows -> (N, output_dim); adaptive pooling makes T free."""

    def __init__(self, cfg: SpeechBackboneConfig):
        super().__init__()
        layers: List[nn.Module] = []
        c_in = 1
        for c_out, n_convs in zip(cfg.channels, cfg.convs_per_block):
            for _ in range(n_convs):
                layers += [nn.Conv2d(c_in, c_out, kernel_size=3, padding=1), nn.ReLU()]
                c_in = c_out
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(c_in, cfg.output_dim)

    def conv_layers(self) -> List[nn.Conv2d]:
        return [m for m in self.features if isinstance(m, nn.Conv2d)]

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = self.features(mel.unsqueeze(1))
        return self.project(self.pool(x).flatten(1))


# ----------------------------------------------------------------------------------------
# Attention and encoders
# ----------------------------------------------------------------------------------------

def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the last two dims; returns (output, weights)."""
    if q.size(-1) != k.size(-1):
        raise ContractError(f"query dim {q.size(-1)} != key dim {k.size(-1)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.size(-1))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    """Self-attention when query is key; cross-attention when key/value come from the other stream."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        B, n, d = query.shape
        out, weights = attention(self._split(self.q_proj(query)), self._split(self.k_proj(key)),
                                 self._split(self.v_proj(value)))
        self.last_weights = weights.detach()
        out = self.dropout(out).transpose(1, 2).reshape(B, n, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Dropout(dropout),
                                 nn.Linear(ff_dim, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    """Post-norm MHSA + FF with residual connections."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.dropout(self.self_attn(x, x, x)))
        return self.norm2(x + self.dropout(self.ff(x)))


class PositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int = 512):
        super().__init__()
        position = torch.arange(max_len).unsqueeze(1)
        div = torch.exp(torch.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div)[:, :d_model // 2]
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[:x.size(1)].to(x.dtype)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.d_model = cfg.d_model
        self.pos = PositionalEncoding(cfg.d_model) if cfg.positional_encoding else None
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.size(-1) != self.d_model:
            raise ContractError(f"encoder expects d_model {self.d_model}, got {x.size(-1)}")
        if self.pos is not None:
            x = self.pos(x)
        for layer in self.layers:
            x = layer(x)
        return x


class CrossModalLayer(nn.Module):
    """Per stream: MHCA (queries from own stream) -> MHSA -> FF, each post-norm residual."""

    def __init__(self, cfg: CrossModalEncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.speech_cross = MultiHeadAttention(d, cfg.n_heads, cfg.dropout)
        self.vision_cross = MultiHeadAttention(d, cfg.n_heads, cfg.dropout)
        self.speech_self = MultiHeadAttention(d, cfg.n_heads, cfg.dropout)
        self.vision_self = MultiHeadAttention(d, cfg.n_heads, cfg.dropout)
        self.speech_ff = FeedForward(d, cfg.ff_dim, cfg.dropout)
        self.vision_ff = FeedForward(d, cfg.ff_dim, cfg.dropout)
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(6))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, speech: torch.Tensor, vision: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        s = self.norms[0](speech + self.dropout(self.speech_cross(speech, vision, vision)))
        v = self.norms[1](vision + self.dropout(self.vision_cross(vision, speech, speech)))
        s = self.norms[2](s + self.dropout(self.speech_self(s, s, s)))
        v = self.norms[3](v + self.dropout(self.vision_self(v, v, v)))
        s = self.norms[4](s + self.dropout(self.speech_ff(s)))
        v = self.norms[5](v + self.dropout(self.vision_ff(v)))
        return s, v


class CrossModalEncoder(nn.Module):
    def __init__(self, cfg: CrossModalEncoderConfig):
        super().__init__()
        self.speech_encoder = Encoder(cfg.stream_encoder())
        self.vision_encoder = Encoder(cfg.stream_encoder())
        self.layers = nn.ModuleList(CrossModalLayer(cfg) for _ in range(cfg.n_cross_layers))

    def forward(self, speech: torch.Tensor, vision: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if speech.shape[:2] != vision.shape[:2]:
            raise ContractError(f"stream shapes differ: speech {tuple(speech.shape)}, vision {tuple(vision.shape)}")
        s, v = self.speech_encoder(speech), self.vision_encoder(vision)
        for layer in self.layers:
            s, v = layer(s, v)
        return s, v


class Classifier(nn.Module):
    def __init__(self, d_in: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, d_in // 2), nn.ReLU(), nn.Linear(d_in // 2, N_CLASSES))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ----------------------------------------------------------------------------------------
# Full detector
# ----------------------------------------------------------------------------------------

class GestureDetector(nn.Module):

    def __init__(self, cfg: ModelConfig, adjacency: np.ndarray):
        super().__init__()
        self.cfg = cfg
        fusion = cfg.fusion
        d = cfg.embed_dim
        self._noise_calls = 0

        if cfg.uses_vision:
            self.vision_backbone = VisionBackbone(cfg.vision, adjacency)
        if cfg.uses_speech_input:
            self.speech_backbone = SpeechBackbone(cfg.speech)

        if fusion in (FusionVariant.SPEECH, FusionVariant.LATE):
            self.speech_encoder = Encoder(cfg.encoder)
            self.speech_classifier = Classifier(d)
        if fusion in (FusionVariant.VISION, FusionVariant.LATE):
            self.vision_encoder = Encoder(cfg.encoder)
            self.vision_classifier = Classifier(d)
        if fusion == FusionVariant.EARLY:
            self.early_encoder = Encoder(cfg.early_encoder)
            self.classifier = Classifier(2 * d)
        if fusion == FusionVariant.CROSS:
            self.cross_encoder = CrossModalEncoder(cfg.cross)
            self.classifier = Classifier(2 * d)

    @property
    def variant(self) -> FusionVariant:
        return self.cfg.variant

    def embed_vision(self, pose: torch.Tensor) -> torch.Tensor:
        """(B, n, 3, 15, 27) -> (B, n, d); each row depends only on its own window."""
        if pose.dim() != 5 or tuple(pose.shape[2:]) != (POSE_CHANNELS, WINDOW_FRAMES, N_JOINTS):
            raise ContractError(f"pose batch must be (B, n, 3, {WINDOW_FRAMES}, {N_JOINTS}), got {tuple(pose.shape)}")
        B, n = pose.shape[:2]
        return self.vision_backbone(pose.reshape(B * n, *pose.shape[2:])).view(B, n, -1)

    def embed_speech(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, n, 64, T) -> (B, n, d)."""
        if mel.dim() != 4 or mel.shape[2] != N_MELS:
            raise ContractError(f"mel batch must be (B, n, {N_MELS}, T), got {tuple(mel.shape)}")
        B, n = mel.shape[:2]
        return self.speech_backbone(mel.reshape(B * n, *mel.shape[2:])).view(B, n, -1)

    def _noise(self, B: int, n: int, like: torch.Tensor) -> torch.Tensor:
        seed = self.cfg.noise_seed
        if self.training:
            seed += self._noise_calls
            self._noise_calls += 1
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn(B, n, self.cfg.embed_dim, generator=gen, dtype=like.dtype).to(like.device)

    def forward(self, pose: Optional[torch.Tensor], mel: Optional[torch.Tensor]) -> torch.Tensor:
        cfg = self.cfg
        fusion = cfg.fusion
        v = s = None
        if cfg.uses_vision:
            if pose is None:
                raise ContractError(f"variant {cfg.variant.value} needs pose input")
            v = self.embed_vision(pose)
        if cfg.variant == FusionVariant.SANITY:
            s = self._noise(v.shape[0], v.shape[1], v)
        elif cfg.uses_speech_input:
            if mel is None:
                raise ContractError(f"variant {cfg.variant.value} needs mel input")
            s = self.embed_speech(mel)
        if v is not None and s is not None and v.shape[:2] != s.shape[:2]:
            raise ContractError(f"pose and mel sequences differ: {tuple(v.shape[:2])} vs {tuple(s.shape[:2])}")

        if fusion == FusionVariant.SPEECH:
            return self.speech_classifier(self.speech_encoder(s))
        if fusion == FusionVariant.VISION:
            return self.vision_classifier(self.vision_encoder(v))
        if fusion == FusionVariant.LATE:
            speech_logits = self.speech_classifier(self.speech_encoder(s))
            vision_logits = self.vision_classifier(self.vision_encoder(v))
            return (speech_logits + vision_logits) / 2.0
        if fusion == FusionVariant.EARLY:
            return self.classifier(self.early_encoder(torch.cat([v, s], dim=-1)))
        s, v = self.cross_encoder(s, v)
        return self.classifier(torch.cat([v, s], dim=-1))

    @torch.no_grad()
    def predict_proba(self, pose: Optional[torch.Tensor], mel: Optional[torch.Tensor]) -> torch.Tensor:
        """(B, n, 2) softmax probabilities."""
        return torch.softmax(self.forward(pose, mel), dim=-1)


def build_model(cfg: ModelConfig, adjacency: np.ndarray) -> GestureDetector:
    return GestureDetector(cfg, adjacency)


def stack_mels(mels: Sequence[np.ndarray]) -> np.ndarray:
    """Stack (64, T) spectrograms of one sequence; mixed T is a contract error."""
    frame_counts = {int(m.shape[-1]) for m in mels}
    if len(frame_counts) > 1:
        raise ContractError(f"mixed spectrogram lengths in one sequence: {sorted(frame_counts)}")
    return np.stack([np.asarray(m, dtype=np.float32) for m in mels])


def save_checkpoint(path: str | Path, model: GestureDetector, extra: Optional[Dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    torch.save({
        "config": to_plain(model.cfg),
        "state_dict": state,
        "parameter_shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }, path)


def load_checkpoint(path: str | Path, adjacency: np.ndarray) -> Tuple[GestureDetector, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_plain(ModelConfig, payload["config"])
    model = GestureDetector(cfg, adjacency)
    for name, shape in payload.get("parameter_shapes", {}).items():
        tensor = payload["state_dict"].get(name)
        if tensor is None or list(tensor.shape) != list(shape):
            raise ContractError(f"{path}: parameter {name} does not match its recorded shape")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
