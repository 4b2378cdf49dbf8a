"""Convolutional tablature model with tablature, deviation and onset heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .features import SpectralFeatures

HEADS = ("tablature", "deviation", "onset")


@dataclass
class ModelConfig:
    in_channels: int = 6
    n_bins: int = 144
    window_frames: int = 9
    conv_filters: tuple[int, int, int] = (16, 32, 48)
    dropout_rates: dict = field(default_factory=lambda: {"block2": 0.5, "block3": 0.25, "head": 0.1})
    n_strings: int = 6
    n_fret_classes: int = 20
    heads_enabled: dict = field(
        default_factory=lambda: {"tablature": True, "deviation": True, "onset": True})

    def __post_init__(self):
        self.conv_filters = tuple(self.conv_filters)
        if self.window_frames != 9:
            raise ValueError("window_frames must be 9")
        if len(self.conv_filters) != 3:
            raise ValueError("conv_filters needs exactly 3 entries")
        if self.n_bins % 4:
            raise ValueError("n_bins must be divisible by 4 (two frequency poolings)")
        if not self.heads_enabled.get("tablature", False):
            raise ValueError("the tablature head cannot be disabled")
        unknown = set(self.heads_enabled) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")

    @classmethod
    def for_features(cls, mode: str, **kwargs) -> ModelConfig:
        if mode == "cqt":
            return cls(in_channels=1, n_bins=192, **kwargs)
        return cls(in_channels=6, n_bins=144, **kwargs)

    @property
    def embedding_dim(self) -> int:
        return self.conv_filters[2] * (self.n_bins // 4)

    @property
    def n_outputs(self) -> int:
        return self.n_strings * self.n_fret_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d


def _conv_block(c_in, c_out, time_pad):
    layers = []
    for c in (c_in, c_out):
        # frequency is always padded; time only where requested
        layers += [nn.Conv2d(c, c_out, kernel_size=3, padding=(1, 1 if time_pad else 0)),
                   nn.BatchNorm2d(c_out), nn.ReLU()]
    return nn.Sequential(*layers)


class Head(nn.Module):
    def __init__(self, dim_in, n_out, dropout):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(dim_in, dim_in // 2), nn.ReLU(),
                                    nn.Dropout(dropout), nn.Linear(dim_in // 2, n_out))

    def forward(self, x):
        return self.layers(x)


class TablatureModel(nn.Module):
    """
    Input: [batch, channels, bins, 9] context windows.
    Output: dict of head name -> [batch, n_strings, n_fret_classes] logits
    (string-major, fret-minor), ``None`` for disabled heads.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        f1, f2, f3 = cfg.conv_filters
        self.block1 = _conv_block(cfg.in_channels, f1, time_pad=True)
        self.block2 = nn.Sequential(_conv_block(f1, f2, time_pad=False),
                                    nn.MaxPool2d(kernel_size=(2, 1), stride=(2, 1)),
                                    nn.Dropout(cfg.dropout_rates["block2"]))
        self.block3 = nn.Sequential(_conv_block(f2, f3, time_pad=False),
                                    nn.MaxPool2d(kernel_size=(2, 1), stride=(2, 1)),
                                    nn.Dropout(cfg.dropout_rates["block3"]))
        self.heads = nn.ModuleDict({
            name: Head(cfg.embedding_dim, cfg.n_outputs, cfg.dropout_rates["head"])
            for name in HEADS if cfg.heads_enabled.get(name, False)
        })

    def embed(self, windows):
        expected = (self.cfg.in_channels, self.cfg.n_bins, self.cfg.window_frames)
        if windows.dim() != 4 or tuple(windows.shape[1:]) != expected:
            raise ValueError(f"expected windows of shape [B, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}], got {tuple(windows.shape)}")
        x = self.block3(self.block2(self.block1(windows)))
        return x.flatten(1)

    def forward(self, windows):
        emb = self.embed(windows)
        shape = (-1, self.cfg.n_strings, self.cfg.n_fret_classes)
        return {name: self.heads[name](emb).view(shape) if name in self.heads else None
                for name in HEADS}


def init_model(cfg: ModelConfig, seed: int = 0) -> TablatureModel:
    """Build a model with parameters drawn from a generator seeded by ``seed``."""
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = TablatureModel(cfg)
    finally:
        torch.random.set_rng_state(state)
    return model


def windowize(features, window_frames: int = 9):
    """
    One centered context window per frame, edges replicated.

    Accepts SpectralFeatures or a [C, F, T] array/tensor and returns a
    [T, C, F, window_frames] tensor.
    """
    mags = features.magnitudes if isinstance(features, SpectralFeatures) else features
    x = torch.as_tensor(np.asarray(mags) if not isinstance(mags, torch.Tensor) else mags)
    if x.shape[-1] == 0:
        raise ValueError("cannot windowize empty features")
    half = window_frames // 2
    padded = torch.cat([x[..., :1].expand(*x.shape[:-1], half), x,
                        x[..., -1:].expand(*x.shape[:-1], half)], dim=-1)
    # [C, F, T, W] -> [T, C, F, W]
    return padded.unfold(-1, window_frames, 1).permute(2, 0, 1, 3).contiguous()
