"""Run configuration: every tunable constant, YAML round-trip, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from .losses import LossWeights


@dataclass
class RunConfig:
    """Flat bag of constants for a tracking-and-mapping run.

    A saved snapshot reproduces the run bit-for-bit in sequential mode.
    """

    seed: int = 0
    workers: int = 1

    # Tracking
    tracking_iterations: int = 100
    tracking_lr_rho: float = 1.6e-3
    tracking_lr_theta: float = 5e-4
    tracking_lr_exposure: float = 1e-3
    tracking_alpha_mask: float = 0.5
    tracking_divergence_factor: float = 10.0

    # Mapping
    mapping_iterations: int = 60
    lr_means: float = 1.6e-3
    lr_frame: float = 1e-3
    lr_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_pose_rho: float = 1e-3
    lr_pose_theta: float = 3e-4
    lr_warp: float = 1e-4
    lr_exposure: float = 1e-3
    window_capacity: int = 8
    random_history: int = 2
    keyframe_every: int = 1
    global_iterations: int = 0

    # Losses (photometric/depth/normal/isotropic weights + rigidity graph)
    loss_photometric: float = 0.9
    loss_depth: float = 0.1
    loss_normal: float = 0.002
    loss_isotropic: float = 10.0
    arap_neighbors: int = 20
    arap_radius: float = 0.05
    arap_decay: float = 500.0

    # Gaussian management
    insertion_stride: int = 4
    insertion_alpha_threshold: float = 0.5
    insertion_depth_threshold: float = 0.05
    opacity_init: float = 0.7
    prune_every: int = 100
    prune_opacity: float = 0.05
    unseen_epochs_limit: int = 3
    densify_grad_threshold: float = 2e-4
    split_scale: float = 0.1

    # Warp field
    warp_enabled: bool = True
    warp_preset: str = "small"
    warp_position_frequencies: int = 4
    warp_time_frequencies: int = 1

    # Rendering / logging
    tile_size: int = 16
    log_losses: bool = False

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            photometric=self.loss_photometric,
            depth=self.loss_depth,
            normal=self.loss_normal,
            isotropic=self.loss_isotropic,
            arap_neighbors=self.arap_neighbors,
            arap_radius=self.arap_radius,
            arap_decay=self.arap_decay,
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_yaml(text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        return RunConfig.from_dict(data)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    def apply_overrides(self, pairs) -> "RunConfig":
        """`key=value` strings, parsed to the field's type."""
        data = dataclasses.asdict(self)
        fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
        for pair in pairs:
            key, _, raw = pair.partition("=")
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            data[key] = yaml.safe_load(raw)
        return RunConfig.from_dict(data)
