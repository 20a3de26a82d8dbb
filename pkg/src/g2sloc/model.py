"""Bundled trainable state and checkpoint round-tripping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import G2SLocError
from .optimizer import OptimizerParams, init_optimizer_params
from .synthesis import SynthesisParams, init_synthesis_params
from .tensorcore import Parameter, io


@dataclass
class ModelParams:
    synthesis: SynthesisParams
    optimizer: OptimizerParams

    def parameters(self) -> list[Parameter]:
        params = self.synthesis.parameters() + self.optimizer.parameters()
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise G2SLocError("duplicate parameter names in model")
        return params


def init_model(cfg: Config) -> ModelParams:
    """All parameters seeded from the single config seed."""
    rng = np.random.default_rng(cfg.seed)
    scene = cfg.scene_config()
    ground_coarse_height = scene.ground_height // 8
    synthesis = init_synthesis_params(
        rng,
        channels=cfg.channels,
        heads=cfg.heads,
        radius=cfg.mhca_radius,
        ground_coarse_height=ground_coarse_height,
    )
    sat_sizes = tuple(
        (scene.texture_size // s, scene.texture_size // s) for s in (8, 4, 2)
    )
    optimizer = init_optimizer_params(
        rng,
        channels=cfg.channels,
        map_sizes=sat_sizes,
        dim=cfg.opt_dim,
        heads=cfg.heads,
        window=cfg.swin_window,
        max_step_deg=cfg.max_step_deg,
        max_step_m=cfg.max_step_m,
    )
    return ModelParams(synthesis=synthesis, optimizer=optimizer)


def save_model(directory, model: ModelParams, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {p.name: p.data for p in model.parameters()}
    if extra:
        tensors.update(extra)
    io.save_checkpoint(directory, tensors)


def load_model(directory, cfg: Config) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, leftover tensors)."""
    tensors = io.load_checkpoint(directory)
    model = init_model(cfg)
    leftovers = dict(tensors)
    for param in model.parameters():
        if param.name not in tensors:
            raise G2SLocError(f"checkpoint missing tensor {param.name}")
        loaded = leftovers.pop(param.name)
        if loaded.shape != param.data.shape:
            raise G2SLocError(
                f"checkpoint tensor {param.name} has shape {loaded.shape}, "
                f"expected {param.data.shape}"
            )
        param.data = loaded
    return model, leftovers
