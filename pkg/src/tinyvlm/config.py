"""Model configuration files: fusion mode, connector kind, shapes, adapters.

INI text with a [model] section (and an optional [adapters] one); the CLI
reads these to build the same model for train, eval, and inspect runs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterConfig
from .connectors import ConnectorConfig
from .model import VLM, DecoderLMConfig, FusionConfig, VisionEncoderConfig
from .vocab import Vocabulary


@dataclass
class ModelSpec:
    fusion: str = "self_attention"
    connector: str = "pixel_shuffle"  # or "linear" / "perceiver" / "none"
    tile_side: int = 364
    patch_side: int = 14
    grid_max: int = 5
    vision_dim: int = 64
    vision_depth: int = 2
    vision_heads: int = 2
    lm_dim: int = 128
    lm_depth: int = 4
    lm_heads: int = 4
    vocab_size: int = 300
    max_seq_len: int = 1024
    latent_count: int = 64
    shuffle_factor: int = 2
    cross_period: int = 4
    cross_gate_init: float = 0.0
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_dora: bool = True
    adapter_target: tuple[str, ...] = (".attn.", "connector")

    def __post_init__(self) -> None:
        if self.tile_side % self.patch_side:
            raise ValueError(
                f"tile_side {self.tile_side} not divisible by patch_side {self.patch_side}"
            )

    def build_vocab(self) -> Vocabulary:
        return Vocabulary(grid_max=self.grid_max)

    def build(self, seed: int = 0) -> tuple[VLM, Vocabulary]:
        vocab = self.build_vocab()
        if self.vocab_size < vocab.size:
            raise ValueError(
                f"vocab_size {self.vocab_size} smaller than token vocabulary {vocab.size}"
            )
        rng = np.random.default_rng(seed)
        vision_cfg = VisionEncoderConfig(
            patch_side=self.patch_side,
            dim=self.vision_dim,
            depth=self.vision_depth,
            heads=self.vision_heads,
        )
        lm_cfg = DecoderLMConfig(
            vocab_size=self.vocab_size,
            dim=self.lm_dim,
            depth=self.lm_depth,
            heads=self.lm_heads,
            max_seq_len=self.max_seq_len,
        )
        fusion_cfg = FusionConfig(
            mode=self.fusion,
            cross_period=self.cross_period,
            cross_gate_init=self.cross_gate_init,
        )
        connector_cfg = None
        if self.connector != "none":
            connector_cfg = ConnectorConfig(
                kind=self.connector,
                vision_dim=self.vision_dim,
                text_dim=self.lm_dim,
                latent_count=self.latent_count,
                shuffle_factor_r=self.shuffle_factor,
            )
        model = VLM(vision_cfg, lm_cfg, fusion_cfg, connector_cfg, rng, tile_side=self.tile_side)
        return model, vocab

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            rank=self.adapter_rank,
            scale_alpha=self.adapter_alpha,
            dora=self.adapter_dora,
            target=self.adapter_target,
        )


def load_model_spec(path: str | Path) -> ModelSpec:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise OSError(f"cannot read model config {path}")
    spec = ModelSpec()
    if "model" in parser:
        sec = parser["model"]
        spec.fusion = sec.get("fusion", spec.fusion).strip()
        spec.connector = sec.get("connector", spec.connector).strip()
        spec.tile_side = sec.getint("tile_side", spec.tile_side)
        spec.patch_side = sec.getint("patch_side", spec.patch_side)
        spec.grid_max = sec.getint("grid_max", spec.grid_max)
        spec.vision_dim = sec.getint("vision_dim", spec.vision_dim)
        spec.vision_depth = sec.getint("vision_depth", spec.vision_depth)
        spec.vision_heads = sec.getint("vision_heads", spec.vision_heads)
        spec.lm_dim = sec.getint("lm_dim", spec.lm_dim)
        spec.lm_depth = sec.getint("lm_depth", spec.lm_depth)
        spec.lm_heads = sec.getint("lm_heads", spec.lm_heads)
        spec.vocab_size = sec.getint("vocab_size", spec.vocab_size)
        spec.max_seq_len = sec.getint("max_seq_len", spec.max_seq_len)
        spec.latent_count = sec.getint("latent_count", spec.latent_count)
        spec.shuffle_factor = sec.getint("shuffle_factor", spec.shuffle_factor)
        spec.cross_period = sec.getint("cross_period", spec.cross_period)
        spec.cross_gate_init = sec.getfloat("cross_gate_init", spec.cross_gate_init)
    if "adapters" in parser:
        sec = parser["adapters"]
        spec.adapter_rank = sec.getint("rank", spec.adapter_rank)
        spec.adapter_alpha = sec.getfloat("alpha", spec.adapter_alpha)
        spec.adapter_dora = sec.getboolean("dora", spec.adapter_dora)
        if "target" in sec:
            spec.adapter_target = tuple(
                t.strip() for t in sec["target"].split(",") if t.strip()
            )
    spec.__post_init__()
    return spec


def dump_model_spec(spec: ModelSpec, path: str | Path) -> None:
    lines = [
        "[model]",
        f"fusion = {spec.fusion}",
        f"connector = {spec.connector}",
        f"tile_side = {spec.tile_side}",
        f"patch_side = {spec.patch_side}",
        f"grid_max = {spec.grid_max}",
        f"vision_dim = {spec.vision_dim}",
        f"vision_depth = {spec.vision_depth}",
        f"vision_heads = {spec.vision_heads}",
        f"lm_dim = {spec.lm_dim}",
        f"lm_depth = {spec.lm_depth}",
        f"lm_heads = {spec.lm_heads}",
        f"vocab_size = {spec.vocab_size}",
        f"max_seq_len = {spec.max_seq_len}",
        f"latent_count = {spec.latent_count}",
        f"shuffle_factor = {spec.shuffle_factor}",
        f"cross_period = {spec.cross_period}",
        f"cross_gate_init = {spec.cross_gate_init:g}",
        "",
        "[adapters]",
        f"rank = {spec.adapter_rank}",
        f"alpha = {spec.adapter_alpha:g}",
        f"dora = {str(spec.adapter_dora).lower()}",
        f"target = {', '.join(spec.adapter_target)}",
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")
