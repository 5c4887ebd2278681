"""Connectors mapping vision-encoder states into the language-model space.

Three families: a plain affine map (token count preserved), a single-block
perceiver resampler (fixed latent count regardless of input length), and
pixel shuffle (each r x r neighborhood of the state grid concatenated
channel-wise, cutting token count by r^2, then projected). The shuffle
reindexing is a bijection; nothing is discarded before the projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class ConnectorConfig:
    kind: Literal["linear", "perceiver", "pixel_shuffle"]
    vision_dim: int
    text_dim: int
    latent_count: int = 64
    shuffle_factor_r: int = 2
    latent_pos_embed: bool = False  # optional 2-d-ish positions on latents, off by default

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "perceiver", "pixel_shuffle"):
            raise ValueError(f"unknown connector kind {self.kind!r}")
        if self.latent_count < 1:
            raise ValueError(f"latent_count must be >= 1, got {self.latent_count}")
        if self.shuffle_factor_r < 1:
            raise ValueError(f"shuffle_factor_r must be >= 1, got {self.shuffle_factor_r}")


@dataclass
class VisualTokens:
    count: int
    dim: int
    values: Tensor
    origin: int | str = "global"  # tile index, or "global"


def _normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class LinearConnector:
    """Affine projection; keeps every visual state (no pooling)."""

    def __init__(self, cfg: ConnectorConfig, rng: np.random.Generator, prefix: str = "connector"):
        if cfg.kind != "linear":
            raise ValueError(f"LinearConnector needs kind='linear', got {cfg.kind!r}")
        self.cfg = cfg
        self.prefix = prefix
        self.w = _normal(rng, (cfg.vision_dim, cfg.text_dim), 1.0 / math.sqrt(cfg.vision_dim))
        self.b = Tensor(np.zeros(cfg.text_dim), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}

    def tokens_per_tile(self, grid_h: int, grid_w: int) -> int:
        return grid_h * grid_w

    def __call__(self, hidden: Tensor, grid_h: int, grid_w: int, origin: int | str = "global") -> VisualTokens:
        if hidden.ndim != 2 or hidden.shape[1] != self.cfg.vision_dim:
            raise ValueError(
                f"linear connector expects (M, {self.cfg.vision_dim}) states, got {hidden.shape}"
            )
        out = ag.add(ag.matmul(hidden, self.w), self.b)
        return VisualTokens(count=out.shape[0], dim=out.shape[1], values=out, origin=origin)


class PerceiverResampler:
    """Learned latents cross-attend over the states; one attention block plus
    one pre-norm feed-forward, then an affine map to the text width."""

    def __init__(self, cfg: ConnectorConfig, rng: np.random.Generator, prefix: str = "connector"):
        if cfg.kind != "perceiver":
            raise ValueError(f"PerceiverResampler needs kind='perceiver', got {cfg.kind!r}")
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.vision_dim
        k = cfg.latent_count
        s = 1.0 / math.sqrt(d)
        self.latents = _normal(rng, (k, d), 1.0)
        self.latent_pos = _normal(rng, (k, d), 1.0) if cfg.latent_pos_embed else None
        self.ln_lat_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_lat_b = Tensor(np.zeros(d), requires_grad=True)
        self.ln_src_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_src_b = Tensor(np.zeros(d), requires_grad=True)
        self.wq = _normal(rng, (d, d), s)
        self.wk = _normal(rng, (d, d), s)
        self.wv = _normal(rng, (d, d), s)
        self.wo = _normal(rng, (d, d), s)
        self.ln_ff_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_ff_b = Tensor(np.zeros(d), requires_grad=True)
        self.ff1 = _normal(rng, (d, 4 * d), s)
        self.ff1_b = Tensor(np.zeros(4 * d), requires_grad=True)
        self.ff2 = _normal(rng, (4 * d, d), 1.0 / math.sqrt(4 * d))
        self.ff2_b = Tensor(np.zeros(d), requires_grad=True)
        self.w_out = _normal(rng, (d, cfg.text_dim), s)
        self.b_out = Tensor(np.zeros(cfg.text_dim), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        p = self.prefix
        named = {
            f"{p}.latents": self.latents,
            f"{p}.ln_lat_g": self.ln_lat_g,
            f"{p}.ln_lat_b": self.ln_lat_b,
            f"{p}.ln_src_g": self.ln_src_g,
            f"{p}.ln_src_b": self.ln_src_b,
            f"{p}.wq": self.wq,
            f"{p}.wk": self.wk,
            f"{p}.wv": self.wv,
            f"{p}.wo": self.wo,
            f"{p}.ln_ff_g": self.ln_ff_g,
            f"{p}.ln_ff_b": self.ln_ff_b,
            f"{p}.ff1": self.ff1,
            f"{p}.ff1_b": self.ff1_b,
            f"{p}.ff2": self.ff2,
            f"{p}.ff2_b": self.ff2_b,
            f"{p}.w_out": self.w_out,
            f"{p}.b_out": self.b_out,
        }
        if self.latent_pos is not None:
            named[f"{p}.latent_pos"] = self.latent_pos
        return named

    def tokens_per_tile(self, grid_h: int, grid_w: int) -> int:
        return self.cfg.latent_count

    def _attend(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        lat = self.latents
        if self.latent_pos is not None:
            lat = ag.add(lat, self.latent_pos)
        q_in = ag.layer_norm(lat, self.ln_lat_g, self.ln_lat_b)
        kv_in = ag.layer_norm(hidden, self.ln_src_g, self.ln_src_b)
        q = ag.matmul(q_in, self.wq)
        k = ag.matmul(kv_in, self.wk)
        v = ag.matmul(kv_in, self.wv)
        scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
        attn = ag.softmax(scores, axis=-1)
        pooled = ag.matmul(ag.matmul(attn, v), self.wo)
        return ag.add(lat, pooled), attn

    def attention_weights(self, hidden: Tensor) -> np.ndarray:
        """(latent_count, M) attention matrix; each row sums to 1."""
        _, attn = self._attend(hidden)
        return attn.data

    def __call__(self, hidden: Tensor, grid_h: int, grid_w: int, origin: int | str = "global") -> VisualTokens:
        if hidden.ndim != 2 or hidden.shape[1] != self.cfg.vision_dim:
            raise ValueError(
                f"perceiver expects (M, {self.cfg.vision_dim}) states, got {hidden.shape}"
            )
        if hidden.shape[0] == 0:
            raise ValueError("perceiver received an empty state sequence")
        x, _ = self._attend(hidden)
        h = ag.layer_norm(x, self.ln_ff_g, self.ln_ff_b)
        h = ag.add(ag.matmul(h, self.ff1), self.ff1_b)
        h = ag.gelu(h)
        h = ag.add(ag.matmul(h, self.ff2), self.ff2_b)
        x = ag.add(x, h)
        out = ag.add(ag.matmul(x, self.w_out), self.b_out)
        return VisualTokens(count=out.shape[0], dim=out.shape[1], values=out, origin=origin)


def pixel_shuffle_reindex(hidden: Tensor, grid_h: int, grid_w: int, r: int) -> Tensor:
    """(grid_h*grid_w, d) -> (grid_h*grid_w/r^2, d*r^2); each output row is the
    row-major concatenation of one r x r neighborhood. Pure reindexing."""
    if grid_h % r or grid_w % r:
        raise ValueError(
            f"pixel shuffle: grid {grid_h}x{grid_w} not divisible by r={r}"
        )
    m, d = hidden.shape
    if m != grid_h * grid_w:
        raise ValueError(f"pixel shuffle: {m} states != grid {grid_h}x{grid_w}")
    x = ag.reshape(hidden, (grid_h // r, r, grid_w // r, r, d))
    x = ag.transpose(x, (0, 2, 1, 3, 4))
    return ag.reshape(x, ((grid_h // r) * (grid_w // r), r * r * d))


def pixel_shuffle_inverse(shuffled: np.ndarray, grid_h: int, grid_w: int, r: int) -> np.ndarray:
    """Exact inverse of the reindexing, for round-trip checks."""
    d = shuffled.shape[1] // (r * r)
    x = shuffled.reshape(grid_h // r, grid_w // r, r, r, d)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(grid_h * grid_w, d)


class PixelShuffleConnector:
    """Space-to-depth pooling by r^2 followed by an affine projection."""

    def __init__(self, cfg: ConnectorConfig, rng: np.random.Generator, prefix: str = "connector"):
        if cfg.kind != "pixel_shuffle":
            raise ValueError(
                f"PixelShuffleConnector needs kind='pixel_shuffle', got {cfg.kind!r}"
            )
        self.cfg = cfg
        self.prefix = prefix
        width = cfg.vision_dim * cfg.shuffle_factor_r**2
        self.w = _normal(rng, (width, cfg.text_dim), 1.0 / math.sqrt(width))
        self.b = Tensor(np.zeros(cfg.text_dim), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.w": self.w, f"{self.prefix}.b": self.b}

    def tokens_per_tile(self, grid_h: int, grid_w: int) -> int:
        r = self.cfg.shuffle_factor_r
        if grid_h % r or grid_w % r:
            raise ValueError(f"pixel shuffle: grid {grid_h}x{grid_w} not divisible by r={r}")
        return (grid_h * grid_w) // (r * r)

    def __call__(self, hidden: Tensor, grid_h: int, grid_w: int, origin: int | str = "global") -> VisualTokens:
        if hidden.ndim != 2 or hidden.shape[1] != self.cfg.vision_dim:
            raise ValueError(
                f"pixel shuffle expects (M, {self.cfg.vision_dim}) states, got {hidden.shape}"
            )
        packed = pixel_shuffle_reindex(hidden, grid_h, grid_w, self.cfg.shuffle_factor_r)
        out = ag.add(ag.matmul(packed, self.w), self.b)
        return VisualTokens(count=out.shape[0], dim=out.shape[1], values=out, origin=origin)


Connector = LinearConnector | PerceiverResampler | PixelShuffleConnector


def build_connector(cfg: ConnectorConfig, rng: np.random.Generator, prefix: str = "connector") -> Connector:
    cls = {
        "linear": LinearConnector,
        "perceiver": PerceiverResampler,
        "pixel_shuffle": PixelShuffleConnector,
    }[cfg.kind]
    return cls(cfg, rng, prefix)
