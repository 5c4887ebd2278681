"""Tiny vision encoder and decoder LM with both fusion architectures.

Self-attention fusion splices connector outputs into the text embedding
sequence at the image slots and runs one causal decoder over the merged
sequence. Cross-attention fusion leaves the text sequence alone and inserts
tanh-gated cross-attention blocks (language queries, vision keys/values)
after every `cross_period` decoder blocks; gates start at zero so the fused
model is initially bit-identical to the text-only decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .assembler import MultimodalSequence
from .connectors import Connector, ConnectorConfig, VisualTokens, build_connector
from .image import PatchSequence, RawImage, TileGrid, patchify


@dataclass
class VisionEncoderConfig:
    patch_side: int = 14
    dim: int = 64
    depth: int = 2
    heads: int = 2

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"vision dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class DecoderLMConfig:
    vocab_size: int = 300
    dim: int = 128
    depth: int = 4
    heads: int = 4
    max_seq_len: int = 1024

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"lm dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class FusionConfig:
    mode: Literal["self_attention", "cross_attention"] = "self_attention"
    cross_period: int = 4
    cross_gate_init: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("self_attention", "cross_attention"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.cross_period < 1:
            raise ValueError(f"cross_period must be >= 1, got {self.cross_period}")


class Linear:
    def __init__(
        self,
        rng: np.random.Generator,
        d_in: int,
        d_out: int,
        prefix: str,
        bias: bool = True,
        init_std: float | None = None,
    ):
        std = init_std if init_std is not None else 1.0 / math.sqrt(d_in)
        self.prefix = prefix
        self.w = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.adapter = None  # attached by adapters.apply_adapters

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.prefix}.w": self.w}
        if self.b is not None:
            out[f"{self.prefix}.b"] = self.b
        if self.adapter is not None:
            out.update(self.adapter.params())
        return out

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is not None:
            return self.adapter(x, self)
        y = ag.matmul(x, self.w)
        if self.b is not None:
            y = ag.add(y, self.b)
        return y


class LayerNorm:
    def __init__(self, d: int, prefix: str):
        self.prefix = prefix
        self.g = Tensor(np.ones(d), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.g": self.g, f"{self.prefix}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.g, self.b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.shape
    return ag.transpose(ag.reshape(x, (t, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return ag.reshape(ag.transpose(x, (1, 0, 2)), (t, h * dh))


def _causal_bias(heads: int, t: int) -> Tensor:
    mask = np.triu(np.full((t, t), -1e30), k=1)
    return Tensor(np.broadcast_to(mask, (heads, t, t)).copy())


class SelfAttention:
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, prefix: str, causal: bool):
        self.heads = heads
        self.causal = causal
        self.wq = Linear(rng, dim, dim, f"{prefix}.wq", bias=False)
        self.wk = Linear(rng, dim, dim, f"{prefix}.wk", bias=False)
        self.wv = Linear(rng, dim, dim, f"{prefix}.wv", bias=False)
        self.wo = Linear(rng, dim, dim, f"{prefix}.wo", bias=False)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out.update(lin.params())
        return out

    def __call__(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        dh = x.shape[1] // self.heads
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        scores = ag.scale(ag.bmm(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        if self.causal:
            scores = ag.add(scores, _causal_bias(self.heads, t))
        ctx = ag.bmm(ag.softmax(scores, axis=-1), v)
        return self.wo(_merge_heads(ctx))


class CrossAttention:
    """Queries from the language stream, keys/values from vision features."""

    def __init__(self, rng: np.random.Generator, dim: int, mem_dim: int, heads: int, prefix: str):
        self.heads = heads
        self.wq = Linear(rng, dim, dim, f"{prefix}.wq", bias=False)
        self.wk = Linear(rng, mem_dim, dim, f"{prefix}.wk", bias=False)
        self.wv = Linear(rng, mem_dim, dim, f"{prefix}.wv", bias=False)
        self.wo = Linear(rng, dim, dim, f"{prefix}.wo", bias=False)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out.update(lin.params())
        return out

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        dh = x.shape[1] // self.heads
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(memory), self.heads)
        v = _split_heads(self.wv(memory), self.heads)
        scores = ag.scale(ag.bmm(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        ctx = ag.bmm(ag.softmax(scores, axis=-1), v)
        return self.wo(_merge_heads(ctx))


class FeedForward:
    def __init__(self, rng: np.random.Generator, dim: int, prefix: str, mult: int = 4):
        self.fc1 = Linear(rng, dim, mult * dim, f"{prefix}.fc1")
        self.fc2 = Linear(rng, mult * dim, dim, f"{prefix}.fc2")

    def params(self) -> dict[str, Tensor]:
        return {**self.fc1.params(), **self.fc2.params()}

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerBlock:
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, prefix: str, causal: bool):
        self.ln1 = LayerNorm(dim, f"{prefix}.ln1")
        self.attn = SelfAttention(rng, dim, heads, f"{prefix}.attn", causal)
        self.ln2 = LayerNorm(dim, f"{prefix}.ln2")
        self.ff = FeedForward(rng, dim, f"{prefix}.ff")

    def params(self) -> dict[str, Tensor]:
        return {
            **self.ln1.params(),
            **self.attn.params(),
            **self.ln2.params(),
            **self.ff.params(),
        }

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x)))
        return ag.add(x, self.ff(self.ln2(x)))


class GatedCrossBlock:
    """Flamingo-style insertion: tanh-gated residuals, gates init at zero so
    the block is an exact identity until trained."""

    def __init__(self, rng: np.random.Generator, dim: int, mem_dim: int, heads: int, prefix: str, gate_init: float = 0.0):
        self.ln = LayerNorm(dim, f"{prefix}.ln")
        self.attn = CrossAttention(rng, dim, mem_dim, heads, f"{prefix}.attn")
        self.gate_attn = Tensor(np.asarray(float(gate_init)), requires_grad=True)
        self.ln_ff = LayerNorm(dim, f"{prefix}.ln_ff")
        self.ff = FeedForward(rng, dim, f"{prefix}.ff")
        self.gate_ff = Tensor(np.asarray(float(gate_init)), requires_grad=True)
        self.prefix = prefix

    def params(self) -> dict[str, Tensor]:
        return {
            **self.ln.params(),
            **self.attn.params(),
            f"{self.prefix}.gate_attn": self.gate_attn,
            **self.ln_ff.params(),
            **self.ff.params(),
            f"{self.prefix}.gate_ff": self.gate_ff,
        }

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = ag.add(x, ag.scale_by(self.attn(self.ln(x), memory), ag.tanh(self.gate_attn)))
        return ag.add(x, ag.scale_by(self.ff(self.ln_ff(x)), ag.tanh(self.gate_ff)))


class VisionEncoder:
    """Per-tile patch encoder with learned factorized 2-d positions."""

    def __init__(
        self,
        cfg: VisionEncoderConfig,
        rng: np.random.Generator,
        max_grid: int = 26,
        prefix: str = "vision",
    ):
        self.cfg = cfg
        self.max_grid = max_grid
        self.prefix = prefix
        patch_dim = cfg.patch_side * cfg.patch_side * 3
        self.patch_proj = Linear(rng, patch_dim, cfg.dim, f"{prefix}.patch_proj")
        self.row_pos = Tensor(rng.normal(0.0, 0.02, (max_grid, cfg.dim)), requires_grad=True)
        self.col_pos = Tensor(rng.normal(0.0, 0.02, (max_grid, cfg.dim)), requires_grad=True)
        self.blocks = [
            TransformerBlock(rng, cfg.dim, cfg.heads, f"{prefix}.block{i}", causal=False)
            for i in range(cfg.depth)
        ]
        self.ln_out = LayerNorm(cfg.dim, f"{prefix}.ln_out")

    def params(self) -> dict[str, Tensor]:
        out = {
            f"{self.prefix}.row_pos": self.row_pos,
            f"{self.prefix}.col_pos": self.col_pos,
        }
        out.update(self.patch_proj.params())
        for blk in self.blocks:
            out.update(blk.params())
        out.update(self.ln_out.params())
        return out

    def __call__(self, patches: PatchSequence) -> Tensor:
        n = patches.grid_h * patches.grid_w
        if patches.patches.shape[0] != n:
            raise ValueError(
                f"patch count {patches.patches.shape[0]} != grid "
                f"{patches.grid_h}x{patches.grid_w}"
            )
        x = self.patch_proj(patches.patches)
        x = ag.add_grid_pos(x, self.row_pos, self.col_pos, patches.grid_h, patches.grid_w)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x)


class DecoderLM:
    """Causal decoder with learned absolute positions and optional
    interleaved cross blocks."""

    def __init__(self, cfg: DecoderLMConfig, rng: np.random.Generator, prefix: str = "lm"):
        self.cfg = cfg
        self.prefix = prefix
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.dim)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.max_seq_len, cfg.dim)), requires_grad=True)
        self.blocks = [
            TransformerBlock(rng, cfg.dim, cfg.heads, f"{prefix}.block{i}", causal=True)
            for i in range(cfg.depth)
        ]
        self.ln_out = LayerNorm(cfg.dim, f"{prefix}.ln_out")
        self.unembed = Linear(rng, cfg.dim, cfg.vocab_size, f"{prefix}.unembed", bias=False)

    def params(self) -> dict[str, Tensor]:
        out = {
            f"{self.prefix}.tok_emb": self.tok_emb,
            f"{self.prefix}.pos_emb": self.pos_emb,
        }
        for blk in self.blocks:
            out.update(blk.params())
        out.update(self.ln_out.params())
        out.update(self.unembed.params())
        return out

    def embed(self, token_ids: list[int]) -> Tensor:
        if len(token_ids) > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {len(token_ids)} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        return ag.embedding(self.tok_emb, token_ids)

    def forward_embeddings(
        self,
        emb: Tensor,
        cross_blocks: dict[int, GatedCrossBlock] | None = None,
        memory: Tensor | None = None,
    ) -> Tensor:
        """emb: (T, dim) input embeddings (positions added here). cross_blocks
        maps a 1-indexed block count to the block applied after it."""
        t = emb.shape[0]
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = ag.add(emb, ag.slice_rows(self.pos_emb, 0, t))
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if cross_blocks and i in cross_blocks:
                x = cross_blocks[i](x, memory)
        return self.unembed(self.ln_out(x))


def neftune_embed(
    emb: Tensor,
    alpha: float,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Add uniform input noise scaled by alpha / sqrt(T * d) during training;
    exact passthrough in eval mode or at alpha == 0."""
    if alpha < 0:
        raise ValueError(f"neftune alpha must be >= 0, got {alpha}")
    if not training or alpha == 0.0:
        return emb
    if rng is None:
        rng = np.random.default_rng(0)
    t, d = emb.shape
    noise = rng.uniform(-1.0, 1.0, size=(t, d)) * (alpha / math.sqrt(t * d))
    return ag.add(emb, Tensor(noise))


class VLM:
    """Vision encoder + connector + decoder under one fusion mode."""

    def __init__(
        self,
        vision_cfg: VisionEncoderConfig,
        lm_cfg: DecoderLMConfig,
        fusion_cfg: FusionConfig,
        connector_cfg: ConnectorConfig | None,
        rng: np.random.Generator,
        tile_side: int = 364,
    ):
        if connector_cfg is not None and connector_cfg.vision_dim != vision_cfg.dim:
            raise ValueError(
                f"connector vision_dim {connector_cfg.vision_dim} != encoder dim {vision_cfg.dim}"
            )
        if connector_cfg is not None and connector_cfg.text_dim != lm_cfg.dim:
            raise ValueError(
                f"connector text_dim {connector_cfg.text_dim} != lm dim {lm_cfg.dim}"
            )
        self.vision_cfg = vision_cfg
        self.lm_cfg = lm_cfg
        self.fusion_cfg = fusion_cfg
        self.tile_side = tile_side
        grid_side = tile_side // vision_cfg.patch_side
        self.vision = VisionEncoder(vision_cfg, rng, max_grid=grid_side)
        self.lm = DecoderLM(lm_cfg, rng)
        self.connector: Connector | None = (
            build_connector(connector_cfg, rng) if connector_cfg is not None else None
        )
        self.cross_blocks: dict[int, GatedCrossBlock] = {}
        if fusion_cfg.mode == "cross_attention":
            for i in range(fusion_cfg.cross_period, lm_cfg.depth + 1, fusion_cfg.cross_period):
                self.cross_blocks[i] = GatedCrossBlock(
                    rng,
                    lm_cfg.dim,
                    vision_cfg.dim,
                    lm_cfg.heads,
                    f"fusion.cross{i}",
                    gate_init=fusion_cfg.cross_gate_init,
                )

    def params(self) -> dict[str, Tensor]:
        out = self.vision.params()
        out.update(self.lm.params())
        if self.connector is not None:
            out.update(self.connector.params())
        for blk in self.cross_blocks.values():
            out.update(blk.params())
        return out

    def tokens_per_tile(self) -> int:
        if self.connector is None:
            raise ValueError("no connector configured (cross-attention mode)")
        g = self.tile_side // self.vision_cfg.patch_side
        return self.connector.tokens_per_tile(g, g)

    def encode_tile(self, tile: RawImage) -> Tensor:
        return self.vision(patchify(tile, self.vision_cfg.patch_side))

    def encode_grid_tokens(self, grid: TileGrid) -> list[VisualTokens]:
        """Connector outputs for every tile then the global image, in the
        order the assembler laid out the slots."""
        if self.connector is None:
            raise ValueError("no connector configured (cross-attention mode)")
        g = self.tile_side // self.vision_cfg.patch_side
        out: list[VisualTokens] = []
        for idx, tile in enumerate(grid.tiles):
            out.append(self.connector(self.encode_tile(tile), g, g, origin=idx))
        out.append(self.connector(self.encode_tile(grid.global_image), g, g, origin="global"))
        return out

    def encode_grid_memory(self, grids: list[TileGrid]) -> Tensor:
        """Concatenated raw encoder states over all tiles and globals, the
        key/value memory for cross-attention fusion."""
        states = []
        for grid in grids:
            for tile in grid.tiles:
                states.append(self.encode_tile(tile))
            states.append(self.encode_tile(grid.global_image))
        if not states:
            raise ValueError("cross-attention memory needs at least one image")
        return ag.concat(states, axis=0) if len(states) > 1 else states[0]

    def _merged_embeddings(self, seq: MultimodalSequence, visual: dict[int, Tensor]) -> Tensor:
        """Text embeddings with image slots replaced by visual token values."""
        parts: list[Tensor] = []
        pos = 0
        for slot in sorted(seq.image_slots, key=lambda s: s.start):
            vis = visual.get(slot.start)
            if vis is None:
                raise ValueError(f"no visual tokens computed for slot at {slot.start}")
            if vis.shape[0] != slot.length:
                raise ValueError(
                    f"slot at {slot.start} expects {slot.length} tokens, "
                    f"connector produced {vis.shape[0]}"
                )
            if slot.start > pos:
                parts.append(self.lm.embed(seq.token_ids[pos : slot.start]))
            parts.append(vis)
            pos = slot.start + slot.length
        if pos < len(seq.token_ids):
            parts.append(self.lm.embed(seq.token_ids[pos:]))
        return ag.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def _slot_visuals(self, seq: MultimodalSequence, grids: list[TileGrid]) -> dict[int, Tensor]:
        per_image: dict[int, list[VisualTokens]] = {}
        visual: dict[int, Tensor] = {}
        for slot in seq.image_slots:
            if slot.image_index >= len(grids):
                raise ValueError(
                    f"slot references image {slot.image_index}, only {len(grids)} grids given"
                )
            if slot.image_index not in per_image:
                per_image[slot.image_index] = self.encode_grid_tokens(grids[slot.image_index])
            toks = per_image[slot.image_index]
            which = slot.tile_index if slot.tile_index is not None else len(toks) - 1
            visual[slot.start] = toks[which].values
        return visual

    def forward_self_attention(
        self,
        seq: MultimodalSequence,
        grids: list[TileGrid],
        training: bool = False,
        neftune_alpha: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits (T, vocab) for the merged text+visual sequence."""
        if self.fusion_cfg.mode != "self_attention":
            raise ValueError("model is configured for cross-attention fusion")
        visual = self._slot_visuals(seq, grids)
        emb = self._merged_embeddings(seq, visual)
        emb = neftune_embed(emb, neftune_alpha, training, rng)
        return self.lm.forward_embeddings(emb)

    def forward_cross_attention(
        self,
        token_ids: list[int],
        grids: list[TileGrid],
        training: bool = False,
        neftune_alpha: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Logits (T, vocab) for a text sequence conditioned on vision memory."""
        if self.fusion_cfg.mode != "cross_attention":
            raise ValueError("model is configured for self-attention fusion")
        gates_zero = all(
            float(b.gate_attn.data) == 0.0 and float(b.gate_ff.data) == 0.0
            for b in self.cross_blocks.values()
        )
        if not grids:
            if not gates_zero:
                raise ValueError("cross-attention with nonzero gates needs vision states")
            memory = None
            cross = None
        else:
            memory = self.encode_grid_memory(grids)
            cross = self.cross_blocks
        emb = self.lm.embed(token_ids)
        emb = neftune_embed(emb, neftune_alpha, training, rng)
        return self.lm.forward_embeddings(emb, cross_blocks=cross, memory=memory)

    def forward(self, seq: MultimodalSequence, grids: list[TileGrid], **kw) -> Tensor:
        if self.fusion_cfg.mode == "self_attention":
            return self.forward_self_attention(seq, grids, **kw)
        return self.forward_cross_attention(seq.token_ids, grids, **kw)

    def loss(self, seq: MultimodalSequence, grids: list[TileGrid], **kw) -> Tensor:
        logits = self.forward(seq, grids, **kw)
        sliced = ag.slice_rows(logits, 0, logits.shape[0] - 1)
        return ag.cross_entropy_masked(sliced, seq.token_ids[1:], seq.loss_mask[1:])

    def greedy_token_stream(self, seq: MultimodalSequence, grids: list[TileGrid]):
        """Yield greedy next-token ids forever; callers stop via
        decode_with_stopwords. Visual tokens are computed once."""
        ids = list(seq.token_ids)
        if self.fusion_cfg.mode == "self_attention":
            visual = self._slot_visuals(seq, grids)
            slots = seq.image_slots
            while True:
                work = MultimodalSequence(ids, slots, [0] * len(ids))
                emb = self._merged_embeddings(work, visual)
                logits = self.lm.forward_embeddings(emb)
                nxt = int(np.argmax(logits.data[-1]))
                yield nxt
                ids.append(nxt)
        else:
            memory = self.encode_grid_memory(grids) if grids else None
            cross = self.cross_blocks if grids else None
            while True:
                emb = self.lm.embed(ids)
                logits = self.lm.forward_embeddings(emb, cross_blocks=cross, memory=memory)
                nxt = int(np.argmax(logits.data[-1]))
                yield nxt
                ids.append(nxt)


def count_parameters(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.size for name, t in params.items() if name.startswith(prefix))


def decoder_block_parameters(model: VLM) -> int:
    return sum(
        t.size for name, t in model.params().items() if name.startswith("lm.block")
    )


def fusion_parameters(model: VLM) -> int:
    return sum(
        t.size for name, t in model.params().items() if name.startswith("fusion.")
    )
