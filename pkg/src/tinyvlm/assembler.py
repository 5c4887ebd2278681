"""Multimodal sequence assembly: tile markers, row breaks, chat formatting,
and answer-only loss masks.

A tiled image renders as, per row, `<row_r_col_c>` + an image slot for each
tile, a newline after the row, then `<global-img>` + the global-image slot.
Chat turns get `User: ` / `Assistant: ` headers and `<end_of_utterance>`
terminators; the loss mask is 1 exactly on assistant content tokens plus
their terminating `<end_of_utterance>`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .image import TileGrid
from .vocab import Vocabulary


class SequenceOverflowError(ValueError):
    """Assembled sequence would exceed the configured length cap."""

    def __init__(self, length: int, cap: int, example_id: str | None = None):
        self.length = length
        self.cap = cap
        self.example_id = example_id
        where = f" (example {example_id})" if example_id else ""
        super().__init__(f"sequence length {length} exceeds cap {cap}{where}")


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image by its position in the example's image list."""

    index: int


@dataclass
class ImageSlot:
    """Span of placeholder tokens to be replaced by visual tokens.

    tile_index is the row-major tile number, or None for the global image.
    """

    start: int
    length: int
    image_index: int
    tile_index: int | None


@dataclass
class MultimodalSequence:
    token_ids: list[int] = field(default_factory=list)
    image_slots: list[ImageSlot] = field(default_factory=list)
    loss_mask: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.loss_mask) != len(self.token_ids):
            raise ValueError("loss_mask must align with token_ids")
        prev_end = 0
        for slot in sorted(self.image_slots, key=lambda s: s.start):
            if slot.start < prev_end or slot.start + slot.length > len(self.token_ids):
                raise ValueError("image slots must be disjoint and in bounds")
            if any(self.loss_mask[slot.start : slot.start + slot.length]):
                raise ValueError("loss mask must be 0 inside image slots")
            prev_end = slot.start + slot.length

    def __len__(self) -> int:
        return len(self.token_ids)

    def extend(self, other: "MultimodalSequence") -> None:
        offset = len(self.token_ids)
        self.token_ids.extend(other.token_ids)
        self.loss_mask.extend(other.loss_mask)
        for slot in other.image_slots:
            self.image_slots.append(
                ImageSlot(slot.start + offset, slot.length, slot.image_index, slot.tile_index)
            )

    def append_tokens(self, ids: Iterable[int], mask_value: int) -> None:
        for tid in ids:
            self.token_ids.append(tid)
            self.loss_mask.append(mask_value)


@dataclass
class ChatTurn:
    role: str  # "user" | "assistant"
    segments: list[str | ImageRef]

    def __post_init__(self) -> None:
        if self.role not in ("user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.segments:
            raise ValueError("a chat turn needs at least one segment")
        if self.role == "assistant" and any(isinstance(s, ImageRef) for s in self.segments):
            raise ValueError("assistant turns cannot contain images")


IMAGE_PLACEHOLDER = "<image>"


def split_text_segments(text: str, next_image_index: int) -> tuple[list[str | ImageRef], int]:
    """Split turn text on `<image>` occurrences into text/image segments,
    numbering images sequentially from next_image_index."""
    segments: list[str | ImageRef] = []
    idx = next_image_index
    pieces = text.split(IMAGE_PLACEHOLDER)
    for i, piece in enumerate(pieces):
        if piece:
            segments.append(piece)
        if i < len(pieces) - 1:
            segments.append(ImageRef(idx))
            idx += 1
    if not segments:
        segments.append("")
    return segments, idx


def parse_example_record(record: dict) -> tuple[list[str], list[ChatTurn]]:
    """Parse one training-example JSON record: {"images": [...], "turns": [...]}.

    `<image>` occurrences in turn text consume images in order; any images
    left unreferenced are prepended to the first user turn.
    """
    images = list(record.get("images", []))
    turns: list[ChatTurn] = []
    next_img = 0
    for t in record["turns"]:
        segments, next_img = split_text_segments(t["text"], next_img)
        turns.append(ChatTurn(role=t["role"], segments=segments))
    if next_img < len(images):
        missing = [ImageRef(i) for i in range(next_img, len(images))]
        for turn in turns:
            if turn.role == "user":
                turn.segments = missing + turn.segments
                break
        else:
            raise ValueError("images present but no user turn to attach them to")
    if next_img > len(images):
        raise ValueError(
            f"turns reference {next_img} images but only {len(images)} provided"
        )
    return images, turns


def load_example_records(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def assemble_tiled_image(
    grid: TileGrid | tuple[int, int],
    per_tile_tokens: int,
    vocab: Vocabulary,
    image_index: int = 0,
) -> MultimodalSequence:
    """Sequence fragment for one tiled image (loss mask all zero)."""
    if per_tile_tokens < 1:
        raise ValueError(f"per_tile_tokens must be >= 1, got {per_tile_tokens}")
    rows, cols = (grid.rows, grid.cols) if isinstance(grid, TileGrid) else grid
    frag = MultimodalSequence()
    for r in range(1, rows + 1):
        for c in range(1, cols + 1):
            frag.append_tokens([vocab.marker_id(r, c)], 0)
            frag.image_slots.append(
                ImageSlot(len(frag.token_ids), per_tile_tokens, image_index, (r - 1) * cols + (c - 1))
            )
            frag.append_tokens([vocab.image_id] * per_tile_tokens, 0)
        frag.append_tokens([vocab.newline_id], 0)
    frag.append_tokens([vocab.global_img_id], 0)
    frag.image_slots.append(ImageSlot(len(frag.token_ids), per_tile_tokens, image_index, None))
    frag.append_tokens([vocab.image_id] * per_tile_tokens, 0)
    return frag


def parse_tile_layout(token_ids: list[int], vocab: Vocabulary) -> tuple[int, int]:
    """Recover (rows, cols) from the tile markers in a sequence."""
    rows = cols = 0
    for tid in token_ids:
        pos = vocab.marker_position(tid)
        if pos is not None:
            rows = max(rows, pos[0])
            cols = max(cols, pos[1])
    if rows == 0 or cols == 0:
        raise ValueError("no tile markers found in sequence")
    return rows, cols


USER_HEADER = "User: "
ASSISTANT_HEADER = "Assistant: "


def build_training_sequence(
    turns: list[ChatTurn],
    vocab: Vocabulary,
    grids: list[TileGrid | tuple[int, int]],
    per_tile_tokens: int,
    seq_len_cap: int | None = None,
    example_id: str | None = None,
    cross_attention: bool = False,
) -> MultimodalSequence:
    """Full chat-formatted training sequence with answer-only loss mask.

    With cross_attention=True each image contributes a single `<image>`
    marker instead of tile slots (visual content enters via cross-attention,
    not the token stream). Raises SequenceOverflowError instead of silently
    truncating when the assembled length exceeds seq_len_cap.
    """
    seq = MultimodalSequence()
    seq.append_tokens([vocab.bos_id], 0)
    for turn in turns:
        is_assistant = turn.role == "assistant"
        header = ASSISTANT_HEADER if is_assistant else USER_HEADER
        seq.append_tokens(vocab.tokenize(header), 0)
        for segment in turn.segments:
            if isinstance(segment, ImageRef):
                if segment.index >= len(grids):
                    raise ValueError(
                        f"turn references image {segment.index} but only "
                        f"{len(grids)} grids supplied"
                    )
                if cross_attention:
                    seq.append_tokens([vocab.image_id], 0)
                else:
                    seq.extend(
                        assemble_tiled_image(
                            grids[segment.index], per_tile_tokens, vocab, segment.index
                        )
                    )
            else:
                seq.append_tokens(vocab.tokenize(segment), 1 if is_assistant else 0)
        seq.append_tokens([vocab.end_of_utterance_id], 1 if is_assistant else 0)
        seq.append_tokens([vocab.newline_id], 0)
    if seq_len_cap is not None and len(seq) > seq_len_cap:
        raise SequenceOverflowError(len(seq), seq_len_cap, example_id)
    return seq


DEFAULT_STOP_WORDS = ("Question", "User", "<end_of_utterance>")


def decode_with_stopwords(
    token_stream: Iterable[int] | Callable[[], int],
    vocab: Vocabulary,
    stop_words: tuple[str, ...] = DEFAULT_STOP_WORDS,
    max_tokens: int = 256,
) -> str:
    """Greedy-decoding sink: consume tokens until EOS, a stop word, or the
    token budget; the stop word is excluded and trailing whitespace trimmed."""
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    if callable(token_stream):
        fn = token_stream
        token_stream = iter(fn, object())
    ids: list[int] = []
    for count, tid in enumerate(token_stream, start=1):
        if tid == vocab.eos_id:
            break
        ids.append(tid)
        text = vocab.detokenize(ids, errors="replace")
        cut = min(
            (pos for pos in (text.find(w) for w in stop_words) if pos >= 0),
            default=-1,
        )
        if cut >= 0:
            return text[:cut].rstrip()
        if count >= max_tokens:
            break
    return vocab.detokenize(ids, errors="replace").rstrip()


def render_sequence(seq: MultimodalSequence, vocab: Vocabulary) -> str:
    """Stable debug rendering with collapsed image slots and an RLE'd mask."""
    slot_at = {s.start: s for s in seq.image_slots}
    parts: list[str] = []
    i = 0
    while i < len(seq.token_ids):
        slot = slot_at.get(i)
        if slot is not None:
            where = "global" if slot.tile_index is None else f"tile{slot.tile_index}"
            parts.append(f"[img{slot.image_index}:{where}x{slot.length}]")
            i += slot.length
            continue
        tid = seq.token_ids[i]
        s = vocab.token_string(tid)
        parts.append("\\n" if s == "\n" else s)
        i += 1
    runs: list[str] = []
    j = 0
    mask = seq.loss_mask
    while j < len(mask):
        k = j
        while k < len(mask) and mask[k] == mask[j]:
            k += 1
        runs.append(f"{mask[j]}*{k - j}")
        j = k
    return "".join(parts) + "\nmask: " + " ".join(runs)
