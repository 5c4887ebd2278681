"""Byte-level vocabulary with reserved multimodal special tokens.

The 256 byte tokens cover arbitrary user text, so tokenizing untrusted
content can never produce a special id. Specials get the ids above 255:
sequence delimiters, the image-slot placeholder, the global-image marker,
the utterance terminator, and one `<row_x_col_y>` marker per tile position
up to the configured grid maximum. `\\n` after a tile row is the ordinary
byte token 10, not a special.
"""

from __future__ import annotations

N_BYTE_TOKENS = 256


class Vocabulary:
    def __init__(self, grid_max: int = 5):
        if grid_max < 1:
            raise ValueError(f"grid_max must be >= 1, got {grid_max}")
        self.grid_max = grid_max
        self.bos_id = N_BYTE_TOKENS
        self.eos_id = N_BYTE_TOKENS + 1
        self.image_id = N_BYTE_TOKENS + 2
        self.fake_around_image_id = N_BYTE_TOKENS + 3
        self.global_img_id = N_BYTE_TOKENS + 4
        self.end_of_utterance_id = N_BYTE_TOKENS + 5
        self._marker_base = N_BYTE_TOKENS + 6
        self.newline_id = ord("\n")
        self._special_names = {
            self.bos_id: "<bos>",
            self.eos_id: "<eos>",
            self.image_id: "<image>",
            self.fake_around_image_id: "<fake_token_around_image>",
            self.global_img_id: "<global-img>",
            self.end_of_utterance_id: "<end_of_utterance>",
        }

    @property
    def size(self) -> int:
        return self._marker_base + self.grid_max * self.grid_max

    def marker_id(self, row: int, col: int) -> int:
        """Id of the `<row_{row}_col_{col}>` marker; rows/cols are 1-indexed."""
        if not (1 <= row <= self.grid_max and 1 <= col <= self.grid_max):
            raise ValueError(
                f"tile position ({row}, {col}) outside 1..{self.grid_max} grid range"
            )
        return self._marker_base + (row - 1) * self.grid_max + (col - 1)

    def marker_position(self, token_id: int) -> tuple[int, int] | None:
        """Inverse of :meth:`marker_id`; None for non-marker ids."""
        off = token_id - self._marker_base
        if 0 <= off < self.grid_max * self.grid_max:
            return off // self.grid_max + 1, off % self.grid_max + 1
        return None

    def is_special(self, token_id: int) -> bool:
        return token_id >= N_BYTE_TOKENS

    def token_string(self, token_id: int) -> str:
        """Printable form of one token (specials render as their names)."""
        if token_id < 0 or token_id >= self.size:
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")
        if token_id < N_BYTE_TOKENS:
            return chr(token_id)
        if token_id in self._special_names:
            return self._special_names[token_id]
        row, col = self.marker_position(token_id)
        return f"<row_{row}_col_{col}>"

    def tokenize(self, text: str) -> list[int]:
        """UTF-8 byte tokenization. Never emits special ids, whatever the input."""
        return list(text.encode("utf-8"))

    def detokenize(self, ids: list[int], errors: str = "strict") -> str:
        """Byte runs decode as UTF-8; special ids render as their token names."""
        parts: list[str] = []
        buf = bytearray()
        for tid in ids:
            if tid < N_BYTE_TOKENS:
                buf.append(tid)
            else:
                if buf:
                    parts.append(buf.decode("utf-8", errors=errors))
                    buf = bytearray()
                parts.append(self.token_string(tid))
        if buf:
            parts.append(buf.decode("utf-8", errors=errors))
        return "".join(parts)
