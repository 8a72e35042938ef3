"""Shot-aware attention masks over joint text + visual token sequences.

Token order is all text tokens first (indexed by the text ranges of the
layout), then visual tokens frame-major, row-major within a frame.

Visibility, for a query token ``q``:

* visual token of shot ``i``: every visual token of shot ``i``, every visual
  token of frame 0, the local text of shot ``i``, and the global text;
* local text of shot ``i``: the visual tokens of shot ``i``, its own text
  range, and the global text;
* global text: everything.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError, LoadError
from .tensorio import atomic_write_bytes

GLOBAL_TEXT = 0
LOCAL_TEXT = 1
VISUAL = 2


@dataclass(frozen=True)
class ShotSpec:
    shot_id: int
    frame_start: int
    frame_end: int
    local_text_start: int = 0
    local_text_end: int = 0

    def __post_init__(self):
        if self.frame_end <= self.frame_start or self.frame_start < 0:
            raise DomainError(
                f"shot {self.shot_id}: bad frame range [{self.frame_start}, {self.frame_end})"
            )
        if self.local_text_end < self.local_text_start or self.local_text_start < 0:
            raise DomainError(
                f"shot {self.shot_id}: bad text range [{self.local_text_start}, {self.local_text_end})"
            )

    @property
    def n_frames(self) -> int:
        return self.frame_end - self.frame_start

    @property
    def n_local_text(self) -> int:
        return self.local_text_end - self.local_text_start


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    patch_h: int
    patch_w: int
    shots: tuple[ShotSpec, ...]
    global_text_start: int = 0
    global_text_end: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shots", tuple(self.shots))
        if self.frames < 1 or self.patch_h < 1 or self.patch_w < 1:
            raise DomainError("frames and patch grid must be positive")
        if not self.shots:
            raise DomainError("layout needs at least one shot")
        cursor = 0
        for s in self.shots:
            if s.frame_start != cursor:
                raise DomainError(
                    f"shot {s.shot_id} starts at frame {s.frame_start}, expected {cursor}; "
                    "shot frame ranges must be ordered, disjoint and contiguous"
                )
            cursor = s.frame_end
        if cursor != self.frames:
            raise DomainError(f"shots cover frames [0, {cursor}) but layout has {self.frames}")
        if len({s.shot_id for s in self.shots}) != len(self.shots):
            raise DomainError("shot ids must be unique")
        if self.global_text_end < self.global_text_start or self.global_text_start < 0:
            raise DomainError("bad global text range")
        # text ranges must partition [0, n_text)
        ranges = [(self.global_text_start, self.global_text_end)]
        ranges += [(s.local_text_start, s.local_text_end) for s in self.shots]
        ranges = sorted(r for r in ranges if r[1] > r[0])
        cursor = 0
        for a, b in ranges:
            if a != cursor:
                raise DomainError(
                    f"text ranges overlap or leave a gap at token {min(a, cursor)}"
                )
            cursor = b

    @property
    def tokens_per_frame(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def n_visual(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def n_text(self) -> int:
        ends = [self.global_text_end] + [s.local_text_end for s in self.shots]
        return max(ends)

    @property
    def n_tokens(self) -> int:
        return self.n_text + self.n_visual

    def visual_offset(self, frame: int) -> int:
        """Flat token index of the first patch of ``frame``."""
        return self.n_text + frame * self.tokens_per_frame

    def shot_token_range(self, shot_index: int) -> tuple[int, int]:
        s = self.shots[shot_index]
        return self.visual_offset(s.frame_start), self.visual_offset(s.frame_end)

    def token_classes(self):
        """Per-token ``(kind, shot_index, frame)``; -1 where not applicable."""
        n = self.n_tokens
        kind = np.full(n, -1, dtype=np.int64)
        shot = np.full(n, -1, dtype=np.int64)
        frame = np.full(n, -1, dtype=np.int64)
        kind[self.global_text_start:self.global_text_end] = GLOBAL_TEXT
        for i, s in enumerate(self.shots):
            kind[s.local_text_start:s.local_text_end] = LOCAL_TEXT
            shot[s.local_text_start:s.local_text_end] = i
            a, b = self.shot_token_range(i)
            kind[a:b] = VISUAL
            shot[a:b] = i
        frame[self.n_text:] = np.repeat(np.arange(self.frames), self.tokens_per_frame)
        return kind, shot, frame

    def class_names(self) -> list[str]:
        kind, shot, _ = self.token_classes()
        names = []
        for k, s in zip(kind, shot):
            if k == GLOBAL_TEXT:
                names.append("text_global")
            elif k == LOCAL_TEXT:
                names.append(f"text_shot{self.shots[s].shot_id}")
            else:
                names.append(f"visual_shot{self.shots[s].shot_id}")
        return names


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """``bits[q, k]`` is True when query ``q`` may attend to key ``k``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1] or bits.shape[0] < 1:
            raise DomainError(f"mask must be square and nonempty, got {bits.shape}")
        if not bits.diagonal().all():
            raise DomainError("mask diagonal must be all true")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def full(cls, n: int) -> "AttentionMask":
        return cls(np.ones((n, n), dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


def build_mask(layout: TokenLayout) -> AttentionMask:
    kind, shot, frame = layout.token_classes()
    qk, kk = kind[:, None], kind[None, :]
    same_shot = shot[:, None] == shot[None, :]
    key_global_text = kk == GLOBAL_TEXT

    visual_q = (qk == VISUAL) & (
        ((kk == VISUAL) & (same_shot | (frame[None, :] == 0)))
        | ((kk == LOCAL_TEXT) & same_shot)
        | key_global_text
    )
    # local text of shot i: that shot's visuals and local text, plus global text
    local_q = (qk == LOCAL_TEXT) & ((((kk == VISUAL) | (kk == LOCAL_TEXT)) & same_shot) | key_global_text)
    global_q = np.broadcast_to(qk == GLOBAL_TEXT, (layout.n_tokens, layout.n_tokens))
    return AttentionMask(visual_q | local_q | global_q)


def mask_for_layer(mask: AttentionMask, layer_index: int, full_visibility_layers: int) -> AttentionMask:
    if layer_index < 0:
        raise DomainError(f"layer_index must be nonnegative, got {layer_index}")
    if layer_index < full_visibility_layers:
        return AttentionMask.full(mask.n)
    return mask


@dataclass
class MaskStats:
    visible_pairs: int
    density: float
    block_density: dict[tuple[str, str], float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "visible_pairs": self.visible_pairs,
            "density": self.density,
            "block_density": {f"{q}->{k}": v for (q, k), v in self.block_density.items()},
        }


def mask_stats(mask: AttentionMask, layout: TokenLayout | None = None) -> MaskStats:
    """Overall density and, given a layout, density per (query class, key class)."""
    bits = mask.bits
    visible = int(bits.sum())
    stats = MaskStats(visible, visible / bits.size)
    if layout is not None:
        if layout.n_tokens != mask.n:
            raise DomainError(f"layout has {layout.n_tokens} tokens, mask has {mask.n}")
        names = np.array(layout.class_names())
        labels = list(dict.fromkeys(names))
        for qn in labels:
            rows = names == qn
            for kn in labels:
                block = bits[np.ix_(rows, names == kn)]
                stats.block_density[(qn, kn)] = float(block.mean())
    return stats


# -- block descriptors -----------------------------------------------------------

@dataclass(frozen=True)
class Block:
    rule: str
    q_start: int
    q_end: int
    k_start: int
    k_end: int


def mask_blocks(layout: TokenLayout) -> list[Block]:
    """Rectangular blocks whose union is the mask, without materializing it."""
    n = layout.n_tokens
    blocks = []
    g = (layout.global_text_start, layout.global_text_end)
    frame0 = (layout.visual_offset(0), layout.visual_offset(1))

    def add(rule, q, k):
        if q[1] > q[0] and k[1] > k[0]:
            blocks.append(Block(rule, q[0], q[1], k[0], k[1]))

    add("global_text_sees_all", g, (0, n))
    for i, s in enumerate(layout.shots):
        vis = layout.shot_token_range(i)
        loc = (s.local_text_start, s.local_text_end)
        add("visual_local", vis, vis)
        if i > 0:
            add("visual_global_frame0", vis, frame0)
        add("visual_local_text", vis, loc)
        add("visual_global_text", vis, g)
        add("text_local_visual", loc, vis)
        add("text_local_self", loc, loc)
        add("text_local_global", loc, g)
    return blocks


def mask_from_blocks(n: int, blocks: Sequence[Block]) -> AttentionMask:
    bits = np.zeros((n, n), dtype=bool)
    for b in blocks:
        bits[b.q_start:b.q_end, b.k_start:b.k_end] = True
    return AttentionMask(bits)


def blocks_to_json(layout: TokenLayout, blocks: Sequence[Block]) -> dict:
    return {
        "n_tokens": layout.n_tokens,
        "blocks": [
            {"rule": b.rule, "q": [b.q_start, b.q_end], "k": [b.k_start, b.k_end]} for b in blocks
        ],
    }


def blocks_from_json(doc: dict) -> tuple[int, list[Block]]:
    try:
        blocks = [Block(b["rule"], *b["q"], *b["k"]) for b in doc["blocks"]]
        return int(doc["n_tokens"]), blocks
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"bad block descriptor: {exc}") from None


def mask_to_pgm(mask: AttentionMask) -> bytes:
    """Binary PGM (P5): visible pairs white, masked pairs black."""
    header = f"P5\n{mask.n} {mask.n}\n255\n".encode("ascii")
    return header + (mask.bits.astype(np.uint8) * 255).tobytes()


def save_mask_pgm(path: str | os.PathLike, mask: AttentionMask) -> None:
    atomic_write_bytes(path, mask_to_pgm(mask))


# -- layout files ----------------------------------------------------------------

def layout_to_json(layout: TokenLayout, full_visibility_layers: int = 2) -> dict:
    return {
        "frames": layout.frames,
        "patch_h": layout.patch_h,
        "patch_w": layout.patch_w,
        "shots": [
            {
                "shot_id": s.shot_id,
                "frame_start": s.frame_start,
                "frame_end": s.frame_end,
                "local_text_start": s.local_text_start,
                "local_text_end": s.local_text_end,
            }
            for s in layout.shots
        ],
        "global_text_start": layout.global_text_start,
        "global_text_end": layout.global_text_end,
        "full_visibility_layers": full_visibility_layers,
    }


def layout_from_json(doc: dict) -> tuple[TokenLayout, int]:
    """Parse a layout document; returns the layout and its full-visibility layer count."""
    try:
        shots = [
            ShotSpec(
                int(s["shot_id"]), int(s["frame_start"]), int(s["frame_end"]),
                int(s.get("local_text_start", 0)), int(s.get("local_text_end", 0)),
            )
            for s in doc["shots"]
        ]
        layout = TokenLayout(
            int(doc["frames"]), int(doc["patch_h"]), int(doc["patch_w"]), tuple(shots),
            int(doc.get("global_text_start", 0)), int(doc.get("global_text_end", 0)),
        )
        fvl = int(doc.get("full_visibility_layers", 2))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"bad layout: {exc}") from None
    if fvl < 0:
        raise LoadError("full_visibility_layers must be nonnegative")
    return layout, fvl


def load_layout(path: str | os.PathLike) -> tuple[TokenLayout, int]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: {exc}") from None
    return layout_from_json(doc)


def save_layout(path: str | os.PathLike, layout: TokenLayout, full_visibility_layers: int = 2) -> None:
    with open(path, "w") as f:
        json.dump(layout_to_json(layout, full_visibility_layers), f, indent=2)
        f.write("\n")


def iter_shot_of_frame(layout: TokenLayout) -> Iterator[tuple[int, int]]:
    """Yield ``(frame, shot_index)`` for every frame."""
    for i, s in enumerate(layout.shots):
        for f in range(s.frame_start, s.frame_end):
            yield f, i
