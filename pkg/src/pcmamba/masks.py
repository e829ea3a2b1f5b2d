"""Token layout, control masks, mask-drop / mask-paste and the Mask-SSM unit."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import SsmParams, ssm_bidirectional
from .tnsr import atomic_write_text, read_tnsr, write_tnsr

MASK_KINDS = ("face", "audio", "motion")


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ValueError(f"layout extents must be positive: {self}")

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width

    def token_index(self, t: int, y: int, x: int) -> int:
        return (t * self.height + y) * self.width + x


class Rect(NamedTuple):
    """Half-open grid rectangle: rows [top, bottom), cols [left, right)."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def area(self) -> int:
        return max(self.bottom - self.top, 0) * max(self.right - self.left, 0)

    def inside(self, other: "Rect") -> bool:
        return (self.top >= other.top and self.left >= other.left
                and self.bottom <= other.bottom and self.right <= other.right)


@dataclass(frozen=True)
class ControlMask:
    grid: np.ndarray
    kind: str = "face"

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ValueError("mask grid must be 2-d (height, width)")
        if not np.isin(g, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        if not g.any():
            raise ValueError(f"{self.kind} mask has an empty control region")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "grid", g.astype(np.int8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @classmethod
    def full(cls, height: int, width: int, kind: str = "face") -> "ControlMask":
        return cls(np.ones((height, width), dtype=np.int8), kind)


def flatten(v) -> np.ndarray | Tensor:
    """(b, f, h, w, c) volume -> (b, f*h*w, c) tokens in (t, y, x) row-major order."""
    if isinstance(v, Tensor):
        b, f, h, w, c = v.shape
        return ad.reshape(v, (b, f * h * w, c))
    v = np.asarray(v)
    if v.ndim != 5:
        raise ValueError(f"expected a (b, f, h, w, c) volume, got shape {v.shape}")
    b, f, h, w, c = v.shape
    return v.reshape(b, f * h * w, c)


def unflatten(tokens, layout: TokenLayout):
    b = tokens.shape[0]
    shape = (b, layout.frames, layout.height, layout.width, tokens.shape[-1])
    if isinstance(tokens, Tensor):
        return ad.reshape(tokens, shape)
    if tokens.shape[1] != layout.n_tokens:
        raise ValueError(f"{tokens.shape[1]} tokens do not fit layout {layout}")
    return np.asarray(tokens).reshape(shape)


def broadcast_mask(m: ControlMask, layout: TokenLayout) -> np.ndarray:
    """Per-token keep flags: token (t, y, x) is kept iff m[y, x] == 1, every frame."""
    if m.shape != (layout.height, layout.width):
        raise ValueError(f"mask shape {m.shape} does not match grid "
                         f"{(layout.height, layout.width)}")
    return np.tile(m.grid.reshape(-1).astype(bool), layout.frames)


def mask_drop(z_prime, keep: np.ndarray, n_identity: int = 1) -> Tensor:
    """Keep the identity tokens plus the content tokens flagged in ``keep``."""
    z_prime = ad.as_tensor(z_prime)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (z_prime.shape[1] - n_identity,):
        raise ValueError(f"keep has {keep.size} flags for "
                         f"{z_prime.shape[1] - n_identity} content tokens")
    if not keep.any():
        raise ValueError("mask_drop would remove every content token")
    index = np.concatenate([np.arange(n_identity), n_identity + np.flatnonzero(keep)])
    return ad.take(z_prime, index, axis=1)


def mask_paste(z, keep: np.ndarray, values) -> Tensor:
    """Copy of ``z`` with the kept token positions overwritten by ``values`` (in order)."""
    keep = np.asarray(keep, dtype=bool)
    return ad.paste(z, np.flatnonzero(keep), values, axis=1)


def mask_ssm_forward(z, z_prime, m: ControlMask, e_ctl, branch: tuple[SsmParams, SsmParams],
                     layout: TokenLayout, n_identity: int = 1, chunk: int | None = None,
                     trace: list | None = None) -> Tensor:
    """One Mask-SSM branch.

    Drop content tokens of ``z_prime`` outside the mask, append the control
    tokens, run the bidirectional scan, strip identity and control positions and
    paste the result over the masked positions of ``z``. Tokens outside the mask
    come back bit-identical to ``z``.
    """
    z, z_prime, e_ctl = ad.as_tensor(z), ad.as_tensor(z_prime), ad.as_tensor(e_ctl)
    c = z.shape[-1]
    if z_prime.shape[-1] != c:
        raise ValueError("z and z_prime channel counts differ")
    if e_ctl.ndim != 3 or e_ctl.shape[-1] != c:
        raise ValueError(f"control embedding must be (b, n_ctl, {c}), got {e_ctl.shape}")
    keep = broadcast_mask(m, layout)
    kept = mask_drop(z_prime, keep, n_identity)
    scan_in = ad.concat([kept, e_ctl], axis=1)
    if trace is not None:
        trace.append(scan_in.shape[1])
    y = ssm_bidirectional(scan_in, *branch, chunk=chunk)
    n_kept = int(keep.sum())
    stripped = ad.take(y, np.arange(n_identity, n_identity + n_kept), axis=1)
    return mask_paste(z, keep, stripped)


def rect_grid(rect: Rect, height: int, width: int) -> np.ndarray:
    g = np.zeros((height, width), dtype=np.int8)
    g[rect.top:rect.bottom, rect.left:rect.right] = 1
    return g


def make_masks(mouth_rect: Rect, face_rect: Rect, layout: TokenLayout
               ) -> tuple[ControlMask, ControlMask, ControlMask]:
    """Face, audio (mouth) and motion (face minus mouth) masks."""
    mouth_rect, face_rect = Rect(*mouth_rect), Rect(*face_rect)
    grid = Rect(0, 0, layout.height, layout.width)
    if face_rect.area == 0 or mouth_rect.area == 0:
        raise ValueError("rectangles must be non-degenerate")
    if not face_rect.inside(grid):
        raise ValueError("face rectangle leaves the grid")
    if not mouth_rect.inside(face_rect):
        raise ValueError("mouth rectangle must lie inside the face rectangle")
    face = rect_grid(face_rect, layout.height, layout.width)
    audio = rect_grid(mouth_rect, layout.height, layout.width)
    motion = face & (1 - audio)
    if not motion.any():
        raise ValueError("motion region is empty (mouth covers the whole face)")
    return ControlMask(face, "face"), ControlMask(audio, "audio"), ControlMask(motion, "motion")


def save_mask(path, m: ControlMask, rects: dict[str, Rect] | None = None) -> None:
    """``path`` gets the 0/1 grid as TNSR; ``path.json`` gets {kind, rects}."""
    path = Path(path)
    write_tnsr(path, m.grid.astype(np.float64))
    sidecar = {"kind": m.kind, "rects": {k: list(r) for k, r in (rects or {}).items()}}
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(sidecar, sort_keys=True))


def load_mask(path) -> ControlMask:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return ControlMask(read_tnsr(path).astype(np.int8), meta["kind"])
