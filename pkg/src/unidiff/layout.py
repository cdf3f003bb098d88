"""Fused token index space shared by all modalities.

Modality ``m`` owns the contiguous index range ``[offsets[m], offsets[m] + sizes[m])``
and the single absorbing mask state sits at the very end, ``mask_index = sum(sizes)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidLayoutError, OutOfRangeError

#: modality id reported for the mask token
MASK = -1


@dataclass(frozen=True)
class ModalityLayout:
    sizes: tuple[int, ...]
    offsets: tuple[int, ...] = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.sizes)
        if len(sizes) == 0:
            raise InvalidLayoutError("layout needs at least one modality")
        if any(k < 2 for k in sizes):
            raise InvalidLayoutError(f"every modality needs >= 2 states, got {list(sizes)}")
        offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)[:-1]]))
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "total", sum(sizes) + 1)

    @property
    def num_modalities(self) -> int:
        return len(self.sizes)

    @property
    def mask_index(self) -> int:
        return self.total - 1

    def segment(self, m: int) -> range:
        return range(self.offsets[m], self.offsets[m] + self.sizes[m])

    def modality_table(self) -> np.ndarray:
        """``table[i]`` is the modality of fused index ``i`` (``MASK`` for the last entry)."""
        table = np.repeat(np.arange(self.num_modalities), self.sizes)
        return np.append(table, MASK)

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes)}


def new_layout(sizes: Sequence[int]) -> ModalityLayout:
    return ModalityLayout(tuple(sizes))


def _check_index(index, layout: ModalityLayout) -> np.ndarray:
    idx = np.asarray(index)
    if idx.size and (idx.min() < 0 or idx.max() >= layout.total):
        raise OutOfRangeError(f"token index outside [0, {layout.total})")
    return idx


def modality_of(index, layout: ModalityLayout):
    """Modality id of a fused token index, or ``MASK``. Works elementwise on arrays."""
    idx = _check_index(index, layout)
    out = layout.modality_table()[idx]
    return int(out) if np.ndim(out) == 0 else out


def indicator(index, modality: int, layout: ModalityLayout):
    """1 where ``index`` lies in the segment of ``modality``, else 0."""
    if not 0 <= modality < layout.num_modalities:
        raise OutOfRangeError(f"modality {modality} not in layout with {layout.num_modalities}")
    hit = np.asarray(modality_of(index, layout)) == modality
    return int(hit) if hit.ndim == 0 else hit.astype(np.int64)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-layout token sequence (possibly batched along leading axes).

    ``indices[..., p]`` is a fused index; position ``p`` belongs to modality
    ``position_modality[p]``. Segments appear in ``order`` (modality ids),
    each spanning ``lengths[m]`` positions.
    """

    indices: np.ndarray
    layout: ModalityLayout
    lengths: tuple[int, ...]
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.lengths)
        if len(lengths) != self.layout.num_modalities:
            raise InvalidLayoutError("one length per modality required")
        order = tuple(range(len(lengths))) if self.order is None else tuple(self.order)
        if sorted(order) != list(range(len(lengths))):
            raise InvalidLayoutError(f"order {order} is not a permutation of modalities")
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        if idx.ndim == 0 or idx.shape[-1] != sum(lengths):
            raise InvalidLayoutError(f"expected {sum(lengths)} positions, got shape {idx.shape}")
        _check_index(idx, self.layout)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "order", order)
        owner = self.layout.modality_table()[idx]
        bad = (owner != MASK) & (owner != self.position_modality)
        if bad.any():
            raise InvalidLayoutError("token placed in a foreign modality position")

    @property
    def position_modality(self) -> np.ndarray:
        return np.repeat(np.array(self.order), [self.lengths[m] for m in self.order])

    @property
    def num_positions(self) -> int:
        return sum(self.lengths)

    def positions(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.position_modality == m)

    def segment_tokens(self, m: int) -> np.ndarray:
        return self.indices[..., self.positions(m)]

    def replace(self, indices) -> "TokenSequence":
        return TokenSequence(indices, self.layout, self.lengths, self.order)

    def is_mask(self) -> np.ndarray:
        return self.indices == self.layout.mask_index


def position_modality(lengths: Sequence[int], order: Sequence[int] | None = None) -> np.ndarray:
    order = range(len(lengths)) if order is None else order
    return np.repeat(np.array(list(order)), [lengths[m] for m in order])
