import numpy as np
import pytest
from hypothesis import given, strategies as st

from unidiff.errors import InvalidLayoutError, OutOfRangeError
from unidiff.layout import MASK, TokenSequence, indicator, modality_of, new_layout, position_modality

sizes_st = st.lists(st.integers(2, 40), min_size=1, max_size=5)


@pytest.mark.parametrize("sizes, offsets, total", [
    ([2887, 8192], [0, 2887], 11080),
    ([2, 2], [0, 2], 5),
    ([3, 2, 4], [0, 3, 5], 10),
])
def test_new_layout_examples(sizes, offsets, total):
    lay = new_layout(sizes)
    assert list(lay.offsets) == offsets
    assert lay.total == total
    assert lay.mask_index == total - 1


@pytest.mark.parametrize("sizes", [[], [1, 3], [4, 0]])
def test_invalid_layouts(sizes):
    with pytest.raises(InvalidLayoutError):
        new_layout(sizes)


def test_modality_of_examples():
    assert modality_of(3, new_layout([2, 2])) == 1
    assert modality_of(4, new_layout([2, 2])) == MASK
    assert modality_of(2887, new_layout([2887, 8192])) == 1
    assert modality_of(2886, new_layout([2887, 8192])) == 0
    with pytest.raises(OutOfRangeError):
        modality_of(5, new_layout([2, 2]))
    with pytest.raises(OutOfRangeError):
        modality_of(-1, new_layout([2, 2]))


def test_indicator_examples():
    assert indicator(0, 0, new_layout([2, 2])) == 1
    assert all(indicator(4, m, new_layout([2, 2])) == 0 for m in range(2))
    assert indicator(6, 2, new_layout([3, 2, 4])) == 1
    with pytest.raises(OutOfRangeError):
        indicator(0, 2, new_layout([2, 2]))


@given(sizes_st)
def test_segments_partition_index_space(sizes):
    lay = new_layout(sizes)
    assert sum(sizes) + 1 == lay.total
    covered = sorted(i for m in range(lay.num_modalities) for i in lay.segment(m))
    assert covered == list(range(lay.total - 1))
    idx = np.arange(lay.total)
    hits = np.stack([indicator(idx, m, lay) for m in range(lay.num_modalities)])
    # each non-mask index belongs to exactly one modality, the mask to none
    assert list(hits.sum(0)) == [1] * (lay.total - 1) + [0]
    assert new_layout(sizes) == lay


def test_token_sequence_validation():
    lay = new_layout([3, 2])
    seq = TokenSequence(np.array([0, 2, 5, 3]), lay, (2, 2))
    assert list(seq.position_modality) == [0, 0, 1, 1]
    assert list(seq.is_mask()) == [False, False, True, False]
    with pytest.raises(InvalidLayoutError):
        TokenSequence(np.array([3, 0, 3, 4]), lay, (2, 2))  # first position holds a modality-1 token
    with pytest.raises(OutOfRangeError):
        TokenSequence(np.array([0, 0, 3, 6]), lay, (2, 2))
    with pytest.raises(InvalidLayoutError):
        TokenSequence(np.array([0, 0, 3]), lay, (2, 2))
    assert not seq.indices.flags.writeable


def test_custom_order():
    pm = position_modality((2, 3), order=(1, 0))
    assert list(pm) == [1, 1, 1, 0, 0]
