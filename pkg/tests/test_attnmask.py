import numpy as np
import pytest

from src.attention.attnmask import (
    AttentionMask,
    MaskMode,
    build_training_mask,
    pe_index_compaction,
    recent_count,
    sliding_window_plan,
    streaming_row_mask,
)
from src.utils.errors import DomainError, ParameterError, StateError
from src.verification.oracles import check_mask_oracles


def test_bidirectional_allows_everything():
    assert build_training_mask(MaskMode.bidirectional_chunk(), 3).as_bits() == ["111"] * 3


def test_unidirectional_is_lower_triangular():
    assert build_training_mask(MaskMode.unidirectional(), 4).as_bits() == ["1000", "1100", "1110", "1111"]


def test_unidirectional_warmup():
    bits = build_training_mask(MaskMode.unidirectional_warmup(2), 5).as_bits()
    assert bits == ["11000", "11000", "11100", "11110", "11111"]


def test_sliding_overlap_band():
    bits = build_training_mask(MaskMode.sliding_overlap(1), 4).as_bits()
    assert bits == ["1100", "1110", "0111", "0011"]


def test_warmup_must_be_shorter_than_window():
    with pytest.raises(ParameterError):
        build_training_mask(MaskMode.unidirectional_warmup(4), 4)
    with pytest.raises(ParameterError):
        MaskMode.unidirectional_warmup(0)


def test_mask_builders_match_enumeration():
    passed, detail = check_mask_oracles()
    assert passed, detail


def test_mask_rejects_empty_row():
    with pytest.raises(DomainError):
        AttentionMask(np.array([[True, False], [False, False]]))


def test_additive_round_trip():
    mask = build_training_mask(MaskMode.unidirectional(), 3)
    additive = mask.additive()
    assert additive[0, 1] == -np.inf and additive[1, 0] == 0.0
    assert AttentionMask.from_additive(additive).as_bits() == mask.as_bits()


@pytest.mark.parametrize("frame, bits", [
    (4, "11110001"),
    (5, "11110011"),
    (6, "11110111"),
    (7, "11111111"),
    (8, "11111111"),
    (40, "11111111"),
])
def test_streaming_row_mask(frame, bits):
    assert streaming_row_mask(frame, window=8, warmup=4).as_bits() == [bits]


def test_streaming_row_mask_for_older_in_flight_latent():
    # the newest frame is 6, this row belongs to frame 4
    assert streaming_row_mask(6, 8, 4, steps_into_stream=2).as_bits() == ["11110001"]


def test_streaming_row_mask_without_warmup():
    assert streaming_row_mask(5, 8, 4, attend_warmup=False).as_bits() == ["00000011"]


def test_streaming_row_mask_rejects_warmup_frames():
    with pytest.raises(StateError):
        streaming_row_mask(3, 8, 4)
    with pytest.raises(StateError):
        streaming_row_mask(5, 8, 4, steps_into_stream=2)


def test_recent_count_saturates():
    assert [recent_count(f, 8, 4) for f in (4, 5, 6, 7, 8, 20)] == [1, 2, 3, 4, 4, 4]


def test_pe_compaction_worked_example():
    inf = -np.inf
    assert pe_index_compaction(np.array([0, 0, 0, 0, inf, inf, 0, 0])).tolist() == [0, 1, 2, 3, 3, 3, 4, 5]
    assert pe_index_compaction(np.array([0, 0, 0, 0, inf, inf, inf, 0])).tolist() == [0, 1, 2, 3, 3, 3, 3, 4]


def test_pe_compaction_from_mask_row():
    row = streaming_row_mask(5, 8, 4)
    assert pe_index_compaction(row).tolist() == [0, 1, 2, 3, 3, 3, 4, 5]


def test_pe_compaction_full_row_is_identity():
    assert pe_index_compaction(np.ones(6, dtype=bool)).tolist() == list(range(6))


def test_pe_compaction_needs_an_allowed_slot():
    with pytest.raises(DomainError):
        pe_index_compaction(np.zeros(4, dtype=bool))


def test_sliding_plan_weights_sum_to_one():
    plans = sliding_window_plan(10, 4, 2)
    assert [p.start for p in plans] == [0, 2, 4, 6]
    totals = np.zeros(10)
    for plan in plans:
        totals[plan.start:plan.start + plan.length] += plan.weights
    np.testing.assert_allclose(totals, 1.0, rtol=1e-6)


def test_sliding_plan_aligns_last_chunk_to_end():
    plans = sliding_window_plan(11, 4, 2)
    assert [p.start for p in plans] == [0, 2, 4, 6, 7]
    assert plans[-1].start + plans[-1].length == 11


def test_sliding_plan_parameters():
    with pytest.raises(ParameterError):
        sliding_window_plan(10, 4, 4)
    with pytest.raises(ParameterError):
        sliding_window_plan(3, 4, 2)
