import numpy as np
import pytest

from src.attention.attnmask import AttentionMask, MaskMode, build_training_mask
from src.attention.temporal_attention import (
    AttentionWeights,
    TemporalAttentionLayer,
    attend_backward,
    attend_full,
    attend_layer,
    PositionalEncoding,
    make_positional_encoding,
)
from src.core.tensorcore import RngStream, gaussian, identity, linear_nobias
from src.utils.errors import DimensionError, ParameterError
from src.verification.oracles import check_gradient, finite_difference_grad, random_weights


def test_positional_encoding_table():
    pe = make_positional_encoding(16, 8)
    assert pe.table.shape == (16, 8)
    np.testing.assert_allclose(pe.table[0, 0::2], 0.0, atol=1e-7)
    np.testing.assert_allclose(pe.table[0, 1::2], 1.0, atol=1e-7)
    np.testing.assert_allclose(pe.table[3, 0], np.sin(3.0), rtol=1e-6)
    np.testing.assert_allclose(pe.table[3, 3], np.cos(3.0 / 10000.0 ** (2 / 8)), rtol=1e-6)


def test_positional_encoding_needs_even_channels():
    with pytest.raises(ParameterError):
        make_positional_encoding(4, 7)


def test_weights_validation():
    with pytest.raises(DimensionError):
        AttentionWeights(identity(4), identity(4), identity(4), identity(3))
    with pytest.raises(ParameterError):
        AttentionWeights(identity(6), identity(6), identity(6), identity(6), head_count=4)


def test_single_frame_returns_projected_value(rng):
    channels = 8
    w = random_weights(rng, channels, 2)
    pe = make_positional_encoding(4, channels)
    feat = gaussian(rng, (3, 1, channels))
    out = attend_full(feat, w, AttentionMask.full(1), pe)
    value = linear_nobias(w.w_v, feat) + linear_nobias(w.w_v, pe.table[:1])
    np.testing.assert_allclose(out, linear_nobias(w.w_out, value), rtol=1e-5, atol=1e-6)


def test_spatial_positions_are_independent(rng):
    channels = 8
    w = random_weights(rng, channels, 2)
    pe = make_positional_encoding(8, channels)
    feat = gaussian(rng, (5, 6, channels))
    mask = AttentionMask.full(6)
    order = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(attend_full(feat[order], w, mask, pe), attend_full(feat, w, mask, pe)[order],
                               rtol=1e-5, atol=1e-6)


def test_causal_mask_hides_future_frames(rng):
    channels = 8
    w = random_weights(rng, channels, 2)
    pe = make_positional_encoding(8, channels)
    mask = build_training_mask(MaskMode.unidirectional(), 5)
    feat = gaussian(rng, (2, 5, channels))
    moved = feat.copy()
    moved[:, 4] += 1.0
    np.testing.assert_array_equal(attend_full(feat, w, mask, pe)[:, :4], attend_full(moved, w, mask, pe)[:, :4])


def test_layer_matches_attend_full(rng):
    channels = 8
    w = random_weights(rng, channels, 4)
    pe = make_positional_encoding(8, channels)
    feat = gaussian(rng, (2, 4, channels))
    mask = build_training_mask(MaskMode.unidirectional_warmup(2), 4)
    np.testing.assert_array_equal(attend_layer(feat, TemporalAttentionLayer.build(w, pe), mask),
                                  attend_full(feat, w, mask, pe))


def test_explicit_positions(rng):
    channels = 8
    w = random_weights(rng, channels, 2)
    pe = make_positional_encoding(8, channels)
    feat = gaussian(rng, (2, 3, channels))
    mask = AttentionMask.full(3)
    default = attend_full(feat, w, mask, pe)
    np.testing.assert_array_equal(attend_full(feat, w, mask, pe, positions=[0, 1, 2]), default)
    assert not np.allclose(attend_full(feat, w, mask, pe, positions=[2, 5, 7]), default)
    with pytest.raises(ParameterError):
        attend_full(feat, w, mask, pe, positions=[0, 1, 8])


def test_too_many_frames_for_encoding(rng):
    w = random_weights(rng, 8, 2)
    pe = make_positional_encoding(4, 8)
    with pytest.raises(ParameterError):
        attend_full(gaussian(rng, (1, 5, 8)), w, AttentionMask.full(5), pe)


def test_mask_shape_must_match_frames(rng):
    w = random_weights(rng, 8, 2)
    pe = make_positional_encoding(8, 8)
    with pytest.raises(DimensionError):
        attend_full(gaussian(rng, (1, 4, 8)), w, AttentionMask.full(3), pe)


def test_backward_matches_finite_differences():
    rng = RngStream(11)
    channels = 8
    w = random_weights(rng, channels, 2, dtype=np.float64)
    pe = make_positional_encoding(4, channels)
    mask = build_training_mask(MaskMode.unidirectional_warmup(2), 4)
    feat = gaussian(rng, (2, 4, channels), dtype=np.float64)
    upstream = gaussian(rng, (2, 4, channels), dtype=np.float64)
    analytic = attend_backward(feat, w, mask, pe, upstream)
    numeric = finite_difference_grad(lambda x: float((attend_full(x, w, mask, pe) * upstream).sum()), feat)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel <= 1e-3


def test_gradient_check_suite():
    passed, detail = check_gradient(seed=0, trials=5)
    assert passed, detail


def test_bidirectional_attention_is_frame_permutation_equivariant_without_pe(rng):
    channels = 8
    w = random_weights(rng, channels, 2, dtype=np.float64)
    zero_pe = PositionalEncoding(table=np.zeros((8, channels), dtype=np.float32))
    feat = gaussian(rng, (3, 6, channels), dtype=np.float64)
    mask = AttentionMask.full(6)
    order = np.array([4, 1, 5, 0, 3, 2])
    np.testing.assert_allclose(attend_full(feat[:, order], w, mask, zero_pe),
                               attend_full(feat, w, mask, zero_pe)[:, order], rtol=0, atol=1e-10)


def _block_diag(a, b):
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[:a.shape[0], :a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


@pytest.mark.parametrize("mask", [AttentionMask.full(5), build_training_mask(MaskMode.unidirectional_warmup(2), 5)])
def test_two_heads_equal_single_heads_on_channel_blocks(rng, mask):
    half = 4
    first = random_weights(rng, half, 1, dtype=np.float64)
    second = random_weights(rng, half, 1, dtype=np.float64)
    names = ("w_q", "w_k", "w_v", "w_out")
    joint = AttentionWeights(*(_block_diag(getattr(first, n), getattr(second, n)) for n in names), head_count=2)
    pe = make_positional_encoding(8, 2 * half)
    feat = gaussian(rng, (3, 5, 2 * half), dtype=np.float64)

    two_heads = attend_full(feat, joint, mask, pe)
    pe_first = PositionalEncoding(table=pe.table[:, :half])
    pe_second = PositionalEncoding(table=pe.table[:, half:])
    per_block = np.concatenate([
        attend_full(feat[..., :half], first, mask, pe_first),
        attend_full(feat[..., half:], second, mask, pe_second),
    ], axis=-1)
    np.testing.assert_allclose(two_heads, per_block, rtol=0, atol=1e-10)
