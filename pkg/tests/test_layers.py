"""GRU cell, bidirectional encoder, attention, and scorer contracts."""

import numpy as np
import pytest

from dcvae.autodiff import Tensor, constant, grad_check, parameter, tsum
from dcvae.layers import (
    AttentionParams,
    BiGRUEncoder,
    GRUParams,
    ScorerParams,
    attend,
    encode_bidirectional,
    gru_step,
    score,
)


def zero_gru(d_in, d_h):
    z = lambda *s: parameter(np.zeros(s))
    return GRUParams(w_xu=z(d_in, d_h), w_hu=z(d_h, d_h), b_u=z(d_h),
                     w_xr=z(d_in, d_h), w_hr=z(d_h, d_h), b_r=z(d_h),
                     w_xc=z(d_in, d_h), w_hc=z(d_h, d_h), b_c=z(d_h))


class TestGRUStep:
    def test_zero_weights_halve_the_state(self):
        # sigmoid(0) = 0.5 on the update gate, tanh(0) = 0 on the candidate
        rng = np.random.default_rng(0)
        p = zero_gru(3, 4)
        h = rng.uniform(-1, 1, 4)
        out = gru_step(p, constant(rng.uniform(-1, 1, 3)), constant(h))
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)

    def test_zero_state_with_zero_candidate_weights_is_fixed_point(self):
        rng = np.random.default_rng(1)
        p = GRUParams.init(rng, 3, 4)
        for name in ("w_xc", "w_hc", "b_c"):
            getattr(p, name).data[:] = 0.0
        out = gru_step(p, constant(rng.uniform(-1, 1, 3)), constant(np.zeros(4)))
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-15)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        p = GRUParams.init(rng, 3, 4)
        x = Tensor(rng.uniform(-1, 1, 3))
        h = Tensor(rng.uniform(-1, 1, 4))
        tensors = [x, h] + list(p.named("g").values())
        err = grad_check(lambda *ts: tsum(gru_step(p, ts[0], ts[1])), tensors, eps=1e-5)
        assert err < 1e-4

    def test_dimension_mismatch_rejected(self):
        p = GRUParams.init(np.random.default_rng(0), 3, 4)
        with pytest.raises(ValueError, match="gru_step"):
            gru_step(p, constant(np.zeros(5)), constant(np.zeros(4)))


class TestBidirectionalEncoder:
    def _encoder(self, seed=3, vocab=9, d_w=3, d_h=4):
        rng = np.random.default_rng(seed)
        embed = parameter(rng.uniform(-0.1, 0.1, (vocab, d_w)))
        return BiGRUEncoder.init(rng, embed, d_h)

    def test_single_token_state_equals_summary(self):
        enc = self._encoder()
        states, summary = encode_bidirectional(enc, [5])
        assert len(states) == 1
        np.testing.assert_array_equal(states[0].data, summary.data)

    def test_reversal_with_swapped_directions_swaps_summary_halves(self):
        enc = self._encoder()
        swapped = BiGRUEncoder(fwd=enc.bwd, bwd=enc.fwd, embed=enc.embed)
        seq = [1, 5, 7, 2]
        _, summary = encode_bidirectional(enc, seq)
        _, mirrored = encode_bidirectional(swapped, seq[::-1])
        d = enc.d_h
        np.testing.assert_allclose(summary.data[:d], mirrored.data[d:], atol=1e-15)
        np.testing.assert_allclose(summary.data[d:], mirrored.data[:d], atol=1e-15)

    def test_gradients_through_length_three_encoding(self):
        enc = self._encoder(seed=4)
        tensors = [enc.embed] + list(enc.named("e").values())
        err = grad_check(lambda *ts: tsum(encode_bidirectional(enc, [1, 5, 7])[1]),
                         tensors, eps=1e-5)
        assert err < 1e-4

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            encode_bidirectional(self._encoder(), [])

    def test_out_of_range_id_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            encode_bidirectional(self._encoder(vocab=9), [1, 9])

    def test_permuting_input_changes_summary(self):
        rng = np.random.default_rng(5)
        enc = self._encoder(seed=5)
        hits = 0
        for _ in range(10):
            seq = list(rng.integers(0, 9, size=5))
            perm = seq[::-1]
            if perm == seq:
                continue
            _, a = encode_bidirectional(enc, seq)
            _, b = encode_bidirectional(enc, perm)
            if not np.allclose(a.data, b.data):
                hits += 1
        assert hits >= 8

    def test_deterministic(self):
        enc = self._encoder(seed=6)
        _, a = encode_bidirectional(enc, [1, 2, 3])
        _, b = encode_bidirectional(enc, [1, 2, 3])
        np.testing.assert_array_equal(a.data, b.data)


class TestAttention:
    def test_single_state_gets_weight_one(self):
        rng = np.random.default_rng(7)
        p = AttentionParams.init(rng, 4)
        state = constant(rng.uniform(-1, 1, 8))
        context, weights = attend(p, constant(rng.uniform(-1, 1, 4)), [state])
        np.testing.assert_allclose(weights.data, [1.0], atol=1e-15)
        np.testing.assert_allclose(context.data, state.data, atol=1e-15)

    def test_zero_score_matrix_gives_uniform_weights(self):
        rng = np.random.default_rng(8)
        p = AttentionParams.init(rng, 4)
        p.w_score.data[:] = 0.0
        encs = [constant(rng.uniform(-1, 1, 8)) for _ in range(5)]
        _, weights = attend(p, constant(rng.uniform(-1, 1, 4)), encs)
        np.testing.assert_allclose(weights.data, np.full(5, 0.2), atol=1e-15)

    def test_context_matches_direct_weighted_sum(self):
        rng = np.random.default_rng(9)
        p = AttentionParams.init(rng, 4)
        for _ in range(20):
            encs = [constant(rng.uniform(-1, 1, 8)) for _ in range(4)]
            context, weights = attend(p, constant(rng.uniform(-1, 1, 4)), encs)
            direct = sum(w * e.data for w, e in zip(weights.data, encs))
            np.testing.assert_allclose(context.data, direct, atol=1e-12)
            assert abs(weights.data.sum() - 1.0) < 1e-12
            assert (weights.data >= 0).all()

    def test_empty_encoder_states_rejected(self):
        p = AttentionParams.init(np.random.default_rng(0), 4)
        with pytest.raises(ValueError, match="no encoder states"):
            attend(p, constant(np.zeros(4)), [])

    def test_gradients(self):
        rng = np.random.default_rng(10)
        p = AttentionParams.init(rng, 3)
        encs = [Tensor(rng.uniform(-1, 1, 6)) for _ in range(3)]
        dec = Tensor(rng.uniform(-1, 1, 3))
        err = grad_check(lambda *ts: tsum(attend(p, ts[0], list(ts[2:]))[0]),
                         [dec, p.w_score] + encs, eps=1e-5)
        assert err < 1e-4


class TestScorer:
    def test_zero_params_give_zero_logits(self):
        z = lambda *s: parameter(np.zeros(s))
        p = ScorerParams(w1=z(4, 3), b1=z(3), w2=z(3, 5), b2=z(5))
        out = score(p, constant(np.random.default_rng(0).uniform(-1, 1, 4)))
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_zero_input_takes_bias_path(self):
        rng = np.random.default_rng(11)
        p = ScorerParams.init(rng, 4, 3, 5)
        out = score(p, constant(np.zeros(4)))
        expected = np.tanh(p.b1.data) @ p.w2.data + p.b2.data
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(12)
        p = ScorerParams.init(rng, 4, 3, 5)
        v = Tensor(rng.uniform(-1, 1, 4))
        err = grad_check(lambda *ts: tsum(score(p, ts[0])), [v] + list(p.named("s").values()),
                         eps=1e-5)
        assert err < 1e-4

    def test_dimension_mismatch_rejected(self):
        p = ScorerParams.init(np.random.default_rng(0), 4, 3, 5)
        with pytest.raises(ValueError, match="score"):
            score(p, constant(np.zeros(6)))
