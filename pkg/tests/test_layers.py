"""Layer semantics: dense maps, masked LSTMs, merges, modulation, dropout."""

import math

import numpy as np
import pytest

from mlctc.kernels import Rng, ShapeError
from mlctc.layers import (
    BiLstm,
    Dense,
    LstmDirection,
    SeqBatch,
    dropout,
    dropout_backward,
    merge_directions,
    merge_directions_backward,
    modulate,
    modulate_backward,
)

from helpers import check_layer_grads


def seq(data, lengths=None):
    data = np.asarray(data, dtype=np.float64)
    if lengths is None:
        lengths = np.full(data.shape[1], data.shape[0])
    return SeqBatch(data, np.asarray(lengths))


def random_seq(rng, frames, batch, dim, lengths=None):
    data = rng.standard_normal((frames, batch, dim))
    sb = seq(data, lengths)
    return sb.with_data(sb.data * sb.mask())  # zero the padding


class TestDense:
    def test_zero_weights_emit_bias(self):
        d = Dense("d", 3, 2, Rng(0))
        d.w.value[...] = 0.0
        d.b.value[...] = [5.0, -1.0]
        out, _ = d.forward(np.random.default_rng(0).standard_normal((4, 2, 3)))
        assert np.array_equal(out, np.broadcast_to([5.0, -1.0], (4, 2, 2)))

    def test_identity_weights(self):
        d = Dense("d", 3, 3, Rng(0))
        d.w.value[...] = np.eye(3)
        d.b.value[...] = 0.0
        x = np.random.default_rng(1).standard_normal((2, 2, 3))
        out, _ = d.forward(x)
        assert np.allclose(out, x, atol=1e-15)

    def test_grad_check_on_three_frame_batch(self):
        rng = np.random.default_rng(2)
        d = Dense("d", 4, 3, Rng(1))
        x = rng.standard_normal((3, 2, 4))
        w = rng.standard_normal((3, 2, 3))

        def compute():
            out, cache = d.forward(x)
            d.backward(w, cache)
            return float((w * out).sum())

        check_layer_grads(d.params(), compute, tol=1e-4)

    def test_input_dim_mismatch(self):
        d = Dense("d", 4, 3, Rng(1))
        with pytest.raises(ShapeError):
            d.forward(np.zeros((2, 2, 5)))


class TestLstm:
    def test_all_zero_input_and_params_give_zero_output(self):
        layer = LstmDirection("l", 3, 4, Rng(0))
        for p in layer.params():
            p.value[...] = 0.0
        x = np.zeros((5, 2, 3))
        h, _ = layer.forward(x, np.array([5, 5]))
        assert np.array_equal(h, np.zeros((5, 2, 4)))

    def test_single_frame_saturated_gates_matches_hand_value(self):
        # input gate and output gate saturated to 1, forget gate to 0,
        # candidate path z_g = 2.0 * x; hand recurrence gives
        # h1 = sigmoid(100) * tanh(sigmoid(100) * tanh(2 x))
        layer = LstmDirection("l", 1, 1, Rng(0))
        for p in layer.params():
            p.value[...] = 0.0
        layer.w["g"].value[...] = 2.0
        layer.b["i"].value[...] = 100.0
        layer.b["f"].value[...] = -100.0
        layer.b["o"].value[...] = 100.0
        x = np.array([[[0.7]]])
        h, _ = layer.forward(x, np.array([1]))
        expected = math.tanh(math.tanh(2.0 * 0.7))
        assert abs(h[0, 0, 0] - expected) < 1e-12

    def test_backward_direction_equals_reversed_forward_per_sequence(self):
        rng = np.random.default_rng(3)
        fwd = LstmDirection("shared", 3, 4, Rng(9), reverse=False)
        bwd = LstmDirection("shared", 3, 4, Rng(9), reverse=True)
        lengths = np.array([6, 3])
        sb = random_seq(rng, 6, 2, 3, lengths)
        out_b, _ = bwd.forward(sb.data, lengths)

        x_rev = np.zeros_like(sb.data)
        for b, ln in enumerate(lengths):
            x_rev[:ln, b] = sb.data[:ln, b][::-1]
        out_f, _ = fwd.forward(x_rev, lengths)
        for b, ln in enumerate(lengths):
            assert np.allclose(out_b[:ln, b], out_f[:ln, b][::-1], atol=1e-14)
            assert np.array_equal(out_b[ln:, b], np.zeros((6 - ln, 4)))

    def test_masked_frames_output_zero_and_carry_no_gradient(self):
        rng = np.random.default_rng(4)
        layer = LstmDirection("l", 2, 3, Rng(5))
        lengths = np.array([6, 3])
        sb = random_seq(rng, 6, 2, 2, lengths)
        h, cache = layer.forward(sb.data, lengths)
        assert np.array_equal(h[3:, 1], np.zeros((3, 3)))

        # cotangents on masked frames must not reach inputs or params
        dout = np.ones_like(h)
        dx_full = layer.backward(dout, cache)
        grads_full = [p.grad.copy() for p in layer.params()]
        for p in layer.params():
            p.zero_grad()
        dout_valid = dout * seq(h, lengths).mask()
        h2, cache2 = layer.forward(sb.data, lengths)
        dx_valid = layer.backward(dout_valid, cache2)
        assert np.allclose(dx_full, dx_valid, atol=1e-14)
        for g1, p in zip(grads_full, layer.params()):
            assert np.allclose(g1, p.grad, atol=1e-14)
        assert np.array_equal(dx_full[3:, 1], np.zeros((3, 2)))

    def test_lengths_exceeding_frames_rejected(self):
        layer = LstmDirection("l", 2, 3, Rng(5))
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((4, 1, 2)), np.array([5]))

    def test_grad_check_single_cell_five_frames(self):
        rng = np.random.default_rng(1)
        layer = LstmDirection("l", 2, 3, Rng(1))
        x = rng.standard_normal((5, 1, 2))
        w = rng.standard_normal((5, 1, 3))

        def compute():
            h, cache = layer.forward(x, np.array([5]))
            layer.backward(w, cache)
            return float((w * h).sum())

        check_layer_grads(layer.params(), compute, eps=1e-5, tol=1e-4)


class TestMerges:
    def test_pairwise_max_idempotent(self):
        x = np.random.default_rng(0).standard_normal((3, 2, 4))
        assert np.array_equal(merge_directions(x, x, "pairwise_max"), x)

    def test_pairwise_sum_hand_case(self):
        out = merge_directions(np.array([1.0, -2.0]), np.array([3.0, 4.0]), "pairwise_sum")
        assert np.array_equal(out, [4.0, 2.0])

    def test_concat_doubles_width(self):
        a = np.zeros((2, 3, 5))
        assert merge_directions(a, a, "concat").shape == (2, 3, 10)

    def test_pairwise_max_dominates_inputs(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((2, 6, 3, 4))
        out = merge_directions(a, b, "pairwise_max")
        assert np.all(out >= a) and np.all(out >= b)

    def test_pairwise_sum_commutes(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((2, 4, 2, 3))
        assert np.array_equal(
            merge_directions(a, b, "pairwise_sum"),
            merge_directions(b, a, "pairwise_sum"),
        )

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            merge_directions(np.zeros(2), np.zeros(2), "mean")

    @pytest.mark.parametrize("mode", ["pairwise_max", "pairwise_sum", "concat"])
    def test_bilstm_grad_check(self, mode):
        rng = np.random.default_rng(11)
        layer = BiLstm("b", 2, 3, mode, Rng(4))
        lengths = np.array([4, 2])
        sb = random_seq(rng, 4, 2, 2, lengths)
        w = rng.standard_normal((4, 2, layer.d_out)) * sb.mask()

        def compute():
            out, cache = layer.forward(sb)
            layer.backward(w, cache)
            return float((w * out.data).sum())

        check_layer_grads(layer.params(), compute, eps=1e-5, tol=1e-4)


class TestModulate:
    def test_unit_codes_are_identity_for_values_and_gradients(self):
        rng = np.random.default_rng(0)
        acts = random_seq(rng, 3, 2, 4)
        ones = acts.with_data(np.ones_like(acts.data))
        out = modulate(acts, ones)
        assert np.array_equal(out.data, acts.data)
        dout = rng.standard_normal(acts.data.shape)
        dacts, dcodes = modulate_backward(dout, acts, ones)
        assert np.array_equal(dacts, dout)
        assert np.array_equal(dcodes, dout * acts.data)

    def test_zero_codes_annihilate(self):
        rng = np.random.default_rng(1)
        acts = random_seq(rng, 3, 2, 4)
        zeros = acts.with_data(np.zeros_like(acts.data))
        out = modulate(acts, zeros)
        assert np.array_equal(out.data, np.zeros_like(acts.data))
        dout = np.ones_like(acts.data)
        dacts, dcodes = modulate_backward(dout, acts, zeros)
        assert np.array_equal(dacts, np.zeros_like(dout))
        assert np.array_equal(dcodes, acts.data)

    def test_shape_and_length_mismatch(self):
        a = seq(np.zeros((3, 1, 2)))
        with pytest.raises(ShapeError):
            modulate(a, seq(np.zeros((3, 1, 3))))
        with pytest.raises(ShapeError):
            modulate(a, SeqBatch(np.zeros((3, 1, 2)), np.array([2])))

    def test_grad_check_through_both_producers(self):
        # two dense producers feed modulation; both must receive exact grads
        rng = np.random.default_rng(7)
        da = Dense("acts", 3, 4, Rng(1))
        dc = Dense("codes", 3, 4, Rng(2))
        x = rng.standard_normal((3, 2, 3))
        lengths = np.array([3, 3])
        w = rng.standard_normal((3, 2, 4))

        def compute():
            a, ca = da.forward(x)
            c, cc = dc.forward(x)
            out = modulate(SeqBatch(a, lengths), SeqBatch(c, lengths))
            dacts, dcodes = modulate_backward(w, SeqBatch(a, lengths), SeqBatch(c, lengths))
            da.backward(dacts, ca)
            dc.backward(dcodes, cc)
            return float((w * out.data).sum())

        check_layer_grads(da.params() + dc.params(), compute, tol=1e-4)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 4))
        out, keep = dropout(x, 0.0, Rng(0).stream("d"), training=True)
        assert out is x and keep is None

    def test_evaluation_mode_is_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 4))
        out, keep = dropout(x, 0.2, Rng(0).stream("d"), training=False)
        assert out is x and keep is None

    def test_empirical_zero_fraction(self):
        x = np.ones(100_000)
        out, _ = dropout(x, 0.2, Rng(3).stream("drop"), training=True)
        frac = np.mean(out == 0.0)
        assert abs(frac - 0.2) <= 0.01

    def test_expectation_preserved_within_three_sigma(self):
        n = 100_000
        rate = 0.2
        x = np.ones(n)
        out, _ = dropout(x, rate, Rng(5).stream("drop"), training=True)
        sigma_mean = math.sqrt((rate / (1 - rate)) / n)
        assert abs(out.mean() - 1.0) <= 3 * sigma_mean

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            dropout(np.ones(2), 1.0, Rng(0).stream("d"), training=True)

    def test_backward_routes_through_kept_units(self):
        x = np.ones(1000)
        out, keep = dropout(x, 0.3, Rng(1).stream("d"), training=True)
        dx = dropout_backward(np.ones_like(x), keep)
        assert np.array_equal(dx, keep)


def test_batch_permutation_equivariance():
    """Permuting batch entries permutes outputs identically (no leakage)."""
    rng = np.random.default_rng(9)
    layer = BiLstm("b", 3, 4, "pairwise_max", Rng(2))
    lengths = np.array([5, 2, 4])
    sb = random_seq(rng, 5, 3, 3, lengths)
    out, _ = layer.forward(sb)
    perm = np.array([2, 0, 1])
    sb_p = SeqBatch(sb.data[:, perm], lengths[perm])
    out_p, _ = layer.forward(sb_p)
    assert np.allclose(out_p.data, out.data[:, perm], atol=1e-15)
