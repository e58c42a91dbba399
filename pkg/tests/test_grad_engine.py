import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorcl import grad_engine as ge
from priorcl.grad_engine import GradientContractError, ShapeError, Tape
from priorcl import gradcheck


def naive_conv1d(x, w, b, stride):
    c_out, c_in, k = w.shape
    t_out = (x.shape[1] - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            acc = b[o]
            for c in range(c_in):
                for j in range(k):
                    acc += w[o, c, j] * x[c, t * stride + j]
            out[o, t] = acc
    return out


class TestConv1d:
    def test_zero_input_gives_bias(self):
        tape = Tape()
        b = np.array([0.5, -2.0, 3.0])
        out = ge.conv1d(tape.constant(np.zeros((2, 10))), tape.constant(np.ones((3, 2, 3))), tape.constant(b), 2)
        assert np.all(out.data == b[:, None])

    def test_scalar_scaling(self):
        tape = Tape()
        out = ge.conv1d(tape.constant([[1.0, 2.0, 3.0]]), tape.constant([[[2.0]]]), tape.constant([0.0]), 1)
        assert out.data.tolist() == [[2.0, 4.0, 6.0]]

    @pytest.mark.parametrize("stride", [1, 2, 3, 4])
    def test_matches_loop_oracle(self, stride):
        rng = np.random.default_rng(stride)
        x, w, b = rng.normal(size=(3, 37)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
        tape = Tape()
        out = ge.conv1d(tape.constant(x), tape.constant(w), tape.constant(b), stride)
        np.testing.assert_allclose(out.data, naive_conv1d(x, w, b, stride), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(5, 2, 30)), rng.normal(size=(3, 2, 4)), rng.normal(size=3)
        tape = Tape()
        batched = ge.conv1d(tape.constant(x), tape.constant(w), tape.constant(b), 2).data
        for i in range(5):
            single = ge.conv1d(tape.constant(x[i]), tape.constant(w), tape.constant(b), 2).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-13)

    def test_finite_differences(self):
        assert gradcheck.check_conv1d().passed

    def test_shape_errors_name_axis(self):
        tape = Tape()
        with pytest.raises(ShapeError, match="channel"):
            ge.conv1d(tape.constant(np.zeros((3, 10))), tape.constant(np.zeros((1, 2, 3))), tape.constant([0.0]))
        with pytest.raises(ShapeError, match="time"):
            ge.conv1d(tape.constant(np.zeros((1, 2))), tape.constant(np.zeros((1, 1, 3))), tape.constant([0.0]))
        with pytest.raises(ShapeError, match="bias"):
            ge.conv1d(tape.constant(np.zeros((1, 9))), tape.constant(np.zeros((2, 1, 3))), tape.constant([0.0]))


class TestLayernorm:
    def test_constant_input_collapses_to_offset(self):
        tape = Tape()
        out = ge.layernorm(tape.constant(np.full((2, 5), 7.0)), tape.constant(np.ones(2)), tape.constant(np.zeros(2)))
        assert np.all(out.data == 0.0)

    def test_two_point_standardization(self):
        tape = Tape()
        out = ge.layernorm(tape.constant([[1.0, 3.0]]), tape.constant([1.0]), tape.constant([0.0]), eps=1e-15)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)

    def test_normalizes_joint_map(self):
        x = np.random.default_rng(3).normal(loc=4.0, scale=3.0, size=(3, 4, 20))
        tape = Tape()
        out = ge.layernorm(tape.constant(x), tape.constant(np.ones(4)), tape.constant(np.zeros(4))).data
        np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, rtol=1e-5)

    def test_finite_differences(self):
        assert gradcheck.check_layernorm().passed

    def test_non_positive_eps_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ge.layernorm(tape.constant(np.ones((1, 3))), tape.constant([1.0]), tape.constant([0.0]), eps=0.0)


class TestGelu:
    def test_values(self):
        tape = Tape()
        out = ge.gelu(tape.constant([0.0, 10.0, -10.0, 1.0])).data
        assert out[0] == 0.0
        assert abs(out[1] - 10.0) < 1e-6
        assert abs(out[2]) < 1e-6
        assert out[3] == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), rel=1e-15)

    def test_finite_differences(self):
        assert gradcheck.check_gelu().passed


class TestDense:
    def test_identity_and_zero_maps(self):
        tape = Tape()
        x = np.array([1.0, -2.0, 3.0])
        assert ge.dense(tape.constant(x), tape.constant(np.eye(3)), tape.constant(np.zeros(3))).data.tolist() == x.tolist()
        b = np.array([4.0, 5.0])
        assert ge.dense(tape.constant(x), tape.constant(np.zeros((2, 3))), tape.constant(b)).data.tolist() == [4.0, 5.0]

    def test_finite_differences(self):
        assert gradcheck.check_dense().passed

    def test_cross_entropy_finite_differences(self):
        assert gradcheck.check_cross_entropy().passed


class TestBackwardContract:
    def test_sum_gives_ones(self):
        tape = Tape()
        p = tape.leaf(np.arange(6.0).reshape(2, 3))
        grads = ge.backward(tape, ge.sum_all(p))
        assert np.all(grads[p] == 1.0)

    def test_constant_loss_gives_zeros(self):
        tape = Tape()
        p = tape.leaf(np.ones(4))
        loss = tape.constant(3.0)
        grads = ge.backward(tape, loss)
        assert np.all(grads[p] == 0.0)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = tape.leaf(np.ones(3))
        with pytest.raises(GradientContractError):
            ge.backward(tape, p * 2.0)

    def test_shared_subexpression_accumulates(self):
        tape = Tape()
        p = tape.leaf(np.array([2.0, -1.0]))
        y = p * p
        loss = ge.sum_all(y + y * 3.0)
        grads = ge.backward(tape, loss)
        np.testing.assert_allclose(grads[p], 8.0 * p.data)

    def test_linearity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=8)
        wa, wb = rng.normal(size=8), rng.normal(size=8)

        def grad_of(weights):
            tape = Tape()
            p = tape.leaf(x)
            return ge.backward(tape, ge.sum_all(ge.mul(ge.gelu(p), weights)))[p]

        np.testing.assert_allclose(grad_of(wa + 2 * wb), grad_of(wa) + 2 * grad_of(wb), rtol=1e-12, atol=1e-14)

    def test_deterministic(self):
        params, x, plans = gradcheck.micro_batch(0)

        def run():
            tape = Tape()
            enc = {k: tape.leaf(v) for k, v in params.encoder.items()}
            proj = {k: tape.leaf(v) for k, v in params.projection.items()}
            loss = gradcheck.full_chain_loss(tape, enc, proj, tape.constant(x[:, None, :]), plans)
            grads = ge.backward(tape, loss)
            return [grads[t] for t in list(enc.values()) + list(proj.values())]

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)

    def test_cross_tape_rejected(self):
        a, b = Tape(), Tape()
        with pytest.raises(ValueError):
            ge.add(a.leaf(1.0), b.leaf(2.0))


class TestCosineMatrix:
    def test_matches_pairwise(self):
        z = np.random.default_rng(2).normal(size=(5, 7))
        tape = Tape()
        s = ge.cosine_matrix(tape.constant(z)).data
        for i in range(5):
            for j in range(5):
                expect = z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j]))
                assert s[i, j] == pytest.approx(expect, rel=1e-10)

    def test_finite_differences(self):
        z = np.random.default_rng(4).normal(size=(4, 6))
        w = np.random.default_rng(5).normal(size=(4, 4))
        result = gradcheck.check_tape("cosine_matrix", lambda t, p: ge.sum_all(ge.mul(ge.cosine_matrix(p["z"]), w)),
                                      {"z": z})
        assert result.passed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_elementwise_gradients(values):
    x = np.array(values)

    def build(t, p):
        return ge.sum_all(ge.exp(ge.mul(p["x"], 0.3)) + ge.mul(ge.gelu(p["x"]), p["x"]) - p["x"])

    assert gradcheck.check_tape("elementwise", build, {"x": x}, rtol=1e-6, atol=1e-7).passed


def test_full_chain_gradients():
    result = gradcheck.check_full_chain()
    assert result.passed, result
