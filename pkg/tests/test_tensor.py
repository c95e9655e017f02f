"""Forward-value oracles for the tensor primitives, tape accounting, and the
checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from particlesim import tensor as T
from particlesim.tensor import (Tensor, Tape, ShapeError, ContractError,
                                DegenerateRowError, save_checkpoint, load_checkpoint)


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for q in range(k):
                acc += float(a[i, q]) * float(b[q, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_fixed_example(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_identity_and_annihilator(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((4, 4)))
        assert np.array_equal(T.matmul(a, Tensor(np.eye(4))).data, a.data)
        assert np.array_equal(T.matmul(a, Tensor(np.zeros((4, 4)))).data, np.zeros((4, 4)))

    @settings(max_examples=25, deadline=None)
    @given(m=st.integers(1, 5), k=st.integers(1, 5), n=st.integers(1, 5),
           seed=st.integers(0, 10**6))
    def test_matches_triple_loop(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, matmul_triple_loop(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_mixed_precision_rejected(self):
        a = Tensor(np.ones((2, 2)), dtype="f32")
        b = Tensor(np.ones((2, 2)), dtype="f64")
        with pytest.raises(ShapeError):
            T.matmul(a, b)


class TestElementwise:
    def test_add_bias_broadcast(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([10.0, 20.0])
        assert np.array_equal(T.add(a, b).data, [[11.0, 22.0], [13.0, 24.0]])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))

    def test_arith_values(self):
        a = Tensor([4.0, 9.0])
        b = Tensor([2.0, 3.0])
        assert np.array_equal(T.sub(a, b).data, [2.0, 6.0])
        assert np.array_equal(T.mul(a, b).data, [8.0, 27.0])
        assert np.array_equal(T.div(a, b).data, [2.0, 3.0])
        assert np.array_equal(T.scale(a, 0.5).data, [2.0, 4.5])
        assert np.array_equal(T.square(b).data, [4.0, 9.0])
        assert np.array_equal(T.sqrt(a).data, [2.0, 3.0])
        assert np.array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
        assert np.array_equal(T.neg(a).data, [-4.0, -9.0])

    def test_clamp_min(self):
        a = Tensor([1e-20, 0.5, -3.0])
        assert np.array_equal(T.clamp_min(a, 1e-10).data, [1e-10, 0.5, 1e-10])


class TestShapes:
    def test_concat_rows_cols_gather(self):
        a = Tensor(np.arange(12.0).reshape(3, 4))
        b = Tensor(np.arange(8.0).reshape(2, 4))
        cat = T.concat([a, b], axis=0)
        assert cat.data.shape == (5, 4)
        assert np.array_equal(T.rows(cat, 3, 5).data, b.data)
        assert np.array_equal(T.cols(a, 1, 3).data, a.data[:, 1:3])
        idx = np.array([2, 0, 2])
        assert np.array_equal(T.gather_rows(a, idx).data, a.data[idx])

    def test_segment_sum(self):
        a = Tensor([[1.0], [2.0], [3.0], [4.0]])
        out = T.segment_sum(a, np.array([0, 0, 2, 2]), 3)
        assert np.array_equal(out.data, [[3.0], [0.0], [7.0]])

    def test_reduce(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert T.reduce_sum(a).item() == 10.0
        assert np.array_equal(T.reduce_sum(a, axis=1).data, [3.0, 7.0])
        assert np.array_equal(T.reduce_mean(a, axis=0).data, [2.0, 3.0])
        assert T.reduce_mean(a).item() == 2.5

    def test_row_col_scaling(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        v = Tensor([2.0, 10.0])
        assert np.array_equal(T.scale_rows(m, v).data, [[2.0, 4.0], [30.0, 40.0]])
        assert np.array_equal(T.shift_rows(m, v).data, [[3.0, 4.0], [13.0, 14.0]])
        assert np.array_equal(T.div_rows(m, v).data, [[0.5, 1.0], [0.3, 0.4]])
        assert np.array_equal(T.scale_cols(m, v).data, [[2.0, 20.0], [6.0, 40.0]])


class TestSoftmax:
    def test_masked_vector_example(self):
        logits = Tensor([1.0, 2.0, 3.0])
        out = T.softmax_masked(logits, np.array([True, True, False]))
        e = np.exp([1.0 - 2.0, 0.0])
        expect = e / e.sum()
        assert np.allclose(out.data[:2], expect, atol=1e-15)
        assert out.data[2] == 0.0
        assert abs(out.data.sum() - 1.0) < 1e-15

    def test_masked_rowwise(self):
        logits = Tensor(np.array([[0.0, 0.0, 5.0], [1.0, 1.0, 1.0]]))
        mask = np.array([[True, True, False], [True, True, True]])
        out = T.softmax_masked(logits, mask)
        assert np.allclose(out.data[0], [0.5, 0.5, 0.0])
        assert np.allclose(out.data[1], [1 / 3] * 3)

    def test_all_masked_raises(self):
        with pytest.raises(DegenerateRowError):
            T.softmax_masked(Tensor([1.0, 2.0]), np.array([False, False]))
        with pytest.raises(DegenerateRowError):
            T.softmax_masked(Tensor(np.ones((2, 2))),
                             np.array([[True, True], [False, False]]))

    def test_extreme_logits_stable(self):
        out = T.softmax_masked(Tensor([1000.0, 999.0]), np.array([True, True]))
        assert np.isfinite(out.data).all()
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_segment_matches_masked(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(10)
        seg = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3])
        got = T.segment_softmax(Tensor(logits), seg, 4).data
        for s in range(4):
            sel = seg == s
            expect = T.softmax_masked(Tensor(logits[sel]), np.ones(sel.sum(), bool)).data
            assert np.allclose(got[sel], expect, atol=1e-14)

    def test_segment_empty_segment_ok(self):
        out = T.segment_softmax(Tensor([1.0, 2.0]), np.array([0, 2]), 3)
        assert np.allclose(out.data, [1.0, 1.0])


class TestLayerNorm:
    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6))
        gain = rng.standard_normal(6)
        shift = rng.standard_normal(6)
        got = T.layer_norm(Tensor(x), Tensor(gain), Tensor(shift)).data
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        expect = gain * (x - mu) / np.sqrt(var + T.LAYER_NORM_EPS) + shift
        assert np.allclose(got, expect, atol=1e-14)

    def test_constant_row_is_finite(self):
        out = T.layer_norm(Tensor(np.full((1, 4), 7.0)),
                           Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0)

    def test_single_feature_rejected(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestTape:
    def test_macs_and_scopes(self):
        with Tape() as tape:
            a = Tensor(np.ones((2, 3)), requires_grad=True)
            b = Tensor(np.ones((3, 4)))
            with tape.scope("mm"):
                c = T.matmul(a, b)
            with tape.scope("el"):
                T.mul(c, c)
        by_scope = tape.macs_by_scope()
        assert by_scope["mm"] == 2 * 3 * 4
        assert by_scope["el"] == 8
        assert tape.total_macs() == 32

    def test_zero_mac_ops(self):
        with Tape() as tape:
            a = Tensor(np.ones((2, 2)), requires_grad=True)
            T.add(a, a)
            T.relu(a)
            T.reduce_sum(a)
            T.concat([a, a], axis=0)
        assert tape.total_macs() == 0

    def test_backward_requires_scalar(self):
        with Tape() as tape:
            a = Tensor(np.ones((2, 2)), requires_grad=True)
            out = T.mul(a, a)
        with pytest.raises(ContractError):
            T.backward(out, tape)

    def test_no_tape_means_no_recording(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        out = T.mul(a, a)  # outside any Tape context
        assert out.requires_grad
        assert T.active_tape() is None


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "a.w": Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True),
            "b.v": Tensor(rng.standard_normal(7), requires_grad=True),
            "c": Tensor(np.float64(3.25).reshape(()), requires_grad=True),
        }
        man, blob = tmp_path / "m.json", tmp_path / "b.bin"
        save_checkpoint(params, man, blob)
        loaded = load_checkpoint(man, blob)
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].data.dtype == params[k].data.dtype
            assert np.array_equal(loaded[k].data, params[k].data)
            assert loaded[k].data.tobytes() == params[k].data.tobytes()

    def test_blob_size_mismatch(self, tmp_path):
        params = {"w": Tensor(np.ones((2, 2)))}
        man, blob = tmp_path / "m.json", tmp_path / "b.bin"
        save_checkpoint(params, man, blob)
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(IOError):
            load_checkpoint(man, blob)
