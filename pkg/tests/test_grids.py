"""Numerics core: forward ops against straight-line oracles, gradients
against central finite differences, Adam against a hand trace."""

import math

import mpmath
import numpy as np
import pytest

from groupctr import grids
from groupctr.grids import (
    DegenerateMaskError,
    GraphError,
    GridShapeError,
    Parameter,
    ParameterStore,
    ValueGrid,
    gradients,
)
from groupctr.optim import OptimizerError, adam_step


# ---------------------------------------------------------------------------
# oracles: independent, deliberately naive implementations


def matmul_oracle(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_oracle_mp(row):
    """Row softmax in 80-digit arithmetic."""
    with mpmath.workdps(80):
        exps = [mpmath.exp(mpmath.mpf(v)) for v in row]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def layer_norm_oracle(x, gain, shift, eps=1e-5):
    """Two-pass mean/variance per row, then affine."""
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        std = math.sqrt(var + eps)
        out[i] = (row - mu) / std * gain + shift
    return out


def fd_gradient(loss_fn, param, step=1e-4):
    """Central finite differences of loss_fn() w.r.t. every entry of param."""
    grid = param.grid.data
    out = np.zeros_like(grid)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            orig = grid[i, j]
            grid[i, j] = orig + step
            up = loss_fn()
            grid[i, j] = orig - step
            down = loss_fn()
            grid[i, j] = orig
            out[i, j] = (up - down) / (2.0 * step)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# forward ops


class TestLinearMap:
    def test_identity_weight_returns_input(self):
        rng = np.random.default_rng(0)
        x = ValueGrid(rng.normal(size=(3, 4)))
        w = Parameter("w", np.eye(4))
        out = grids.linear_map(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_gives_bias_rows(self):
        w = Parameter("w", np.ones((4, 2)))
        b = Parameter("b", [[0.5, -1.5]])
        out = grids.linear_map(ValueGrid.zeros(3, 4), w, b)
        np.testing.assert_array_equal(out.data, np.tile([0.5, -1.5], (3, 1)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        bias = rng.normal(size=(1, 2))
        expected = matmul_oracle(a, b) + bias
        out = grids.linear_map(ValueGrid(a), Parameter("w", b), Parameter("b", bias))
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(GridShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            grids.matmul(ValueGrid.zeros(2, 3), ValueGrid.zeros(4, 2))


class TestSoftmaxRows:
    def test_singleton_row_is_one(self):
        out = grids.softmax_rows(ValueGrid([[3.7]]))
        assert out.data[0, 0] == 1.0

    def test_large_scores_do_not_overflow(self):
        out = grids.softmax_rows(ValueGrid([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[0], softmax_oracle_mp([1000.0, 0.0]),
                                   rtol=0, atol=1e-15)

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(11)
        x = rng.normal(scale=5.0, size=(6, 8))
        out = grids.softmax_rows(ValueGrid(x))
        for i in range(6):
            np.testing.assert_allclose(out.data[i], softmax_oracle_mp(x[i]),
                                       rtol=0, atol=1e-14)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        out = grids.softmax_rows(ValueGrid(rng.normal(size=(20, 9))))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(20),
                                   rtol=0, atol=1e-12)

    def test_masked_entries_are_exactly_zero(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(4, 5))
        mask = rng.random((4, 5)) > 0.4
        mask[:, 0] = True
        out = grids.softmax_rows(ValueGrid(x), mask)
        assert (out.data[~mask] == 0.0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-12)

    def test_fully_masked_row_raises(self):
        with pytest.raises(DegenerateMaskError):
            grids.softmax_rows(ValueGrid.zeros(2, 3),
                               np.array([[True, True, True], [False, False, False]]))


class TestLayerNormalize:
    def _gain_shift(self, cols):
        return Parameter("g", np.ones((1, cols))), Parameter("s", np.zeros((1, cols)))

    def test_constant_row_maps_to_zero(self):
        gain, shift = self._gain_shift(3)
        out = grids.layer_normalize(ValueGrid([[5.0, 5.0, 5.0]]), gain.grid, shift.grid)
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-12)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(5, 7))
        gain = rng.normal(size=7)
        shift = rng.normal(size=7)
        out = grids.layer_normalize(ValueGrid(x),
                                    ValueGrid(gain.reshape(1, -1)),
                                    ValueGrid(shift.reshape(1, -1)))
        np.testing.assert_allclose(out.data, layer_norm_oracle(x, gain, shift),
                                   rtol=0, atol=1e-12)

    def test_normalized_rows_have_zero_mean_unit_var(self):
        rng = np.random.default_rng(22)
        x = rng.normal(scale=3.0, size=(10, 16))
        gain, shift = self._gain_shift(16)
        out = grids.layer_normalize(ValueGrid(x), gain.grid, shift.grid)
        np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(10), atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), np.ones(10), atol=1e-4)


class TestFeedForward:
    def test_zero_input_follows_bias_path(self):
        rng = np.random.default_rng(31)
        w1 = Parameter("w1", rng.normal(size=(4, 6)))
        b1 = Parameter("b1", rng.normal(size=(1, 6)))
        w2 = Parameter("w2", rng.normal(size=(6, 3)))
        b2 = Parameter("b2", rng.normal(size=(1, 3)))
        out = grids.feed_forward(ValueGrid.zeros(2, 4), w1, b1, w2, b2)
        expected = np.maximum(b1.grid.data, 0.0) @ w2.grid.data + b2.grid.data
        np.testing.assert_allclose(out.data, np.tile(expected, (2, 1)), atol=1e-12)

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(32)
        x = rng.normal(size=(3, 4))
        w1 = rng.normal(size=(4, 8))
        b1 = rng.normal(size=(1, 8))
        w2 = rng.normal(size=(8, 2))
        b2 = rng.normal(size=(1, 2))
        expected = np.maximum(matmul_oracle(x, w1) + b1, 0.0)
        expected = matmul_oracle(expected, w2) + b2
        out = grids.feed_forward(ValueGrid(x), Parameter("w1", w1), Parameter("b1", b1),
                                 Parameter("w2", w2), Parameter("b2", b2))
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


class TestBlockOps:
    def test_block_scores_matches_per_block_loop(self):
        rng = np.random.default_rng(41)
        n, qb, kb, d = 3, 2, 4, 5
        q = rng.normal(size=(n * qb, d))
        k = rng.normal(size=(n * kb, d))
        out = grids.block_scores(ValueGrid(q), ValueGrid(k), qb, kb)
        for b in range(n):
            for i in range(qb):
                for j in range(kb):
                    expected = float(q[b * qb + i] @ k[b * kb + j])
                    assert abs(out.data[b * qb + i, j] - expected) < 1e-12

    def test_block_mix_matches_per_block_loop(self):
        rng = np.random.default_rng(42)
        n, qb, kb, d = 2, 3, 4, 6
        w = rng.normal(size=(n * qb, kb))
        v = rng.normal(size=(n * kb, d))
        out = grids.block_mix(ValueGrid(w), ValueGrid(v), qb, kb)
        for b in range(n):
            for i in range(qb):
                expected = w[b * qb + i] @ v[b * kb:(b + 1) * kb]
                np.testing.assert_allclose(out.data[b * qb + i], expected, atol=1e-12)

    def test_block_mean_skips_masked_rows(self):
        x = np.arange(12.0).reshape(6, 2)
        mask = np.array([True, False, True, True, True, False])
        out = grids.block_mean(ValueGrid(x), mask, 3)
        np.testing.assert_allclose(out.data[0], (x[0] + x[2]) / 2.0)
        np.testing.assert_allclose(out.data[1], (x[3] + x[4]) / 2.0)

    def test_block_mean_empty_block_raises(self):
        with pytest.raises(DegenerateMaskError):
            grids.block_mean(ValueGrid.zeros(4, 2), [False, False, True, True], 2)


class TestSmallOps:
    def test_gather_rows_selects_and_repeats(self):
        table = ValueGrid(np.arange(12.0).reshape(4, 3))
        out = grids.gather_rows(table, [2, 0, 2])
        np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])

    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(51)
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 5))
        joined = grids.concat_cols([ValueGrid(a), ValueGrid(b)])
        np.testing.assert_array_equal(grids.slice_cols(joined, 2, 7).data, b)

    def test_scatter_rows_places_rows(self):
        x = ValueGrid([[1.0, 2.0], [3.0, 4.0]])
        out = grids.scatter_rows(x, [3, 1], 5)
        assert out.data[3, 0] == 1.0 and out.data[1, 1] == 4.0
        assert out.data[0].sum() == 0.0 and out.data[2].sum() == 0.0

    def test_clip_bounds_values(self):
        out = grids.clip(ValueGrid([[-1.0, 0.5, 2.0]]), 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [[0.0, 0.5, 1.0]])


# ---------------------------------------------------------------------------
# gradients


class TestGradients:
    def test_sum_gradient_is_ones(self):
        p = Parameter("p", np.random.default_rng(61).normal(size=(3, 4)))
        gradients(grids.sum_all(p.grid))
        np.testing.assert_array_equal(p.gradient.data, np.ones((3, 4)))

    def test_sum_of_squares_gradient_is_two_w(self):
        w = Parameter("w", [[1.0, 2.0], [0.0, 3.0]])
        gradients(grids.sum_all(grids.multiply(w.grid, w.grid)))
        np.testing.assert_allclose(w.gradient.data, 2.0 * w.grid.data, atol=1e-12)

    def test_additivity_of_two_backward_passes(self):
        rng = np.random.default_rng(62)
        w = Parameter("w", rng.normal(size=(2, 3)))
        x1 = ValueGrid(rng.normal(size=(4, 2)))
        x2 = ValueGrid(rng.normal(size=(4, 2)))
        gradients(grids.sum_all(grids.matmul(x1, w.grid)))
        first = w.gradient.data.copy()
        w.zero_gradient()
        gradients(grids.sum_all(grids.matmul(x2, w.grid)))
        second = w.gradient.data.copy()
        w.zero_gradient()
        gradients(grids.sum_all(grids.matmul(x1, w.grid)))
        gradients(grids.sum_all(grids.matmul(x2, w.grid)))
        np.testing.assert_allclose(w.gradient.data, first + second, atol=1e-12)

    def test_diamond_reuse_accumulates(self):
        # y = w used twice: loss = sum(w @ w), checked against finite differences
        w = Parameter("w", np.random.default_rng(63).normal(size=(3, 3)))

        def loss_fn():
            return grids.sum_all(grids.matmul(w.grid, w.grid)).item()

        gradients(grids.sum_all(grids.matmul(w.grid, w.grid)))
        fd = fd_gradient(loss_fn, w)
        assert max_rel_err(w.gradient.data, fd) < 1e-6

    @pytest.mark.parametrize("name", [
        "matmul", "add_bias", "multiply", "relu", "sigmoid", "log", "softmax",
        "softmax_masked", "layer_norm", "block_scores", "block_mix",
        "block_mean", "gather", "scatter", "tile", "concat_slice", "clip",
    ])
    def test_primitive_against_finite_differences(self, name):
        rng = np.random.default_rng(hash(name) % (2 ** 32))
        p = Parameter("p", rng.normal(size=(4, 6)))
        probe = ValueGrid(rng.normal(size=(4, 6)))

        def build():
            g = p.grid
            if name == "matmul":
                out = grids.matmul(g, ValueGrid(rng2))
            elif name == "add_bias":
                out = grids.add(probe, grids.matmul(g, ValueGrid(np.eye(6))))
            elif name == "multiply":
                out = grids.multiply(g, probe)
            elif name == "relu":
                out = grids.relu(g)
            elif name == "sigmoid":
                out = grids.sigmoid(g)
            elif name == "log":
                out = grids.log(grids.add_scalar(grids.sigmoid(g), 0.5))
            elif name == "softmax":
                out = grids.softmax_rows(g)
            elif name == "softmax_masked":
                out = grids.softmax_rows(g, mask6)
            elif name == "layer_norm":
                out = grids.layer_normalize(g, gain.grid, shift.grid)
            elif name == "block_scores":
                out = grids.block_scores(g, probe, 2, 2)
            elif name == "block_mix":
                out = grids.block_mix(grids.softmax_rows(grids.block_scores(
                    g, probe, 2, 2)), g, 2, 2)
            elif name == "block_mean":
                out = grids.block_mean(g, mean_mask, 2)
            elif name == "gather":
                out = grids.gather_rows(g, [1, 1, 3, 0])
            elif name == "scatter":
                out = grids.scatter_rows(g, [5, 1, 4, 0], 7)
            elif name == "tile":
                pooled = grids.block_mean(g, np.ones(4, dtype=bool), 4)
                out = grids.matmul(grids.tile_rows(pooled, 5), ValueGrid(rng3))
            elif name == "concat_slice":
                out = grids.slice_cols(grids.concat_cols([g, probe]), 3, 9)
            elif name == "clip":
                out = grids.clip(g, -0.5, 0.5)
            else:
                raise AssertionError(name)
            # weighted sum keeps the loss sensitive to every output entry
            w = ValueGrid(weights[: out.rows, : out.cols])
            return grids.sum_all(grids.multiply(out, w))

        rng2 = rng.normal(size=(6, 3))
        rng3 = rng.normal(size=(6, 2))
        mask6 = rng.random((4, 6)) > 0.3
        mask6[:, 2] = True
        mean_mask = np.array([True, False, True, True])
        gain = Parameter("gain", rng.normal(size=(1, 6)) + 1.0)
        shift = Parameter("shift", rng.normal(size=(1, 6)))
        weights = rng.normal(size=(16, 16))

        gradients(build())
        fd = fd_gradient(lambda: build().item(), p)
        assert max_rel_err(p.gradient.data, fd) < 1e-6, name

    def test_layer_norm_gain_shift_gradients(self):
        rng = np.random.default_rng(71)
        x = ValueGrid(rng.normal(size=(5, 4)))
        gain = Parameter("gain", rng.normal(size=(1, 4)) + 1.0)
        shift = Parameter("shift", rng.normal(size=(1, 4)))
        weights = rng.normal(size=(5, 4))

        def build():
            out = grids.layer_normalize(x, gain.grid, shift.grid)
            return grids.sum_all(grids.multiply(out, ValueGrid(weights)))

        gradients(build())
        for param in (gain, shift):
            fd = fd_gradient(lambda: build().item(), param)
            assert max_rel_err(param.gradient.data, fd) < 1e-6

    def test_loss_must_be_scalar(self):
        p = Parameter("p", np.ones((2, 2)))
        with pytest.raises(GraphError):
            gradients(grids.relu(p.grid))

    def test_loss_without_history_raises(self):
        with pytest.raises(GraphError):
            gradients(ValueGrid([[1.0]]))


# ---------------------------------------------------------------------------
# optimizer


class TestAdam:
    def test_single_step_moves_by_about_lr(self):
        p = Parameter("p", [[1.0]])
        store = ParameterStore(seed=0)
        store._params["p"] = p
        p.gradient.data[:] = 1.0
        adam_step(store, lr=0.001)
        # with bias correction the very first step is lr * g / (|g| + eps)
        assert abs((1.0 - p.grid.data[0, 0]) - 0.001) < 1e-9
        assert p.step_count == 1
        assert p.gradient.data[0, 0] == 0.0

    def test_two_steps_match_hand_trace(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g1, g2 = 0.3, -0.7
        # hand trace of the update recurrence
        theta, m, v = 2.0, 0.0, 0.0
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

        p = Parameter("p", [[2.0]])
        store = ParameterStore(seed=0)
        store._params["p"] = p
        p.gradient.data[:] = g1
        adam_step(store, lr=lr)
        p.gradient.data[:] = g2
        adam_step(store, lr=lr)
        assert abs(p.grid.data[0, 0] - theta) < 1e-12

    def test_zero_gradient_leaves_parameter_unchanged(self):
        store = ParameterStore(seed=3)
        p = store.weight("w", 3, 3)
        before = p.grid.data.copy()
        adam_step(store, lr=0.05)
        np.testing.assert_array_equal(p.grid.data, before)

    def test_nonfinite_gradient_aborts_naming_parameter(self):
        store = ParameterStore(seed=4)
        good = store.weight("fine", 2, 2)
        bad = store.weight("blows_up", 2, 2)
        good.gradient.data[:] = 1.0
        bad.gradient.data[0, 0] = np.nan
        before = good.grid.data.copy()
        with pytest.raises(OptimizerError, match="blows_up"):
            adam_step(store, lr=0.01)
        np.testing.assert_array_equal(good.grid.data, before)

    def test_zero_lr_changes_nothing(self):
        store = ParameterStore(seed=5)
        p = store.weight("w", 2, 2)
        p.gradient.data[:] = 3.0
        before = p.grid.data.copy()
        adam_step(store, lr=0.0)
        np.testing.assert_array_equal(p.grid.data, before)


class TestParameterStore:
    def test_seeded_init_is_reproducible(self):
        a = ParameterStore(seed=42).weight("w", 5, 7)
        b = ParameterStore(seed=42).weight("w", 5, 7)
        np.testing.assert_array_equal(a.grid.data, b.grid.data)

    def test_init_respects_fan_bound(self):
        p = ParameterStore(seed=1).weight("w", 30, 50)
        limit = math.sqrt(6.0 / 80.0)
        assert np.abs(p.grid.data).max() <= limit

    def test_duplicate_name_rejected(self):
        store = ParameterStore(seed=0)
        store.weight("w", 2, 2)
        with pytest.raises(Exception, match="duplicate"):
            store.weight("w", 2, 2)

    def test_forward_determinism(self):
        def run():
            store = ParameterStore(seed=9)
            w = store.weight("w", 6, 6)
            x = ValueGrid(np.random.default_rng(1).normal(size=(4, 6)))
            out = grids.softmax_rows(grids.matmul(grids.relu(
                grids.matmul(x, w.grid)), w.grid))
            return out.data.copy()

        np.testing.assert_array_equal(run(), run())


class TestNoGrad:
    def test_forward_values_match_and_graph_is_absent(self):
        rng = np.random.default_rng(55)
        p = Parameter("w", rng.normal(size=(3, 3)))
        x = ValueGrid(rng.normal(size=(4, 3)))
        recorded = grids.matmul(x, p.grid)
        with grids.no_grad():
            bare = grids.matmul(x, p.grid)
        assert np.array_equal(recorded.data, bare.data)
        assert bare._vjp is None and bare._parents == ()
        assert recorded._vjp is not None

    def test_gradients_refuse_unrecorded_loss(self):
        p = Parameter("w", np.ones((1, 1)))
        with grids.no_grad():
            loss = grids.sum_all(grids.relu(p.grid))
        with pytest.raises(GraphError):
            grids.gradients(loss)

    def test_recording_resumes_after_context(self):
        p = Parameter("w", np.full((1, 1), 2.0))
        with grids.no_grad():
            pass
        loss = grids.sum_all(grids.scale(p.grid, 3.0))
        p.zero_gradient()
        grids.gradients(loss)
        assert p.gradient.data[0, 0] == 3.0
