import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from graphlora.numerics import (
    AdamState,
    ContractError,
    InvalidInputError,
    Tensor,
    adam_step,
    child_rng,
    finite_diff_check,
    grad_of,
    make_rng,
    matrix_from_bytes,
    matrix_to_bytes,
    read_matrix,
    spectral_norm,
    svd,
    write_matrix,
)


def _recompose(u, s, v):
    return u @ np.diag(s) @ v.T


class TestSvd:
    def test_diagonal(self):
        _, s, _ = svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(s, [3, 2, 1], atol=1e-14)

    def test_identity(self):
        _, s, _ = svd(np.eye(4))
        np.testing.assert_allclose(s, np.ones(4), atol=1e-14)

    def test_random_5x3_reconstructs(self):
        m = make_rng(3).standard_normal((5, 3))
        u, s, v = svd(m)
        assert np.max(np.abs(_recompose(u, s, v) - m)) <= 1e-10

    def test_matches_lapack_singular_values(self):
        m = make_rng(7).standard_normal((9, 6))
        np.testing.assert_allclose(svd(m)[1], np.linalg.svd(m, compute_uv=False), atol=1e-12)

    def test_wide_and_rank_deficient(self):
        rng = make_rng(11)
        m = rng.standard_normal((3, 2)) @ rng.standard_normal((2, 7))
        u, s, v = svd(m)
        assert u.shape == (3, 3) and v.shape == (7, 3)
        assert s[-1] < 1e-12
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-10)
        assert np.max(np.abs(_recompose(u, s, v) - m)) <= 1e-10

    def test_zero_matrix(self):
        u, s, v = svd(np.zeros((4, 3)))
        assert np.all(s == 0)
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)

    def test_64x64_round_trip(self):
        m = make_rng(5).standard_normal((64, 64))
        u, s, v = svd(m)
        assert np.max(np.abs(_recompose(u, s, v) - m)) <= 1e-10
        np.testing.assert_allclose(v.T @ v, np.eye(64), atol=1e-10)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejected(self, bad):
        m = np.ones((3, 3))
        m[1, 2] = bad
        with pytest.raises(InvalidInputError):
            svd(m)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_properties(self, m):
        u, s, v = svd(m)
        assert np.all(s >= 0)
        assert np.all(np.diff(s) <= 1e-12 * max(1.0, s[0]))
        scale = max(1.0, np.abs(m).max())
        assert np.max(np.abs(_recompose(u, s, v) - m)) <= 1e-10 * scale
        k = len(s)
        np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-10)

    def test_spectral_norm(self):
        m = make_rng(2).standard_normal((6, 4))
        assert spectral_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-12)


class TestAdam:
    def test_first_step_is_lr_sized(self):
        params = {"t": np.array([0.0])}
        adam_step(AdamState(lr=0.1), params, {"t": np.array([1.0])})
        assert params["t"][0] == pytest.approx(-0.1, abs=1e-8)

    def test_zero_gradient_keeps_params(self):
        params = {"w": np.arange(4.0).reshape(2, 2)}
        before = params["w"].copy()
        adam_step(AdamState(lr=0.5), params, {"w": np.zeros((2, 2))})
        np.testing.assert_array_equal(params["w"], before)

    def test_frozen_gradient_ignored(self):
        frozen = np.ones((2, 2))
        params = {"f": frozen, "w": np.zeros(3)}
        adam_step(AdamState(lr=0.1), params, {"f": np.full((2, 2), 5.0), "w": np.ones(3)},
                  frozen={"f"})
        assert params["f"] is frozen
        np.testing.assert_array_equal(params["f"], np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(4)})

    def test_missing_gradient(self):
        with pytest.raises(ContractError):
            adam_step(AdamState(), {"w": np.zeros(3)}, {})

    def test_matches_reference_trajectory(self):
        # independent scalar re-derivation of bias-corrected Adam
        rng = make_rng(1)
        gs = rng.standard_normal(20)
        params = {"t": np.array([0.3])}
        state = AdamState(lr=0.05)
        theta, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(gs, start=1):
            adam_step(state, params, {"t": np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert params["t"][0] == pytest.approx(theta, abs=1e-14)

    def test_deterministic_trajectories(self):
        def run():
            rng = make_rng(42)
            params = {"w": rng.standard_normal((3, 3))}
            state = AdamState(lr=0.01)
            for _ in range(25):
                adam_step(state, params, {"w": rng.standard_normal((3, 3))})
            return params["w"]
        assert run().tobytes() == run().tobytes()


class TestGradients:
    def test_half_norm_grad_is_w(self):
        w = make_rng(0).standard_normal((3, 4))
        _, grads = grad_of(lambda p: (p["w"] * p["w"]).sum() * 0.5, {"w": w})
        np.testing.assert_allclose(grads["w"], w, atol=1e-15)

    def test_quadratic_fd_tight(self):
        a = make_rng(1).standard_normal((4, 4))
        rep = finite_diff_check(lambda p: ((p["x"] @ Tensor(a)) * p["x"]).sum(),
                                {"x": make_rng(2).standard_normal((1, 4))}, tol=1e-8)
        assert rep.worst <= 1e-8

    def test_corrupted_gradient_detected(self):
        x = make_rng(4).standard_normal((2, 3))
        loss = lambda p: (p["x"] * p["x"]).sum()
        _, grads = grad_of(loss, {"x": x})
        grads["x"] = grads["x"] + 0.5
        rep = finite_diff_check(loss, {"x": x}, grads=grads)
        assert rep.worst > 1e-2 and not rep.passed

    def test_check_never_mutates(self):
        x = make_rng(5).standard_normal((3, 2))
        before = x.copy()
        finite_diff_check(lambda p: p["x"].exp().sum(), {"x": x})
        np.testing.assert_array_equal(x, before)

    @pytest.mark.parametrize("op", [
        lambda t: t.relu().sum(),
        lambda t: t.exp().mean(),
        lambda t: (t * t + 1.0).log().sum(),
        lambda t: (t * t + 0.5).sqrt().sum(),
        lambda t: t.sigmoid().sum(),
        lambda t: t.log_sigmoid().sum(),
        lambda t: t.log_softmax(axis=1).sum(),
        lambda t: (t.softmax(axis=1) * Tensor(np.arange(3.0))).sum(),
        lambda t: t.logsumexp(axis=0).sum(),
        lambda t: (t @ t.T).sum(),
        lambda t: (t[np.array([0, 2, 2])] ** 3).sum(),
        lambda t: (1.0 / (t * t + 1.0)).sum(),
        lambda t: t.reshape(3, 4).sum(axis=1).sum(),
        lambda t: (t * t).clamp_min(0.3).sum(),
    ])
    def test_primitive_ops(self, op):
        x = make_rng(9).standard_normal((4, 3))
        x[np.abs(x) < 1e-3] += 0.01  # stay off ReLU kinks
        assert finite_diff_check(lambda p: op(p["x"]), {"x": x}).worst <= 1e-5

    def test_relu_subgradient_at_zero(self):
        _, grads = grad_of(lambda p: p["x"].relu().sum(), {"x": np.array([[-1.0, 0.0, 2.0]])})
        np.testing.assert_array_equal(grads["x"], [[0.0, 0.0, 1.0]])


class TestRngAndBlobs:
    def test_same_seed_same_stream(self):
        assert np.array_equal(make_rng(7).random(10), make_rng(7).random(10))
        assert not np.array_equal(make_rng(7).random(10), make_rng(8).random(10))

    def test_child_streams_independent(self):
        assert not np.array_equal(child_rng(1, 0).random(5), child_rng(1, 1).random(5))
        assert np.array_equal(child_rng(1, 2, 3).random(5), child_rng(1, 2, 3).random(5))

    def test_blob_layout(self):
        m = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        buf = matrix_to_bytes(m)
        assert buf[:16] == (2).to_bytes(8, "little") + (3).to_bytes(8, "little")
        assert np.frombuffer(buf[16:], "<f8").tolist() == [1, 2, 3, 4, 5, 6]

    def test_blob_round_trip(self, tmp_path):
        m = make_rng(0).standard_normal((5, 4))
        write_matrix(m, tmp_path / "m.f64")
        assert read_matrix(tmp_path / "m.f64").tobytes() == m.tobytes()

    def test_truncated_blob(self):
        with pytest.raises(InvalidInputError):
            matrix_from_bytes(matrix_to_bytes(np.ones((2, 2)))[:-1])
