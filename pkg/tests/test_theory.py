import json
import math

import numpy as np
import pytest

from graphlora.numerics import child_rng, make_rng
from graphlora.theory import (
    ConditionError,
    SingularInstanceError,
    TheoryConfig,
    TheoryInstance,
    best_rank_r,
    block_product,
    check_assumption,
    discrepancy_sigmas,
    gnn_forward,
    make_partition,
    measure_error,
    random_instance,
    reports_to_json,
    synthesize_exact,
    synthesize_optimized,
    approximation_bound,
    theory_propagation,
    verify_expressivity,
)


def bound_oracle(inst, ex):
    """Independent evaluation of the approximation bound with LAPACK norms."""
    P = inst.P
    n2 = lambda m: np.linalg.norm(m, 2)
    normP = n2(P)
    Wt, bt = inst.target_W, inst.target_b
    blocks = make_partition(inst.L, inst.L_bar)
    E = []
    for i, blk in enumerate(blocks):
        prod = np.eye(inst.D)
        for l in blk:
            prod = inst.frozen_W[l] @ prod
        s = np.linalg.svd(Wt[i] - prod, compute_uv=False)
        k = inst.rank * inst.M
        E.append(s[k] if k < len(s) else 0.0)
    ones = np.ones((1, inst.n))
    cands = [ex]
    for i in range(1, inst.L_bar + 1):
        t = ex * np.prod([n2(Wt[k]) for k in range(i)]) * normP**i
        for j in range(1, i + 1):
            inner = np.prod([n2(Wt[k - 1]) for k in range(j + 1, i)]) if i > j + 1 else 1.0
            t += inner * n2(bt[j - 1][:, None] @ ones) * normP ** (i - j - 1)
        cands.append(t)
    xi = max(cands)
    grow = max(n2(Wt[k]) + E[k] for k in range(inst.L_bar))
    Lb = inst.L_bar
    return xi * sum(grow ** (Lb - i) * E[i - 1] * normP ** (Lb - i + 1) for i in range(1, Lb + 1))


class TestLowRank:
    def test_diag(self):
        np.testing.assert_allclose(best_rank_r(np.diag([3.0, 2.0, 1.0]), 1), np.diag([3.0, 0, 0]), atol=1e-14)

    def test_rank_two_kept(self):
        rng = make_rng(0)
        w = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 5))
        assert np.max(np.abs(best_rank_r(w, 3) - w)) <= 1e-10

    def test_frobenius_optimal(self):
        rng = make_rng(1)
        w = rng.standard_normal((6, 6))
        best = np.linalg.norm(w - best_rank_r(w, 2))
        for _ in range(100):
            q = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 6))
            assert best <= np.linalg.norm(w - q)

    def test_idempotent(self):
        w = make_rng(2).standard_normal((5, 4))
        once = best_rank_r(w, 2)
        assert np.max(np.abs(best_rank_r(once, 2) - once)) <= 1e-10

    def test_negative_rank(self):
        with pytest.raises(ValueError):
            best_rank_r(np.eye(2), -1)


class TestPartition:
    @pytest.mark.parametrize("L,Lb,expected", [
        (4, 2, [[0, 1], [2, 3]]),
        (5, 2, [[0, 1], [2, 3, 4]]),
        (3, 3, [[0], [1], [2]]),
    ])
    def test_blocks(self, L, Lb, expected):
        assert make_partition(L, Lb) == expected

    def test_target_deeper(self):
        with pytest.raises(ValueError):
            make_partition(2, 3)

    def test_block_product_order(self):
        a, b = make_rng(3).standard_normal((2, 3, 3))
        np.testing.assert_allclose(block_product([a, b], [0, 1]), b @ a)


class TestExact:
    def test_equal_weights_zero_delta(self):
        inst = random_instance(4, 2, 2, 0, seed=1)
        inst.target_W = [w.copy() for w in inst.frozen_W]
        ad = synthesize_exact(inst)
        assert all(np.all(d == 0) for d in ad.deltas)
        xs = make_rng(0).standard_normal((10, 4, inst.n))
        assert measure_error(inst, ad, xs)[1] == 0.0

    def test_full_rank_exact(self):
        inst = random_instance(4, 2, 2, 4, seed=2)
        ad = synthesize_exact(inst)
        xs = make_rng(1).standard_normal((100, 4, inst.n))
        assert measure_error(inst, ad, xs)[1] <= 1e-9

    def test_rank_too_small(self):
        inst = random_instance(4, 2, 2, 3, seed=3)  # generic discrepancy has rank 4
        with pytest.raises(ConditionError):
            synthesize_exact(inst)

    def test_low_rank_discrepancy_boundary(self):
        inst = random_instance(4, 1, 1, 2, seed=4)
        rng = make_rng(5)
        inst.target_W = [inst.frozen_W[0] + rng.standard_normal((4, 2)) @ rng.standard_normal((2, 4))]
        assert max(synthesize_exact(inst).ranks()) == 2
        inst.rank = 1
        with pytest.raises(ConditionError):
            synthesize_exact(inst)

    def test_depth_mismatch(self):
        with pytest.raises(ConditionError):
            synthesize_exact(random_instance(4, 4, 2, 4, seed=0))


class TestBound:
    def test_zero_discrepancy(self):
        inst = random_instance(4, 4, 2, 1, seed=5)
        inst.target_W = [block_product(inst.frozen_W, b) for b in inst.partition]
        assert discrepancy_sigmas(inst) == [0.0, 0.0]
        assert approximation_bound(inst, expected_x_norm=3.0) == 0.0

    def test_index_beyond_dimension(self):
        inst = random_instance(4, 4, 2, 3, seed=6)  # RM+1 = 7 > 4
        assert approximation_bound(inst, expected_x_norm=3.0) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_independent_formula(self, seed):
        inst = random_instance(4, 4, 2, 1, seed=seed)
        assert approximation_bound(inst, expected_x_norm=4.2) == pytest.approx(bound_oracle(inst, 4.2), rel=1e-10)

    def test_three_target_layers_oracle(self):
        inst = random_instance(3, 6, 3, 1, seed=9)
        assert approximation_bound(inst, expected_x_norm=2.5) == pytest.approx(bound_oracle(inst, 2.5), rel=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_non_increasing_in_rank(self, seed):
        base = random_instance(4, 4, 2, 0, seed=seed)
        values = []
        for r in range(0, 4):
            base.rank = r
            values.append(approximation_bound(base, expected_x_norm=3.0))
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_scalar_case_by_hand(self):
        P = np.array([[0.5, 0.5], [0.5, 0.5]])  # ||P|| = 1, n = 2
        inst = TheoryInstance([np.array([[2.0]])], [np.array([0.3])], [np.array([[0.5]])],
                              [np.array([0.0])], rank=0, P=P)
        ex = 1.7
        # E = |2 - 0.5| = 1.5; xi' = max(ex, ex*2*1 + 0.3*sqrt(2)*1^-1)
        xi = max(ex, ex * 2.0 + 0.3 * math.sqrt(2))
        assert approximation_bound(inst, expected_x_norm=ex) == pytest.approx(xi * 1.5, rel=1e-12)

    def test_scalar_positive_rank_is_exact_regime(self):
        P = np.array([[1.0]])
        inst = TheoryInstance([np.array([[2.0]])], [np.array([0.3])], [np.array([[0.5]])],
                              [np.array([0.0])], rank=1, P=P)
        assert approximation_bound(inst, expected_x_norm=1.0) == 0.0


class TestOptimized:
    def test_warm_start_not_worse_than_exact(self):
        inst = random_instance(4, 2, 2, 4, seed=10)
        exact = synthesize_exact(inst)
        rng = make_rng(2)
        exact_err = measure_error(inst, exact, rng.standard_normal((500, 4, inst.n)))[0]
        _, err = synthesize_optimized(inst, 50, make_rng(3), warm=exact)
        assert err <= exact_err + 1e-6

    def test_full_rank_equal_depth_recovers(self):
        inst = random_instance(4, 2, 2, 4, seed=11)
        _, err = synthesize_optimized(inst, 50, make_rng(4))
        assert err <= 1e-6

    def test_deterministic(self):
        inst = random_instance(4, 4, 2, 1, seed=12)
        a = synthesize_optimized(inst, 30, make_rng(5))
        b = synthesize_optimized(inst, 30, make_rng(5))
        assert a[1] == b[1] and all(np.array_equal(x, y) for x, y in zip(a[0].deltas, b[0].deltas))

    def test_rank_respected(self):
        inst = random_instance(4, 4, 2, 1, seed=13)
        ad, _ = synthesize_optimized(inst, 30, make_rng(6))
        assert max(ad.ranks()) <= 1

    def test_rank_one_under_bound(self):
        P = theory_propagation(8, seed=0)
        inst = random_instance(4, 4, 2, 1, seed=14, P=P)
        _, err = synthesize_optimized(inst, 100, make_rng(7))
        assert err <= approximation_bound(inst, rng=child_rng(0, 1))

    def test_idempotent_propagation_makes_rank_two_exact(self):
        # two 2-layer blocks only match one target layer when P^2 = P (see ledger)
        P = np.kron(np.eye(2), np.ones((4, 4)) / 4)
        inst = random_instance(4, 4, 2, 2, seed=15, P=P)
        assert approximation_bound(inst, expected_x_norm=3.0) == 0.0
        _, err = synthesize_optimized(inst, 0, make_rng(8))
        assert err <= 1e-6


class TestAssumption:
    def test_random_instances_generic(self):
        for seed in range(10):
            check_assumption(random_instance(4, 4, 2, 1, seed=seed))

    def test_singular_detected(self):
        inst = random_instance(4, 4, 2, 1, seed=0)
        inst.frozen_W[1] = np.zeros((4, 4))
        with pytest.raises(SingularInstanceError):
            check_assumption(inst)


class TestVerify:
    def test_small_run_report(self):
        cfg = TheoryConfig(exact_instances=3, bound_instances=2, bound_ranks=(1,), iters=20,
                           ex_samples=500)
        reports = verify_expressivity(cfg)
        assert len(reports) == 5
        assert all(r.passed for r in reports)
        data = json.loads(reports_to_json(reports))
        assert {"instance", "E", "xi_prime", "bound", "measured", "passed"} <= set(data[0])

    def test_corrupted_bound_fails(self):
        cfg = TheoryConfig(exact_instances=0, bound_instances=2, bound_ranks=(1,), iters=10,
                           ex_samples=200)

        def corrupt(r):
            r.bound = r.bound * 1e-9
            return r

        assert not all(r.passed for r in verify_expressivity(cfg, bound_hook=corrupt))

    def test_forward_stack_matches_loop(self):
        inst = random_instance(3, 2, 2, 3, seed=1)
        xs = make_rng(0).standard_normal((4, 3, inst.n))
        stacked = gnn_forward(xs, inst.P, inst.frozen_W, inst.frozen_b)
        for k in range(4):
            np.testing.assert_allclose(stacked[k], gnn_forward(xs[k], inst.P, inst.frozen_W, inst.frozen_b))
