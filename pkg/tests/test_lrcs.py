import math
from dataclasses import replace

import numpy as np
import pytest

from byzfed.attacks import AttackParams, PayloadAttack
from byzfed.errors import ConfigInvalid, DimensionMismatch, IllConditioned, IndivisibleSplit
from byzfed.fed import FederationConfig
from byzfed.linalg import qr_basis, sd_F
from byzfed.lrcs import (
    AltGdMinState,
    GdConfig,
    InitConfig,
    LrcsInitAttack,
    altgdmin_plain,
    byz_altgdmin,
    default_omega,
    estimate_node_constants,
    gd_round,
    generate_lrcs_instance,
    generate_lrcs_truth,
    init_matrix_node,
    ls_step,
    node_alpha,
    node_gradient,
    node_objective,
    spectral_init_median,
    spectral_init_mom,
    split_rows,
    truncate_measurements,
    truth_constants,
)


def _instance(n=30, q=60, r=2, m=80, L=4, seed=0, **kw):
    return generate_lrcs_instance(n, q, r, m, L, seed, **kw)


def _replicated(inst, L):
    """Instance whose L nodes all hold node 0's data."""
    A = np.repeat(inst.A[:1], L, axis=0)
    Y = np.repeat(inst.Y[:1], L, axis=0)
    return replace(inst, A=A, Y=Y)


def _tune(init, g):
    return replace(g, eta=0.5 / init.sigma_hat**2)


class TestInstance:
    def test_rank_one_constant_columns(self):
        u = np.ones((5, 1)) / np.sqrt(5)
        inst = generate_lrcs_instance(5, 4, 1, 6, 2, seed=0, truth=(u, np.ones((1, 4))))
        np.testing.assert_allclose(inst.x_star, u @ np.ones((1, 4)))
        assert np.linalg.matrix_rank(inst.x_star) == 1

    def test_experiment_split(self):
        inst = generate_lrcs_instance(5, 3, 1, 198, 18, seed=0)
        assert inst.m_tilde == 11 and inst.m == 198 and inst.num_nodes == 18

    def test_measurement_oracle(self):
        inst = _instance()
        for l in (0, 3):
            A_l, Y_l = inst.node(l)
            for k in (0, 17, 59):
                np.testing.assert_allclose(Y_l[k], A_l[k] @ inst.x_star[:, k], atol=1e-10)

    def test_properties(self):
        inst = _instance()
        assert (inst.n, inst.q, inst.r) == (30, 60, 2)
        assert np.linalg.matrix_rank(inst.x_star) == 2
        s = np.linalg.svd(inst.x_star, compute_uv=False)
        assert inst.sigma_max == pytest.approx(s[0])
        assert inst.kappa == pytest.approx(s[0] / s[1])
        bmax = np.linalg.norm(inst.b_star, axis=0).max()
        assert bmax <= inst.mu * np.sqrt(inst.r / inst.q) * inst.sigma_max * (1 + 1e-12)

    def test_truth_constants(self):
        B = np.diag([3.0, 1.0])
        kappa, mu = truth_constants(B)
        assert kappa == pytest.approx(3.0)
        assert mu == pytest.approx(3.0 / (np.sqrt(2 / 2) * 3.0))

    def test_errors(self):
        with pytest.raises(IndivisibleSplit):
            _instance(m=81)
        with pytest.raises(DimensionMismatch):
            _instance(truth=(np.eye(30, 3), np.ones((3, 60))))

    def test_truth_reused(self):
        truth = generate_lrcs_truth(30, 60, 2, seed=5)
        a, b = _instance(seed=1, truth=truth), _instance(seed=2, truth=truth)
        np.testing.assert_array_equal(a.x_star, b.x_star)
        assert not np.array_equal(a.A, b.A)


class TestTruncation:
    def test_examples(self):
        y = np.array([1.0, 3.0])
        np.testing.assert_array_equal(truncate_measurements(y, 9.0), y)
        np.testing.assert_array_equal(truncate_measurements(y, 0.0), [0.0, 0.0])
        np.testing.assert_array_equal(truncate_measurements(y, 4.0), [1.0, 0.0])

    def test_alpha(self):
        assert node_alpha(np.zeros((3, 4)), 5.0) == 0.0
        assert node_alpha(np.array([[1.0, 1.0]]), 1.0) == 1.0

    def test_alpha_concentration(self):
        inst = _instance(n=20, q=200, r=2, m=240, L=4, seed=3)  # m_tilde q = 12000
        ref = np.linalg.norm(inst.x_star) ** 2 / inst.q
        for l in range(4):
            assert node_alpha(inst.Y[l], 1.0) == pytest.approx(ref, rel=0.2)

    def test_init_matrix(self):
        inst = _instance()
        A_l, Y_l = inst.node(1)
        assert not init_matrix_node(A_l, Y_l, 0.0).any()
        y = np.arange(1.0, 6.0)
        col = init_matrix_node(np.eye(5)[None], y[None], np.inf)
        np.testing.assert_array_equal(col[:, 0], y)

    def test_stacking_identity(self):
        inst = _instance()
        alpha = 2.0 * node_alpha(inst.Y[0], 1.0)
        total = sum(init_matrix_node(*inst.node(l), alpha) for l in range(inst.num_nodes))
        A = np.concatenate(list(inst.A), axis=1)  # (q, m, n)
        Y = np.concatenate(list(inst.Y), axis=1)
        np.testing.assert_allclose(total, init_matrix_node(A, Y, alpha), atol=1e-10)

    def test_node_constants(self):
        inst = _instance(n=20, q=200, r=2, m=400, L=2, seed=4)
        kappa, sigma = estimate_node_constants(*inst.node(0), 2)
        assert sigma == pytest.approx(inst.sigma_max, rel=0.3)
        assert kappa >= 1.0


class TestInit:
    def test_no_attack_within_delta0(self):
        inst = _instance(n=30, q=200, r=2, m=600, L=3, seed=5)
        res = spectral_init_median(inst, InitConfig(2, t_pow=30), seed=1)
        assert sd_F(inst.u_star, res.estimate.basis) <= 0.1 / inst.kappa**2 * 10  # well inside the basin
        assert res.alpha > 0 and res.kappa_hat >= 1

    def test_identical_nodes_equal_centralized(self):
        inst = _replicated(_instance(seed=6), 4)
        icfg = InitConfig(2, t_pow=15)
        a = spectral_init_median(inst, icfg, seed=2).estimate.basis
        b = altgdmin_plain(inst, icfg, GdConfig(1.0, 1), seed=2).init.estimate.basis
        assert sd_F(a, b) < 1e-8

    def test_mom_degenerate_equals_median(self):
        inst = _instance(seed=7)
        a = spectral_init_median(inst, InitConfig(2, t_pow=12), seed=3)
        b = spectral_init_mom(inst, InitConfig(2, t_pow=12, minibatches=4), seed=3)
        assert a.estimate.best_node == b.estimate.best_node
        assert sd_F(a.estimate.basis, b.estimate.basis) < 1e-8

    def test_mom_pooled_oracle(self):
        # nodes [a, b, a, b] in two batches: each batch sum equals half the pool
        base = _instance(seed=8)
        inst = replace(base, A=base.A[[0, 1, 0, 1]], Y=base.Y[[0, 1, 0, 1]])
        icfg = InitConfig(2, t_pow=200, minibatches=2)
        a = spectral_init_mom(inst, icfg, seed=4).estimate.basis
        b = altgdmin_plain(inst, replace(icfg, minibatches=None), GdConfig(1.0, 1), seed=4).init.estimate.basis
        assert sd_F(a, b) < 1e-6

    def test_orthogonal_style_init_attack_not_selected(self):
        inst = _instance(n=30, q=60, r=2, m=120, L=6, seed=9)
        fed = FederationConfig(6, frozenset({2}))
        clean = spectral_init_median(inst, InitConfig(2), fed, None, seed=5)
        res = spectral_init_median(inst, InitConfig(2), fed, LrcsInitAttack(), seed=5)
        assert res.estimate.best_node != 2
        np.testing.assert_array_equal(res.estimate.basis, clean.estimate.basis)
        res = spectral_init_mom(inst, InitConfig(2, minibatches=3), fed, LrcsInitAttack(), seed=5)
        assert res.estimate.best_node != fed.batch_of(2)

    def test_reverse_style_basis_spans_node_average(self):
        # -C * mean of the true node bases spans their average: the median may select it
        inst = _instance(n=30, q=60, r=2, m=120, L=6, seed=9)
        fed = FederationConfig(6, frozenset({2}))
        adv = PayloadAttack("reverse_gradient", AttackParams(1.0, 1.0, 10.0))
        res = spectral_init_median(inst, InitConfig(2), fed, adv, seed=5)
        clean = spectral_init_median(inst, InitConfig(2), FederationConfig(6), None, seed=5)
        start = np.random.default_rng([5, 2]).standard_normal((30, 2))
        from byzfed.linalg import PowerMethodConfig, power_method_topr

        mats = [init_matrix_node(*inst.node(l), res.alpha) for l in range(6)]
        bases = [power_method_topr(lambda V, X=X: X @ (X.T @ V), 30, PowerMethodConfig(2, 10), start) for X in mats]
        assert res.estimate.best_node == 2
        assert sd_F(qr_basis(np.mean(bases, axis=0)), res.estimate.basis) < 1e-10
        assert sd_F(inst.u_star, res.estimate.basis) <= sd_F(inst.u_star, clean.estimate.basis)

    def test_alpha_median_resists_scaling(self):
        inst = _instance(n=20, q=60, r=2, m=120, L=6, seed=10)
        clean = spectral_init_median(inst, InitConfig(2), seed=6).alpha
        attacked = spectral_init_median(inst, InitConfig(2), FederationConfig(6, frozenset({0})),
                                        LrcsInitAttack(1e6), seed=6).alpha
        honest = sorted(node_alpha(inst.Y[l], 1.0) for l in range(6))
        assert attacked / clean <= honest[-1] / honest[0]

    def test_config_validation(self):
        with pytest.raises(ConfigInvalid):
            InitConfig(2, c_tilde=0.0)
        with pytest.raises(ConfigInvalid):
            InitConfig(0)


class TestLeastSquares:
    def test_truth_is_exact(self):
        inst = _instance()
        B, X = ls_step(inst.u_star, *inst.node(0))
        np.testing.assert_allclose(B, inst.b_star, atol=1e-8)
        np.testing.assert_allclose(X, inst.x_star, atol=1e-8)

    def test_identity_design(self):
        y = np.array([[2.0, -1.0]])
        B, _ = ls_step(np.eye(2), np.eye(2)[None], y)
        np.testing.assert_allclose(B[:, 0], y[0], atol=1e-14)

    def test_normal_equations(self):
        inst = _instance(seed=11)
        U = qr_basis(np.random.default_rng(0).standard_normal((30, 2)))
        A_l, Y_l = inst.node(2)
        B, _ = ls_step(U, A_l, Y_l)
        for k in range(inst.q):
            M = A_l[k] @ U
            ref = np.linalg.solve(M.T @ M, M.T @ Y_l[k])
            np.testing.assert_allclose(B[:, k], ref, atol=1e-8)
            assert np.abs(M.T @ (M @ B[:, k] - Y_l[k])).max() <= 1e-8

    def test_ill_conditioned(self):
        with pytest.raises(IllConditioned):
            ls_step(np.eye(4, 3), np.ones((2, 2, 4)), np.ones((2, 2)))
        with pytest.raises(IllConditioned):
            ls_step(np.eye(4, 2), np.zeros((2, 3, 4)), np.ones((2, 3)))


class TestGradient:
    def test_zero_at_truth(self):
        inst = _instance()
        A_l, Y_l = inst.node(0)
        B, _ = ls_step(inst.u_star, A_l, Y_l)
        assert np.abs(node_gradient(inst.u_star, B, A_l, Y_l)).max() < 1e-8

    def test_closed_form(self):
        U = np.array([[0.6], [0.8]])
        y = np.array([[1.0, 2.0]])
        g = node_gradient(U, np.ones((1, 1)), np.eye(2)[None], y)
        np.testing.assert_allclose(g, (U[:, 0] - y[0])[:, None])

    def test_finite_differences(self):
        rng = np.random.default_rng(512)
        inst = _instance(seed=12)
        A_l, Y_l = inst.node(1)
        U = qr_basis(rng.standard_normal((30, 2)))
        B = rng.standard_normal((2, 60))
        G = node_gradient(U, B, A_l, Y_l)
        h = 1e-6
        for _ in range(5):
            D = rng.standard_normal(U.shape)
            fd = (node_objective(U + h * D, B, A_l, Y_l) - node_objective(U - h * D, B, A_l, Y_l)) / (2 * h)
            an = float((G * D).sum())
            assert abs(fd - an) <= 1e-5 * abs(an)

    def test_kernel_gradient_matches(self):
        from byzfed import _kernels

        inst = _instance(seed=13)
        U = qr_basis(np.random.default_rng(1).standard_normal((30, 2)))
        A_l, Y_l = inst.node(0)
        B, grad, _ = _kernels.lrcs_node_step(A_l, Y_l, U)
        np.testing.assert_allclose(grad, node_gradient(U, B, A_l, Y_l), atol=1e-8)


class TestGdRound:
    def test_single_node_plain_step(self):
        inst = generate_lrcs_instance(20, 30, 2, 10, 1, seed=14)
        U = qr_basis(np.random.default_rng(2).standard_normal((20, 2)))
        cfg = GdConfig(eta=0.01, iterations=1)
        new = gd_round(AltGdMinState(U), inst, cfg, FederationConfig(1))
        A_l, Y_l = inst.node(0)
        B, _ = ls_step(U, A_l, Y_l)
        ref = qr_basis(U - 0.01 / 10 * node_gradient(U, B, A_l, Y_l))
        np.testing.assert_allclose(new.u, ref, atol=1e-10)
        assert new.iteration == 1 and len(new.trace) == 1

    def test_identical_nodes_match_centralized(self):
        inst = _replicated(generate_lrcs_instance(20, 30, 2, 20, 2, seed=15), 2)
        U = qr_basis(np.random.default_rng(3).standard_normal((20, 2)))
        cfg = GdConfig(eta=0.02, iterations=1, omega=1e12)
        new = gd_round(AltGdMinState(U), inst, cfg, FederationConfig(2))
        A_l, Y_l = inst.node(0)
        B, _ = ls_step(U, A_l, Y_l)
        ref = qr_basis(U - 0.02 / inst.m * 2 * node_gradient(U, B, A_l, Y_l))
        np.testing.assert_allclose(new.u, ref, atol=1e-10)

    def test_filters_reverse_gradient(self):
        inst = _instance(n=20, q=60, r=2, m=120, L=6, seed=16)
        U = qr_basis(np.random.default_rng(4).standard_normal((20, 2)))
        adv = PayloadAttack("reverse_gradient", AttackParams(1.0, 1.0, 1e3))
        fed = FederationConfig(6, frozenset({1}))
        out = gd_round(AltGdMinState(U), inst, GdConfig(0.01, 1, omega=1e4), fed, adv)
        assert out.filtered == (1,)
        assert len(out.b) == 5

    def test_split_rows(self):
        assert split_rows(11, 2, 4) == [slice(0, 5), slice(5, 10)]
        with pytest.raises(ConfigInvalid):
            split_rows(11, 3, 4)

    def test_config_validation(self):
        for kw in (dict(eta=0.0, iterations=1), dict(eta=1.0, iterations=0), dict(eta=1.0, iterations=1, omega=0.0)):
            with pytest.raises(ConfigInvalid):
                GdConfig(**kw)


def test_default_omega():
    assert default_omega(11, 4, 2.0, 3.0, rho=3) == pytest.approx(3 * 11 * 14 * 2 * 0.025 * 9)


class TestAltGdMin:
    def test_no_attack_matches_plain_on_identical_data(self):
        inst = _replicated(_instance(seed=17), 4)
        icfg, gcfg = InitConfig(2, t_pow=15), GdConfig(1.0, 20)
        a = byz_altgdmin(inst, icfg, gcfg, seed=7, tune=_tune)
        b = altgdmin_plain(inst, icfg, gcfg, seed=7, tune=_tune)
        np.testing.assert_allclose(a.trace, b.trace, atol=1e-8)

    def test_decay_no_attack(self):
        inst = _instance(n=30, q=100, r=2, m=160, L=4, seed=18)
        icfg = InitConfig(2, t_pow=30)

        def tune(init, g):
            omega = default_omega(inst.m_tilde, 2, init.kappa_hat, init.sigma_hat)
            return replace(g, eta=0.5 / inst.sigma_max**2, omega=omega)

        res = byz_altgdmin(inst, icfg, GdConfig(1.0, 60), seed=8, tune=tune)
        tr = np.array(res.trace)
        assert all(f == 0 for f in res.state.filtered)
        assert tr[-1] < 1e-3 * tr[0]
        rate = np.exp(np.polyfit(np.arange(len(tr)), np.log(tr), 1)[0])
        assert rate < 1 - 0.3 / inst.kappa**2 or rate < 0.9
        # per-column error tracks the subspace error
        assert res.column_errors.max() <= sd_F(inst.u_star, res.state.u) * 1.5 + 1e-12

    def test_eps_exit(self):
        inst = _instance(n=30, q=100, r=2, m=160, L=4, seed=19)
        res = byz_altgdmin(inst, InitConfig(2), GdConfig(1.0, 500, eps=1e-2), seed=9, tune=_tune)
        assert res.trace[-1] < 1e-2
        assert len(res.trace) < 501

    def test_reverse_gradient_attack_mom(self):
        inst = _instance(n=30, q=100, r=2, m=240, L=6, seed=20)
        adv = PayloadAttack("reverse_gradient", AttackParams(1.0, 1.0, 10.0))
        fed = FederationConfig(6, frozenset({0}))

        def tune(init, g):
            omega = default_omega(inst.m_tilde, 2, init.kappa_hat, init.sigma_hat, rho=2)
            return replace(g, eta=0.5 / inst.sigma_max**2, omega=omega)

        res = byz_altgdmin(inst, InitConfig(2, minibatches=3), GdConfig(1.0, 40, minibatches=3), fed,
                           adv, adv, seed=10, tune=tune)
        assert res.trace[-1] < 0.05 * res.trace[0]

    def test_sample_splitting(self):
        inst = _instance(n=20, q=60, r=2, m=96, L=4, seed=21)  # 24 rows per node
        res = byz_altgdmin(inst, InitConfig(2), GdConfig(1.0, 3, sample_splitting=True), seed=11, tune=_tune)
        assert res.state.iteration == 3
        with pytest.raises(ConfigInvalid):
            byz_altgdmin(inst, InitConfig(2), GdConfig(1.0, 20, sample_splitting=True), seed=11)
