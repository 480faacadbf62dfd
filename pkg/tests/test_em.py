"""E-step exactness, M-step blocks and the EM driver."""

import numpy as np
import pytest

from hmmdropout import (
    ComponentDeathError,
    EMControls,
    ModelSpec,
    PanelData,
    ParameterSet,
    SubjectRecord,
    e_step,
    fit,
    m_step_chain,
    m_step_dropout,
    m_step_longitudinal,
    m_step_mixture,
    observed_loglik,
    simulate_panel,
)
from hmmdropout.em import Posteriors, initial_state_stats, transition_stats

from oracles import enumerate_posteriors, random_params


def simulate_small(params, n, T, seed):
    spec = ModelSpec(G=params.G, K=params.K, H=params.H,
                     p_x=params.p_x, p_w=params.p_w)
    data, truth = simulate_panel(params, spec, n=n, n_waves=T, seed=seed)
    return data


class TestEStep:
    def test_single_upper_class_reduces_to_hmm_smoother(self):
        rng = np.random.default_rng(0)
        params = random_params(2, 2, 1, 1, 1, rng)
        data = simulate_small(params, 5, 3, seed=1)
        post = e_step(data, params)
        assert np.allclose(post.e, 1.0)
        for i, sub in enumerate(data.subjects):
            ref = enumerate_posteriors(sub, params)
            T_i = sub.y.size
            assert np.allclose(post.a_cond[i, 0, :T_i], ref["a_cond"][0], atol=1e-12)

    def test_matches_enumeration_on_all_blocks(self):
        rng = np.random.default_rng(1)
        for trial in range(5):
            G = int(rng.integers(1, 4))
            K = int(rng.integers(1, 3))
            H = int(rng.integers(1, 3))
            params = random_params(G, K, H, 1, 1, rng)
            data = simulate_small(params, 3, 3, seed=trial + 10)
            post = e_step(data, params)
            for i, sub in enumerate(data.subjects):
                ref = enumerate_posteriors(sub, params)
                T_i = sub.y.size
                assert np.allclose(post.e[i], ref["e"], atol=1e-10)
                assert np.allclose(post.d_cond[i], ref["d_cond"], atol=1e-10)
                assert np.allclose(post.a_cond[i, :, :T_i], ref["a_cond"], atol=1e-10)
                if T_i > 1:
                    assert np.allclose(post.a_trans[i, :, :T_i - 1],
                                       ref["a_trans"], atol=1e-10)

    def test_symmetric_states_give_uniform_occupancy(self):
        params = ParameterSet(
            beta=np.zeros(0), zeta=[0.5, 0.5], sigma2=1.0,
            gamma=np.zeros(0), xi=[0.3],
            eta0_alpha=[0.0], eta0_psi=[],
            eta1_alpha=[[0.0], [0.0]], eta1_psi=[],
            pi=[[1.0]], tau=[1.0],
        )
        data = simulate_small(params, 4, 4, seed=3)
        post = e_step(data, params)
        for i, sub in enumerate(data.subjects):
            assert np.allclose(post.a_marg[i, :sub.y.size], 0.5, atol=1e-12)

    def test_normalization_invariants(self):
        rng = np.random.default_rng(2)
        params = random_params(3, 2, 2, 1, 1, rng)
        data = simulate_small(params, 8, 5, seed=4)
        post = e_step(data, params)
        assert np.allclose(post.e.sum(axis=1), 1.0, atol=1e-10)
        assert np.allclose(post.d_cond.sum(axis=2), 1.0, atol=1e-10)
        assert np.allclose(post.d_marg.sum(axis=1), 1.0, atol=1e-10)
        for i, sub in enumerate(data.subjects):
            T_i = sub.y.size
            assert np.allclose(post.a_cond[i, :, :T_i].sum(axis=2), 1.0, atol=1e-10)
            assert np.allclose(post.a_marg[i, :T_i].sum(axis=1), 1.0, atol=1e-10)
            if T_i > 1:
                sums = post.a_trans[i, :, :T_i - 1].sum(axis=(2, 3))
                assert np.allclose(sums, 1.0, atol=1e-10)
            # padded waves carry no mass
            assert np.all(post.a_cond[i, :, T_i:] == 0.0)


class TestMStepMixture:
    def test_hand_computed_two_subject_case(self):
        e = np.array([[1.0, 0.0], [0.0, 1.0]])
        d_cond = np.array([
            [[0.3, 0.7], [0.5, 0.5]],
            [[0.5, 0.5], [0.6, 0.4]],
        ])
        post = Posteriors(e=e, d_cond=d_cond, d_marg=np.einsum("nh,nhk->nk", e, d_cond),
                          a_cond=np.zeros((2, 2, 1, 1)), a_trans=np.zeros((2, 2, 0, 1, 1)),
                          a_marg=np.zeros((2, 1, 1)), T_obs=np.ones(2, dtype=int))
        tau, pi = m_step_mixture(post)
        assert np.allclose(tau, [0.5, 0.5])
        assert np.allclose(pi[0], [0.3, 0.7])
        assert np.allclose(pi[1], [0.6, 0.4])

    def test_uniform_posteriors_give_uniform_weights(self):
        n, H, K = 6, 3, 2
        post = Posteriors(e=np.full((n, H), 1.0 / H), d_cond=np.full((n, H, K), 0.5),
                          d_marg=np.full((n, K), 0.5), a_cond=np.zeros((n, H, 1, 1)),
                          a_trans=np.zeros((n, H, 0, 1, 1)), a_marg=np.zeros((n, 1, 1)),
                          T_obs=np.ones(n, dtype=int))
        tau, pi = m_step_mixture(post)
        assert np.allclose(tau, 1.0 / H)
        assert np.allclose(pi, 0.5)

    def test_empty_class_signals_component_death(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0]])
        post = Posteriors(e=e, d_cond=np.full((2, 2, 1), 1.0),
                          d_marg=np.ones((2, 1)), a_cond=np.zeros((2, 2, 1, 1)),
                          a_trans=np.zeros((2, 2, 0, 1, 1)), a_marg=np.zeros((2, 1, 1)),
                          T_obs=np.ones(2, dtype=int))
        with pytest.raises(ComponentDeathError) as exc:
            m_step_mixture(post)
        assert np.allclose(exc.value.tau, [1.0, 0.0])


class TestMStepChain:
    def test_saturated_single_class_matches_weighted_counts(self):
        rng = np.random.default_rng(5)
        params = random_params(2, 1, 1, 0, 0, rng)
        data = simulate_small(params, 60, 5, seed=6)
        post = e_step(data, params)
        a0, p0, a1, p1 = m_step_chain(post, params.eta0_alpha, params.eta0_psi,
                                      params.eta1_alpha, params.eta1_psi)
        from hmmdropout import build_chain_law
        law = build_chain_law(a0, p0, a1, p1)
        N0 = initial_state_stats(post)[0]
        assert np.allclose(law.delta[0], N0 / N0.sum(), atol=1e-6)
        N1 = transition_stats(post)[0]
        target = N1 / N1.sum(axis=1, keepdims=True)
        assert np.allclose(law.Q[0], target, atol=1e-6)

    def test_symmetric_posteriors_give_zero_shifts(self):
        n, H, G, T = 10, 2, 2, 4
        e = np.full((n, H), 0.5)
        a_cond = np.full((n, H, T, G), 0.5)
        a_trans = np.full((n, H, T - 1, G, G), 0.25)
        post = Posteriors(e=e, d_cond=np.ones((n, H, 1)), d_marg=np.ones((n, 1)),
                          a_cond=a_cond, a_trans=a_trans,
                          a_marg=np.full((n, T, G), 0.5),
                          T_obs=np.full(n, T, dtype=int))
        a0, p0, a1, p1 = m_step_chain(post, np.array([0.4]), np.array([0.6]),
                                      np.array([[0.4], [-0.4]]), np.array([0.6]))
        assert abs(p0[0]) < 1e-5 and abs(p1[0]) < 1e-5
        assert abs(a0[0]) < 1e-5 and np.all(np.abs(a1) < 1e-5)

    def test_inner_iterates_ascend(self):
        rng = np.random.default_rng(7)
        params = random_params(3, 1, 2, 1, 1, rng)
        data = simulate_small(params, 30, 5, seed=8)
        start = random_params(3, 1, 2, 1, 1, rng)
        post = e_step(data, start)
        values = []
        m_step_chain(post, start.eta0_alpha, start.eta0_psi,
                     start.eta1_alpha, start.eta1_psi,
                     inner_callback=values.append)
        values = np.asarray(values)
        assert values.size > 0
        assert np.all(np.diff(values) >= -1e-9)

    def test_update_never_decreases_the_weighted_objective(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            params = random_params(3, 1, 2, 0, 0, rng)
            other = random_params(3, 1, 2, 0, 0, rng)
            data = simulate_small(params, 20, 4, seed=trial)
            post = e_step(data, params)
            N0 = initial_state_stats(post)
            N1 = transition_stats(post)

            def objective(ps):
                law = ps.chain_law()
                return (N0 * np.log(np.maximum(law.delta, 1e-300))).sum() + \
                       (N1 * np.log(np.maximum(law.Q, 1e-300))).sum()

            a0, p0, a1, p1 = m_step_chain(post, other.eta0_alpha, other.eta0_psi,
                                          other.eta1_alpha, other.eta1_psi)
            updated = ParameterSet.from_dict({
                **other.to_dict(), "eta0_alpha": a0.tolist(), "eta0_psi": p0.tolist(),
                "eta1_alpha": a1.tolist(), "eta1_psi": p1.tolist()})
            assert objective(updated) >= objective(other) - 1e-9


class TestMStepLongitudinal:
    def test_single_state_with_unit_weights_is_ols(self):
        rng = np.random.default_rng(9)
        params = random_params(1, 1, 1, 2, 0, rng)
        data = simulate_small(params, 40, 4, seed=10)
        post = e_step(data, params)
        beta, zeta, sigma2 = m_step_longitudinal(data, post, params)
        ys = np.concatenate([s.y for s in data.subjects])
        Xs = np.vstack([s.x for s in data.subjects])
        design = np.column_stack([np.ones(len(ys)), Xs])
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
        assert zeta[0] == pytest.approx(coef[0], abs=1e-8)
        assert np.allclose(beta, coef[1:], atol=1e-8)
        resid = ys - design @ coef
        assert sigma2 == pytest.approx(float(resid @ resid) / len(ys), rel=1e-8)

    def test_partitioning_weights_give_ordered_group_means(self):
        y = np.array([[1.0, 1.2], [3.0, 3.4]])
        subs = tuple(
            SubjectRecord(id=str(i), y=y[i], r=[0, 0], x=np.zeros((2, 0)),
                          w=np.zeros((2, 0)))
            for i in range(2)
        )
        data = PanelData(n_waves=2, subjects=subs)
        a_marg = np.zeros((2, 2, 2))
        a_marg[0, :, 0] = 1.0  # subject 1 fully in state 1
        a_marg[1, :, 1] = 1.0  # subject 2 fully in state 2
        post = Posteriors(e=np.ones((2, 1)), d_cond=np.ones((2, 1, 1)),
                          d_marg=np.ones((2, 1)), a_cond=a_marg[:, None],
                          a_trans=np.zeros((2, 1, 1, 2, 2)), a_marg=a_marg,
                          T_obs=np.full(2, 2, dtype=int))
        params = ParameterSet(beta=np.zeros(0), zeta=[0.0, 0.1], sigma2=1.0,
                              gamma=np.zeros(0), xi=[0.0], eta0_alpha=[0.0],
                              eta0_psi=[], eta1_alpha=[[0.0], [0.0]], eta1_psi=[],
                              pi=[[1.0]], tau=[1.0])
        beta, zeta, sigma2 = m_step_longitudinal(data, post, params)
        assert np.allclose(zeta, [1.1, 3.2])
        assert np.all(np.diff(zeta) >= 0)

    def test_active_order_constraint_pools_adjacent_states(self):
        # weights force the unconstrained solution out of order
        y = np.array([[3.0, 3.0], [1.0, 1.0]])
        subs = tuple(
            SubjectRecord(id=str(i), y=y[i], r=[0, 0], x=np.zeros((2, 0)),
                          w=np.zeros((2, 0)))
            for i in range(2)
        )
        data = PanelData(n_waves=2, subjects=subs)
        a_marg = np.zeros((2, 2, 2))
        a_marg[0, :, 0] = 1.0  # high responses assigned to state 1
        a_marg[1, :, 1] = 1.0  # low responses assigned to state 2
        post = Posteriors(e=np.ones((2, 1)), d_cond=np.ones((2, 1, 1)),
                          d_marg=np.ones((2, 1)), a_cond=a_marg[:, None],
                          a_trans=np.zeros((2, 1, 1, 2, 2)), a_marg=a_marg,
                          T_obs=np.full(2, 2, dtype=int))
        params = ParameterSet(beta=np.zeros(0), zeta=[1.9, 2.0], sigma2=1.0,
                              gamma=np.zeros(0), xi=[0.0], eta0_alpha=[0.0],
                              eta0_psi=[], eta1_alpha=[[0.0], [0.0]], eta1_psi=[],
                              pi=[[1.0]], tau=[1.0])
        beta, zeta, sigma2 = m_step_longitudinal(data, post, params)
        assert zeta[0] == pytest.approx(zeta[1])
        assert zeta[0] == pytest.approx(2.0)  # pooled weighted mean

    def test_halved_duplicate_weights_leave_estimates_unchanged(self):
        rng = np.random.default_rng(11)
        params = random_params(2, 1, 1, 1, 0, rng)
        data = simulate_small(params, 25, 4, seed=12)
        post = e_step(data, params)
        beta1, zeta1, s1 = m_step_longitudinal(data, post, params)
        half = Posteriors(e=post.e, d_cond=post.d_cond, d_marg=post.d_marg,
                          a_cond=post.a_cond, a_trans=post.a_trans,
                          a_marg=post.a_marg * 0.5, T_obs=post.T_obs)
        beta2, zeta2, s2 = m_step_longitudinal(data, half, params)
        assert np.allclose(beta1, beta2, atol=1e-10)
        assert np.allclose(zeta1, zeta2, atol=1e-10)


class TestMStepDropout:
    def test_intercept_only_balanced_rows(self):
        subs = (
            SubjectRecord(id="a", y=[0.0], r=[0, 1], x=np.zeros((1, 0)),
                          w=np.zeros((2, 0))),
            SubjectRecord(id="b", y=[0.0, 0.0], r=[0, 0], x=np.zeros((2, 0)),
                          w=np.zeros((2, 0))),
        )
        data = PanelData(n_waves=2, subjects=subs)
        post = Posteriors(e=np.ones((2, 1)), d_cond=np.ones((2, 1, 1)),
                          d_marg=np.ones((2, 1)), a_cond=np.ones((2, 1, 2, 1)),
                          a_trans=np.zeros((2, 1, 1, 1, 1)), a_marg=np.ones((2, 2, 1)),
                          T_obs=np.array([1, 2]))
        params = ParameterSet(beta=np.zeros(0), zeta=[0.0], sigma2=1.0,
                              gamma=np.zeros(0), xi=[0.4], eta0_alpha=[],
                              eta0_psi=[], eta1_alpha=np.zeros((1, 0)), eta1_psi=[],
                              pi=[[1.0]], tau=[1.0])
        gamma, xi = m_step_dropout(data, post, params)
        # three stays and one exit: logit(3/4)
        assert xi[0] == pytest.approx(np.log(3.0), abs=1e-8)

    def test_pure_group_weights_fit_independent_classes(self):
        rng = np.random.default_rng(13)
        params = random_params(1, 2, 1, 0, 0, rng)
        data = simulate_small(params, 60, 5, seed=14)
        post = e_step(data, params)
        hard = (post.d_marg > 0.5).astype(float)
        post_hard = Posteriors(e=post.e, d_cond=post.d_cond, d_marg=hard,
                               a_cond=post.a_cond, a_trans=post.a_trans,
                               a_marg=post.a_marg, T_obs=post.T_obs)
        gamma, xi = m_step_dropout(data, post_hard, params)
        for k in range(2):
            members = [i for i in range(len(data.subjects)) if hard[i, k] == 1.0]
            stays = sum(int(data.subjects[i].y.size == data.n_waves or True) *
                        int((1 - data.subjects[i].r).sum()) for i in members)
            trials = sum(data.subjects[i].r.size for i in members)
            rate = np.clip(stays / trials, 1e-12, 1 - 1e-12)
            assert xi[k] == pytest.approx(np.log(rate / (1 - rate)), abs=1e-6)

    def test_doubling_weights_leaves_root_unchanged(self):
        rng = np.random.default_rng(15)
        params = random_params(1, 2, 1, 0, 1, rng)
        data = simulate_small(params, 40, 5, seed=16)
        post = e_step(data, params)
        gamma1, xi1 = m_step_dropout(data, post, params)
        doubled = Posteriors(e=post.e, d_cond=post.d_cond, d_marg=2.0 * post.d_marg,
                             a_cond=post.a_cond, a_trans=post.a_trans,
                             a_marg=post.a_marg, T_obs=post.T_obs)
        gamma2, xi2 = m_step_dropout(data, doubled, params)
        assert np.allclose(gamma1, gamma2, atol=1e-8)
        assert np.allclose(xi1, xi2, atol=1e-8)

    def test_separation_is_capped_with_warning(self):
        subs = tuple(
            SubjectRecord(id=str(i), y=np.zeros(3), r=[0, 0, 0],
                          x=np.zeros((3, 0)), w=np.zeros((3, 0)))
            for i in range(10)
        )
        data = PanelData(n_waves=3, subjects=subs)
        n = len(subs)
        post = Posteriors(e=np.ones((n, 1)), d_cond=np.ones((n, 1, 1)),
                          d_marg=np.ones((n, 1)), a_cond=np.ones((n, 1, 3, 1)),
                          a_trans=np.zeros((n, 1, 2, 1, 1)), a_marg=np.ones((n, 3, 1)),
                          T_obs=np.full(n, 3))
        params = ParameterSet(beta=np.zeros(0), zeta=[0.0], sigma2=1.0,
                              gamma=np.zeros(0), xi=[0.0], eta0_alpha=[],
                              eta0_psi=[], eta1_alpha=np.zeros((1, 0)), eta1_psi=[],
                              pi=[[1.0]], tau=[1.0])
        with pytest.warns(UserWarning, match="separation"):
            gamma, xi = m_step_dropout(data, post, params)
        assert xi[0] == pytest.approx(30.0)


class TestFit:
    def test_trivial_model_matches_independent_mles(self):
        rng = np.random.default_rng(17)
        params = random_params(1, 1, 1, 0, 0, rng)
        spec = ModelSpec(G=1, K=1, H=1, em=EMControls(max_iter=50, tol=1e-10,
                                                      n_starts=2, seed=0))
        data, _ = simulate_panel(params, spec, n=60, n_waves=5, seed=18)
        res = fit(data, spec)
        ys = np.concatenate([s.y for s in data.subjects])
        assert res.theta_hat.zeta[0] == pytest.approx(ys.mean(), abs=1e-8)
        assert res.theta_hat.sigma2 == pytest.approx(ys.var(), rel=1e-6)
        stays = sum(int((1 - s.r).sum()) for s in data.subjects)
        trials = sum(s.r.size for s in data.subjects)
        rate = stays / trials
        assert res.theta_hat.xi[0] == pytest.approx(np.log(rate / (1 - rate)), abs=1e-6)

    def test_monotone_trace_and_convergence(self):
        rng = np.random.default_rng(19)
        params = random_params(2, 2, 2, 1, 1, rng)
        spec = ModelSpec(G=2, K=2, H=2, p_x=1, p_w=1,
                         em=EMControls(max_iter=150, tol=1e-5, n_starts=2, seed=3))
        data, _ = simulate_panel(params, spec, n=80, n_waves=5, seed=20)
        res = fit(data, spec)
        for trace in res.start_traces:
            if trace.size:
                assert np.all(np.diff(trace) >= -1e-8)
        assert res.loglik == pytest.approx(observed_loglik(data, res.theta_hat),
                                           abs=1e-6)
        assert res.bic == pytest.approx(-2 * res.loglik + res.n_params * np.log(80))

    def test_subject_order_does_not_change_the_estimate(self):
        rng = np.random.default_rng(21)
        params = random_params(2, 1, 1, 1, 1, rng)
        spec = ModelSpec(G=2, K=1, H=1, p_x=1, p_w=1,
                         em=EMControls(max_iter=120, tol=1e-9, n_starts=1, seed=5))
        data, _ = simulate_panel(params, spec, n=50, n_waves=4, seed=22)
        res1 = fit(data, spec)
        perm = np.random.default_rng(0).permutation(data.n_subjects)
        shuffled = PanelData(n_waves=data.n_waves,
                             subjects=tuple(data.subjects[i] for i in perm),
                             x_names=data.x_names, w_names=data.w_names)
        res2 = fit(shuffled, spec)
        assert np.allclose(res1.theta_hat.flatten(), res2.theta_hat.flatten(),
                           atol=1e-10)

    def test_canonical_label_order_in_result(self):
        rng = np.random.default_rng(23)
        params = random_params(2, 2, 2, 1, 1, rng)
        spec = ModelSpec(G=2, K=2, H=2, p_x=1, p_w=1,
                         em=EMControls(max_iter=60, tol=1e-4, n_starts=2, seed=7))
        data, _ = simulate_panel(params, spec, n=60, n_waves=5, seed=24)
        res = fit(data, spec)
        assert np.all(np.diff(res.theta_hat.xi) > 0)
        assert np.all(np.diff(res.theta_hat.tau) <= 0)

    def test_workers_reproduce_serial_results(self):
        rng = np.random.default_rng(25)
        params = random_params(2, 1, 1, 1, 1, rng)
        spec = ModelSpec(G=2, K=1, H=1, p_x=1, p_w=1,
                         em=EMControls(max_iter=40, tol=1e-6, n_starts=2, seed=9))
        data, _ = simulate_panel(params, spec, n=30, n_waves=4, seed=26)
        serial = fit(data, spec, workers=1)
        parallel = fit(data, spec, workers=2)
        assert serial.start_index == parallel.start_index
        assert np.allclose(serial.theta_hat.flatten(), parallel.theta_hat.flatten(),
                           atol=0.0)
