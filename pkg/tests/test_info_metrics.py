import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy

from mimicseg.errors import ValidationError
from mimicseg.info_metrics import (Critic, DiscreteJoint, MiEstimatorState, conditional_entropy,
                                   discrete_entropy, discrete_mi_oracle, dv_bound, evaluate_mine,
                                   fit_mine, gaussian_mi, mine_estimate, nats_to_bits, per_view_scores,
                                   shuffle_marginal, train_view_critic)

# frozen from an independent double sum
MI_SYMMETRIC_2X2 = 0.19274475702175753


def _random_table(seed, shape):
    t = np.random.default_rng(seed).random(shape) + 1e-3
    return t / t.sum()


class TestDiscrete:
    def test_golden_table(self):
        assert discrete_mi_oracle([[0.4, 0.1], [0.1, 0.4]]) == pytest.approx(MI_SYMMETRIC_2X2, abs=1e-12)

    def test_independent_is_zero(self):
        table = np.outer([0.2, 0.3, 0.5], [0.6, 0.4])
        assert abs(discrete_mi_oracle(table)) <= 1e-9

    def test_diagonal_is_ln2(self):
        assert discrete_mi_oracle([[0.5, 0.0], [0.0, 0.5]]) == pytest.approx(math.log(2), abs=1e-9)

    def test_entropy_uniform_and_point_mass(self):
        assert discrete_entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8))
        assert discrete_entropy([1.0, 0.0, 0.0]) == 0.0
        assert nats_to_bits(math.log(8)) == pytest.approx(3.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 5), st.integers(1, 5))
    def test_matches_kl_oracle_and_identities(self, seed, rows, cols):
        table = _random_table(seed, (rows, cols))
        j = DiscreteJoint(table)
        mi = discrete_mi_oracle(table)
        kl = entropy(table.ravel(), np.outer(j.px, j.py).ravel())
        assert mi == pytest.approx(kl, abs=1e-10)
        assert mi == pytest.approx(discrete_mi_oracle(table.T), abs=1e-12)
        assert mi == pytest.approx(discrete_entropy(j.px) - conditional_entropy(table), abs=1e-10)
        assert -1e-12 <= mi <= min(discrete_entropy(j.px), discrete_entropy(j.py)) + 1e-12

    def test_zero_cells(self):
        table = np.array([[0.5, 0.0, 0.0], [0.0, 0.25, 0.25]])
        assert discrete_mi_oracle(table) == pytest.approx(math.log(2), abs=1e-12)
        assert conditional_entropy(table) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("bad", [[], [[0.5, 0.6]], [[-0.1, 1.1]], [[np.nan, 1.0]]])
    def test_invalid_tables(self, bad):
        with pytest.raises(ValidationError):
            discrete_mi_oracle(bad)

    def test_table_must_be_2d(self):
        with pytest.raises(ValidationError):
            DiscreteJoint(np.full((2, 2, 2), 1 / 8))


class TestGaussian:
    @pytest.mark.parametrize("rho,expected", [(0.0, 0.0), (0.5, 0.14384103622589045),
                                              (0.9, 0.8303656034108255)])
    def test_closed_form(self, rho, expected):
        assert gaussian_mi(rho) == pytest.approx(expected, abs=1e-12)
        assert gaussian_mi(-rho) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("rho", [1.0, -1.0, 2.0])
    def test_degenerate_correlation(self, rho):
        with pytest.raises(ValidationError):
            gaussian_mi(rho)


class TestMineEstimate:
    def test_dv_of_constant_critic_is_zero(self):
        t = torch.full((10,), 2.5)
        assert float(dv_bound(t, t)) == pytest.approx(0.0, abs=1e-6)

    def test_eval_leaves_state_untouched(self, gen):
        torch.manual_seed(0)
        state = MiEstimatorState(Critic(2, 3))
        before = {k: v.clone() for k, v in state.critic.state_dict().items()}
        u, v = torch.randn(16, 2, generator=gen), torch.randn(16, 3, generator=gen)
        est, out = mine_estimate((u, v), (u, shuffle_marginal(v, gen)), state)
        assert out is state and state.step == 0 and state.ema_denominator is None
        assert math.isfinite(est)
        for k, val in state.critic.state_dict().items():
            torch.testing.assert_close(val, before[k])

    def test_train_step_advances(self, gen):
        torch.manual_seed(0)
        state = MiEstimatorState(Critic(1, 1))
        u, v = torch.randn(8, 1, generator=gen), torch.randn(8, 1, generator=gen)
        mine_estimate((u, v), (u, shuffle_marginal(v, gen)), state, train=True)
        assert state.step == 1 and state.ema_denominator > 0

    def test_small_batch_and_mismatch(self):
        state = MiEstimatorState(Critic(1, 1))
        one = torch.zeros(1, 1)
        with pytest.raises(ValidationError):
            mine_estimate((one, one), (one, one), state)
        with pytest.raises(ValidationError):
            mine_estimate((torch.zeros(4, 1), torch.zeros(3, 1)), (torch.zeros(4, 1), torch.zeros(4, 1)), state)

    def test_ema_gradient(self, gen):
        # gradient of the surrogate equals E_j[dT] - E_m[e^T dT] / ema
        torch.manual_seed(1)
        critic = Critic(1, 1, hidden=8)
        state = MiEstimatorState(critic)
        state.ema_denominator = 3.0
        u, v = torch.randn(32, 1, generator=gen), torch.randn(32, 1, generator=gen)
        v_m = shuffle_marginal(v, gen)
        from mimicseg.info_metrics import _mine_objective
        loss, _ = _mine_objective(critic(u, v), critic(u, v_m), state)
        ema = state.ema_denominator
        grads = torch.autograd.grad(loss, list(critic.parameters()))
        t_m = critic(u, v_m)
        ref = -(critic(u, v).mean() - torch.exp(t_m).mean() / ema)
        ref_grads = torch.autograd.grad(ref, list(critic.parameters()))
        for a, b in zip(grads, ref_grads):
            torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-7)
        assert ema == pytest.approx(0.99 * 3.0 + 0.01 * torch.exp(t_m).mean().item(), rel=1e-5)

    def test_state_dict_roundtrip(self, gen):
        torch.manual_seed(0)
        a = MiEstimatorState(Critic(1, 1))
        fit_mine(a, lambda: (torch.randn(16, 1, generator=gen),) * 2, 3, gen)
        b = MiEstimatorState(Critic(1, 1))
        b.load_state_dict(a.state_dict())
        assert b.step == 3 and b.ema_denominator == a.ema_denominator

    def test_fixed_critic_is_a_lower_bound(self, gen):
        # any critic, evaluated on a large sample, stays below the exact MI
        torch.manual_seed(0)
        table = torch.tensor([[0.4, 0.1], [0.1, 0.4]], dtype=torch.float64)
        idx_gen = torch.Generator().manual_seed(3)

        def sample(n):
            idx = torch.multinomial(table.ravel(), n, replacement=True, generator=idx_gen)
            return (idx // 2).float()[:, None], (idx % 2).float()[:, None]

        state = MiEstimatorState(Critic(1, 1, hidden=16))
        fit_mine(state, lambda: sample(256), 150, gen)
        u, v = sample(60_000)
        assert evaluate_mine(state, u, v, gen) <= MI_SYMMETRIC_2X2 + 0.05

    def test_learns_dependence(self, gen):
        torch.manual_seed(0)

        def sample():
            x = torch.randn(256, 1, generator=gen)
            return x, 0.9 * x + math.sqrt(1 - 0.81) * torch.randn(256, 1, generator=gen)

        state = MiEstimatorState(Critic(1, 1))
        fit_mine(state, sample, 400, gen)
        u, v = sample()
        assert evaluate_mine(state, u, v, gen) > 0.4


class TestPerViewScores:
    def test_column_mean_is_batch_dv(self, gen):
        torch.manual_seed(0)
        critic = Critic(3, 2, n_views=5)
        u, views = torch.randn(12, 3, generator=gen), torch.randn(12, 5, 2, generator=gen)
        scores, t_joint, t_marg = per_view_scores(critic, u, views, gen)
        assert scores.shape == (12, 5)
        for j in range(5):
            dv = float(dv_bound(t_joint[:, j], t_marg[:, j]).detach())
            assert scores[:, j].mean().item() == pytest.approx(dv, abs=1e-5)

    def test_view_index_required(self):
        with pytest.raises(ValueError):
            Critic(1, 1, n_views=3)(torch.zeros(2, 1), torch.zeros(2, 1))

    def test_per_view_ema_slots(self, gen):
        torch.manual_seed(0)
        state = MiEstimatorState(Critic(2, 2, n_views=4))
        est = train_view_critic(state, torch.randn(8, 2, generator=gen), torch.randn(8, 4, 2, generator=gen), gen)
        assert est.shape == (4,) and state.ema_denominator.shape == (4,)
        assert state.step == 1


class TestPerViewCritics:
    def test_independent_critics_match_dispatch(self, gen):
        from mimicseg.info_metrics import PerViewCritics
        torch.manual_seed(0)
        critics = PerViewCritics(2, 3, n_views=4, hidden=8)
        u, v = torch.randn(10, 2, generator=gen), torch.randn(10, 3, generator=gen)
        idx = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3, 3, 3])
        out = critics(u, v, idx)
        for k in range(10):
            torch.testing.assert_close(out[k], critics.critics[int(idx[k])](u[k:k + 1], v[k:k + 1])[0])

    def test_works_with_view_training(self, gen):
        from mimicseg.info_metrics import PerViewCritics
        torch.manual_seed(0)
        state = MiEstimatorState(PerViewCritics(2, 2, n_views=3, hidden=8))
        est = train_view_critic(state, torch.randn(6, 2, generator=gen), torch.randn(6, 3, 2, generator=gen), gen)
        assert est.shape == (3,)
