"""Noise schedule tables, forward/reverse kernels, EMA, and checkpoints."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from repap.diffusion import (
    CheckpointFormatError,
    EmaState,
    NoiseSchedule,
    clamp_observed,
    data_loss,
    ema_update,
    forward_diffuse,
    load_checkpoint,
    make_cosine_schedule,
    posterior_mean,
    posterior_sigma2,
    reverse_step,
    save_checkpoint,
    schedule_from_beta,
)


class TestCosineSchedule:
    def test_frozen_values_t400(self):
        s = make_cosine_schedule(400)
        assert float(s.beta[0]) == pytest.approx(1.12314716943173742e-04, rel=1e-14)
        assert float(s.alpha_bar[0]) == pytest.approx(9.99887685283056826e-01, rel=1e-14)
        assert float(s.alpha_bar[199]) == pytest.approx(4.93843590440637747e-01, rel=1e-13)
        assert float(s.alpha_bar[399]) == pytest.approx(1.51797286597263516e-08, rel=1e-12)
        assert float(s.beta_tilde[1]) == pytest.approx(6.28474641140851253e-05, rel=1e-13)

    def test_frozen_values_t40(self):
        s = make_cosine_schedule(40)
        assert float(s.beta[0]) == pytest.approx(2.48716544809990392e-03, rel=1e-14)
        assert float(s.alpha_bar[0]) == pytest.approx(9.97512834551900096e-01, rel=1e-14)
        assert float(s.alpha_bar[39]) == pytest.approx(1.51721273209587892e-06, rel=1e-12)
        assert float(s.beta_tilde[1]) == pytest.approx(1.71748394897092518e-03, rel=1e-13)

    def test_midpoint_independent_of_t(self):
        # the squared-cosine ramp is a function of t/T only
        a = float(make_cosine_schedule(400).alpha_bar[199])
        b = float(make_cosine_schedule(40).alpha_bar[19])
        assert a == pytest.approx(b, rel=1e-12)

    def test_tables_float64_and_monotone(self):
        s = make_cosine_schedule(100)
        assert s.beta.dtype == torch.float64
        assert torch.all(s.beta > 0) and torch.all(s.beta <= 0.999)
        assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])

    def test_cumprod_identity_exact(self):
        s = make_cosine_schedule(100)
        assert torch.equal(s.alpha_bar, torch.cumprod(1.0 - s.beta, dim=0))

    def test_beta_tilde_first_exactly_zero(self):
        assert float(make_cosine_schedule(100).beta_tilde[0]) == 0.0

    def test_needs_two_steps(self):
        with pytest.raises(ValueError):
            make_cosine_schedule(1)

    def test_rebuild_from_beta_matches(self):
        s = make_cosine_schedule(64)
        r = schedule_from_beta(s.beta.clone())
        assert torch.equal(r.alpha_bar, s.alpha_bar)
        assert torch.equal(r.beta_tilde, s.beta_tilde)

    def test_rebuild_validates_table(self):
        with pytest.raises(ValueError):
            schedule_from_beta(torch.tensor([0.1]))
        with pytest.raises(ValueError):
            schedule_from_beta(torch.zeros(3, 3))


class TestSigma2:
    def test_floor_is_second_entry(self):
        s = make_cosine_schedule(50)
        assert s.sigma2_floor == float(s.beta_tilde[1])
        assert float(s.sigma2(1)) == s.sigma2_floor

    def test_matches_table_above_floor(self):
        s = make_cosine_schedule(50)
        t = torch.arange(2, 51)
        assert torch.equal(s.sigma2(t), s.beta_tilde[1:])

    def test_entrywise_posterior_variance_formula(self):
        # independent recomputation of beta_tilde with the floor applied
        s = make_cosine_schedule(50)
        ab = s.alpha_bar.numpy()
        prev = np.concatenate([[1.0], ab[:-1]])
        bt = (1.0 - prev) / (1.0 - ab) * s.beta.numpy()
        want = np.maximum(bt, bt[1])
        got = s.sigma2(torch.arange(1, 51)).numpy()
        np.testing.assert_allclose(got, want, rtol=1e-15)

    def test_range_validation(self):
        s = make_cosine_schedule(50)
        with pytest.raises(ValueError):
            s.sigma2(0)
        with pytest.raises(ValueError):
            s.sigma2(51)
        with pytest.raises(ValueError):
            posterior_sigma2(torch.tensor([1, 99]), s)


class TestForward:
    def test_formula(self):
        s = make_cosine_schedule(10)
        x0 = torch.full((2, 1, 4, 4), 2.0, dtype=torch.float64)
        eps = torch.full_like(x0, -1.0)
        xt = forward_diffuse(x0, 3, eps, s)
        ab = float(s.alpha_bar[2])
        want = 2.0 * ab**0.5 - (1.0 - ab) ** 0.5
        assert torch.allclose(xt, torch.full_like(x0, want), rtol=1e-14)

    def test_per_sample_timesteps(self):
        s = make_cosine_schedule(10)
        x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
        eps = torch.zeros_like(x0)
        xt = forward_diffuse(x0, torch.tensor([1, 5, 10]), eps, s)
        for i, t in enumerate((1, 5, 10)):
            assert float(xt[i, 0, 0, 0]) == pytest.approx(
                float(s.alpha_bar[t - 1]) ** 0.5, rel=1e-14
            )

    def test_shape_guard(self):
        s = make_cosine_schedule(10)
        with pytest.raises(ValueError, match="eps"):
            forward_diffuse(torch.ones(2, 1, 4, 4), 1, torch.ones(2, 1, 4, 5), s)


class TestDataLoss:
    def test_sum_square_batch_mean(self):
        s = make_cosine_schedule(10)
        x0 = torch.zeros(2, 1, 2, 2, dtype=torch.float64)
        x0_hat = torch.zeros_like(x0)
        x0_hat[0] = 1.0  # sample 0 off by 1 everywhere: sum sq = 4
        assert float(data_loss(x0, x0_hat, 4, s)) == pytest.approx(2.0)

    def test_lambda_scales(self):
        s = make_cosine_schedule(10)
        x0 = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        x0_hat = torch.ones_like(x0)
        assert float(data_loss(x0, x0_hat, 2, s, lambda_t=0.25)) == pytest.approx(1.0)

    def test_validates(self):
        s = make_cosine_schedule(10)
        with pytest.raises(ValueError):
            data_loss(torch.zeros(2, 3), torch.zeros(3, 2), 1, s)
        with pytest.raises(ValueError):
            data_loss(torch.zeros(2, 3), torch.zeros(2, 3), 11, s)


class TestReverse:
    def test_t1_returns_x0_hat_exactly(self):
        s = make_cosine_schedule(10)
        x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        x0_hat = torch.randn_like(x_t)
        out = reverse_step(x_t, x0_hat, 1, s, noise=torch.randn_like(x_t))
        assert torch.equal(out, x0_hat)

    def test_mixed_batch_collapse(self):
        s = make_cosine_schedule(10)
        x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        x0_hat = torch.randn_like(x_t)
        t = torch.tensor([1, 7])
        out = reverse_step(x_t, x0_hat, t, s, noise=torch.zeros_like(x_t))
        assert torch.equal(out[0], x0_hat[0])
        want1 = posterior_mean(x_t[1:], x0_hat[1:], torch.tensor([7]), s)[0]
        assert torch.allclose(out[1], want1, rtol=1e-14)

    def test_noise_scaled_by_beta_tilde(self):
        s = make_cosine_schedule(10)
        x_t = torch.randn(1, 1, 3, 3, dtype=torch.float64)
        x0_hat = torch.randn_like(x_t)
        noise = torch.randn_like(x_t)
        quiet = reverse_step(x_t, x0_hat, 5, s)
        loud = reverse_step(x_t, x0_hat, 5, s, noise=noise)
        sigma = float(s.beta_tilde[4]) ** 0.5
        assert torch.allclose(loud - quiet, sigma * noise, rtol=1e-12)

    def test_posterior_mean_coefficients(self):
        # c0 + ct scales: plugging x_t = x0_hat = 1 gives c0 + ct
        s = make_cosine_schedule(10)
        one = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        got = float(posterior_mean(one, one, 6, s)[0, 0, 0, 0])
        beta = float(s.beta[5])
        ab = float(s.alpha_bar[5])
        ab_prev = float(s.alpha_bar[4])
        c0 = ab_prev**0.5 * beta / (1 - ab)
        ct = (1 - beta) ** 0.5 * (1 - ab_prev) / (1 - ab)
        assert got == pytest.approx(c0 + ct, rel=1e-14)


class TestClamp:
    def test_exact_overwrite(self):
        x = torch.zeros(2, 1, 4, 4, dtype=torch.float64)
        mask = torch.zeros(4, 4)
        mask[1, 2] = 1.0
        obs = torch.full((4, 4), 3.5, dtype=torch.float64)
        out = clamp_observed(x, mask, obs)
        assert float(out[0, 0, 1, 2]) == 3.5
        assert float(out.sum()) == 2 * 3.5

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_idempotent(self, seed):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 2, 5, 5, generator=gen, dtype=torch.float64)
        mask = (torch.rand(5, 5, generator=gen) < 0.4).double()
        obs = torch.randn(2, 5, 5, generator=gen, dtype=torch.float64)
        once = clamp_observed(x, mask, obs)
        twice = clamp_observed(once, mask, obs)
        assert torch.equal(once, twice)

    def test_shape_guard(self):
        with pytest.raises(ValueError):
            clamp_observed(torch.zeros(1, 1, 4, 4), torch.zeros(3, 3), torch.zeros(4, 4))


class TestEma:
    def test_update_math(self):
        lin = torch.nn.Linear(2, 2, bias=False).double()
        with torch.no_grad():
            lin.weight.fill_(1.0)
        ema = EmaState.from_module(lin, decay=0.75)
        with torch.no_grad():
            lin.weight.fill_(2.0)
        ema_update(ema, lin)
        want = 0.75 * 1.0 + 0.25 * 2.0
        assert torch.allclose(ema.shadow["weight"], torch.full((2, 2), want).double())

    def test_copy_to_restores(self):
        lin = torch.nn.Linear(3, 3).double()
        ema = EmaState.from_module(lin, decay=0.9)
        with torch.no_grad():
            lin.weight.add_(1.0)
        ema.copy_to(lin)
        assert torch.equal(lin.weight, ema.shadow["weight"])

    def test_decay_validated(self):
        with pytest.raises(ValueError):
            EmaState(decay=1.0, shadow={})

    def test_shape_mismatch(self):
        ema = EmaState(decay=0.9, shadow={"w": torch.zeros(2)})
        with pytest.raises(ValueError, match="mismatch"):
            ema_update(ema, {"w": torch.zeros(3)})


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "c.pt"
        model = torch.nn.Linear(4, 4)
        sched = make_cosine_schedule(20)
        ema = EmaState.from_module(model, decay=0.9)
        save_checkpoint(path, model, ema, sched, step=7, config={"a": 1})
        blob = load_checkpoint(path)
        assert blob["step"] == 7
        assert blob["schedule"]["T"] == 20
        rebuilt = schedule_from_beta(blob["schedule"]["beta"])
        assert torch.equal(rebuilt.alpha_bar, sched.alpha_bar)
        assert blob["config"] == {"a": 1}
        assert torch.equal(blob["model"]["weight"], model.state_dict()["weight"])
        assert blob["ema"]["decay"] == 0.9

    def test_rejects_garbage_file(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_rejects_wrong_payload(self, tmp_path):
        path = tmp_path / "odd.pt"
        torch.save([1, 2, 3], str(path))
        with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "v99.pt"
        torch.save({"version": 99, "step": 0, "schedule": {}, "model": {}}, str(path))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_rejects_missing_field(self, tmp_path):
        path = tmp_path / "miss.pt"
        torch.save({"version": 1, "step": 0, "model": {}}, str(path))
        with pytest.raises(CheckpointFormatError, match="schedule"):
            load_checkpoint(path)
