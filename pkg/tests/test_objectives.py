import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from oracles import naive_bce, naive_inhibition, quad_mean, quad_normalizer
from fretcontour.objectives import (SERIES_EPS, LossConfig, cb_log_normalizer,
                                    cb_log_normalizer_logits, cb_logit_from_mean, cb_mean,
                                    cb_mean_logits, cb_nll_logits, compute_losses,
                                    deviation_from_logits, loss_deviation, loss_inhibition,
                                    loss_onsets, loss_tablature, loss_total)


class TestLogNormalizer:
    def test_symmetric_case(self):
        assert cb_log_normalizer(0.5) == pytest.approx(math.log(2), abs=1e-15)

    def test_against_quadrature(self):
        # log(2 atanh(-0.8) / -0.8) = log(2.7465...)
        assert cb_log_normalizer(0.9) == pytest.approx(math.log(quad_normalizer(0.9)), abs=1e-10)
        assert cb_log_normalizer(0.9) == pytest.approx(1.0103, abs=1e-4)

    @pytest.mark.parametrize("lam", [0.1, 0.3])
    def test_reflection(self, lam):
        assert abs(cb_log_normalizer(lam) - cb_log_normalizer(1 - lam)) < 1e-12

    @pytest.mark.parametrize("lam", [0.0, 1.0, -0.1, 1.5, np.nan])
    def test_rejects_outside_unit_interval(self, lam):
        with pytest.raises(ValueError):
            cb_log_normalizer(lam)

    def test_series_branch_matches_high_precision(self):
        mpmath.mp.dps = 50
        for lam in [0.5 + 1e-9, 0.5 - 1e-9, 0.5 + SERIES_EPS * 0.999, 0.5 + SERIES_EPS * 1.001]:
            u = 1 - 2 * mpmath.mpf(lam)
            exact = mpmath.log(2 * mpmath.atanh(u) / u)
            assert abs(cb_log_normalizer(lam) - float(exact)) < 1e-14

    def test_logit_form_agrees(self, rng):
        lam = rng.uniform(0.01, 0.99, 200)
        z = np.log(lam / (1 - lam))
        np.testing.assert_allclose(cb_log_normalizer_logits(z), cb_log_normalizer(lam), atol=1e-12)


class TestMean:
    def test_half(self):
        assert cb_mean(0.5) == 0.5

    def test_against_quadrature(self):
        assert abs(cb_mean(0.9) - quad_mean(0.9)) < 1e-6
        assert cb_mean(0.9) == pytest.approx(0.6699, abs=1e-4)

    @settings(max_examples=200)
    @given(st.floats(1e-6, 1 - 1e-6))
    def test_reflection(self, lam):
        assert cb_mean(lam) + cb_mean(1 - lam) == pytest.approx(1.0, abs=1e-9)

    def test_strictly_increasing_with_limits(self):
        lam = np.linspace(1e-6, 1 - 1e-6, 20001)
        mu = cb_mean(lam)
        assert np.all(np.diff(mu) > 0)
        # the approach to the limits is logarithmic: mu ~ 1 / |log lam| near 0
        assert mu[0] == pytest.approx(quad_mean(1e-6), abs=1e-6)
        assert cb_mean(1e-300) < 0.002 and cb_mean(1 - 1e-16) > 0.97

    def test_continuity_across_half(self):
        mpmath.mp.dps = 50
        for lam in [0.5 - 1e-9, 0.5 + 1e-9, 0.5 + SERIES_EPS, 0.5 - SERIES_EPS]:
            lam_m = mpmath.mpf(lam)
            u = 1 - 2 * lam_m
            exact = lam_m / (2 * lam_m - 1) + 1 / (2 * mpmath.atanh(u))
            assert abs(cb_mean(lam) - float(exact)) < 1e-8
        # series and direct branches meet at the switch point
        below = cb_mean(0.5 + SERIES_EPS * (1 - 1e-9))
        above = cb_mean(0.5 + SERIES_EPS * (1 + 1e-9))
        assert abs(below - above) < 1e-8

    def test_logit_form_agrees(self, rng):
        lam = rng.uniform(0.01, 0.99, 200)
        z = np.log(lam / (1 - lam))
        np.testing.assert_allclose(cb_mean_logits(z), cb_mean(lam), atol=1e-12)
        zt = torch.tensor(z)
        np.testing.assert_allclose(cb_mean_logits(zt).numpy(), cb_mean(lam), atol=1e-12)


class TestDeviationMapping:
    def test_zero_logit(self):
        assert deviation_from_logits(0.0, 1.0) == 0.0

    def test_saturation(self):
        assert deviation_from_logits(1e6, 1.0) == pytest.approx(1.0, abs=1e-5)
        assert deviation_from_logits(-1e6, 0.5) == pytest.approx(-0.5, abs=1e-5)

    def test_lambda_point_nine(self):
        expected = (2 * quad_mean(0.9) - 1) * 1.0
        assert deviation_from_logits(math.log(9), 1.0) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.3398, abs=1e-4)

    @settings(max_examples=100)
    @given(st.floats(0.001, 0.999))
    def test_inverse(self, x):
        z = cb_logit_from_mean(x)
        assert cb_mean_logits(z) == pytest.approx(x, abs=1e-10)


class TestDeviationLoss:
    def test_uniform_case(self):
        # lambda = 1/2 is the uniform density, whatever the target
        for x in (0.0, 0.5, 1.0):
            loss = loss_deviation(torch.zeros(1, 1, 1), torch.full((1, 1, 1), x), torch.ones(1, 1, 1))
            assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_grid_search_minimizer_recovers_target(self):
        x = 0.8
        grid = np.linspace(-20, 20, 400001)
        nll = cb_nll_logits(torch.tensor(grid), torch.tensor(x)).numpy()
        z_best = grid[np.argmin(nll)]
        assert deviation_from_logits(z_best, 1.0) == pytest.approx(2 * x - 1, abs=1e-3)

    @pytest.mark.parametrize("x", [0.05, 0.3, 0.5, 0.62, 0.97])
    def test_minimizer_consistency(self, x):
        res = minimize_scalar(lambda z: float(cb_nll_logits(torch.tensor(z, dtype=torch.float64),
                                                            torch.tensor(x))),
                              bounds=(-60, 60), method="bounded", options={"xatol": 1e-10})
        assert deviation_from_logits(res.x, 1.0) == pytest.approx(2 * x - 1, abs=1e-3)

    def test_matches_density_by_quadrature(self):
        lam, x = 0.3, 0.7
        z = math.log(lam / (1 - lam))
        density = quad_normalizer(lam) * lam ** x * (1 - lam) ** (1 - x)
        loss = loss_deviation(torch.tensor([[[z]]], dtype=torch.float64),
                              torch.tensor([[[x]]], dtype=torch.float64), torch.ones(1, 1, 1))
        assert loss.item() == pytest.approx(-math.log(density), abs=1e-10)

    def test_mask_restricts_mean(self):
        logits = torch.tensor([[[0.0, 50.0]]], dtype=torch.float64)
        x = torch.tensor([[[0.5, 0.0]]])
        loss = loss_deviation(logits, x, torch.tensor([[[1.0, 0.0]]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        full = loss_deviation(logits, x, torch.ones(1, 1, 2))
        assert full.item() > 10

    def test_can_be_negative(self):
        z = torch.tensor([[[8.0]]], dtype=torch.float64)
        assert loss_deviation(z, torch.tensor([[[0.95]]]), torch.ones(1, 1, 1)).item() < 0

    def test_mse_mode(self):
        logits = torch.tensor([[[0.3, -1.2]]], dtype=torch.float64)
        x = torch.sigmoid(logits)
        assert loss_deviation(logits, x, torch.ones_like(x), "mse").item() == pytest.approx(0.0)

    def test_empty_mask_warns(self):
        logits = torch.zeros(2, 6, 20, requires_grad=True)
        with pytest.warns(RuntimeWarning):
            loss = loss_deviation(logits, torch.zeros(2, 6, 20), torch.zeros(2, 6, 20))
        assert loss.item() == 0.0
        loss.backward()

    def test_finite_at_extreme_logits(self):
        z = torch.tensor([-1e4, -50.0, -1e-9, 0.0, 1e-9, 50.0, 1e4], dtype=torch.float64,
                         requires_grad=True)
        loss = cb_nll_logits(z, torch.full_like(z, 0.3)).sum()
        loss.backward()
        assert torch.isfinite(loss) and torch.all(torch.isfinite(z.grad))


class TestDiscreteLosses:
    def test_tablature_against_naive(self, rng):
        for _ in range(20):
            logits = torch.tensor(rng.normal(0, 3, (5, 6, 20)))
            targets = torch.tensor((rng.random((5, 6, 20)) < 0.1).astype(float))
            assert loss_tablature(logits, targets).item() == pytest.approx(
                naive_bce(logits.numpy(), targets.numpy()), abs=1e-9)

    def test_zero_logits(self):
        loss = loss_tablature(torch.zeros(3, 6, 20), torch.zeros(3, 6, 20))
        assert loss.item() == pytest.approx(120 * math.log(2), rel=1e-6)

    def test_confident_predictions(self):
        targets = torch.zeros(4, 6, 20)
        targets[:, 0, 3] = 1
        logits = torch.where(targets > 0, 40.0, -40.0)
        assert loss_tablature(logits, targets).item() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_tablature(torch.zeros(2, 6, 20), torch.zeros(2, 6, 19))

    def test_inhibition_cases(self):
        one = torch.zeros(1, 6, 20)
        one[0, :, 2] = 1
        assert loss_inhibition(one).item() == 0.0
        two = torch.zeros(1, 6, 20)
        two[0, 1, [4, 7]] = 1
        assert loss_inhibition(two).item() == pytest.approx(1.0)

    def test_inhibition_against_naive(self, rng):
        acts = torch.tensor(rng.random((4, 6, 20)))
        assert loss_inhibition(acts).item() == pytest.approx(naive_inhibition(acts.numpy()),
                                                             abs=1e-9)

    def test_onsets(self, rng):
        assert loss_onsets(torch.full((2, 6, 20), -40.0), torch.zeros(2, 6, 20)).item() < 1e-12
        logits = torch.tensor(rng.normal(0, 2, (3, 6, 20)))
        targets = torch.tensor((rng.random((3, 6, 20)) < 0.05).astype(float))
        assert loss_onsets(logits, targets).item() == pytest.approx(
            naive_bce(logits.numpy(), targets.numpy()), abs=1e-9)


class TestTotal:
    def test_arithmetic(self):
        comps = {"tab": 1.0, "inh": 0.01, "ons": 0.5, "dev": -0.2}
        assert loss_total(comps, LossConfig(gamma=10, lambda_inh=10)) == pytest.approx(-0.04)

    def test_mse_form(self):
        comps = {"tab": 1.0, "inh": 0.01, "ons": 0.5, "dev": 0.02}
        cfg = LossConfig(gamma=10, lambda_inh=10, deviation_loss="mse")
        # gamma times the standard composition
        assert loss_total(comps, cfg) == pytest.approx(1.0 + 0.1 + 0.5 + 10 * 0.02)

    def test_no_inhibition(self):
        comps = {"tab": 1.0, "inh": 3.0, "ons": 0.5, "dev": 0.0}
        assert loss_total(comps, LossConfig(lambda_inh=0)) == pytest.approx(0.15)

    def test_disabled_heads(self):
        assert loss_total({"tab": 2.0, "inh": 0.0}, LossConfig()) == pytest.approx(0.2)

    @pytest.mark.parametrize("kwargs", [{"gamma": 0}, {"lambda_inh": -1},
                                        {"deviation_loss": "huber"}, {"dev_mask": "none"}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)

    def test_compute_losses_disabled_heads(self):
        logits = {"tablature": torch.zeros(2, 6, 20), "deviation": None, "onset": None}
        targets = {k: torch.zeros(2, 6, 20) for k in
                   ("activity", "onsets", "deviation_x", "deviation_mask")}
        out = compute_losses(logits, targets)
        assert set(out) == {"tab", "inh", "total"}

    def test_dev_mask_all(self):
        logits = {"tablature": torch.zeros(1, 6, 20), "deviation": torch.zeros(1, 6, 20),
                  "onset": None}
        targets = {"activity": torch.zeros(1, 6, 20), "onsets": torch.zeros(1, 6, 20),
                   "deviation_x": torch.full((1, 6, 20), 0.5),
                   "deviation_mask": torch.zeros(1, 6, 20)}
        # an empty activity mask still gives a loss over every entry
        targets["deviation_x"][0, 0, 0] = 0.9
        logits["deviation"][0, 0, 0] = 2.0
        out = compute_losses(logits, targets, LossConfig(dev_mask="all"))
        expected = float(cb_nll_logits(torch.tensor(2.0, dtype=torch.float64),
                                       torch.tensor(0.9, dtype=torch.float64))) / 120
        assert out["dev"].item() == pytest.approx(expected, abs=1e-6)


def test_gradient_matches_finite_differences(rng):
    z = torch.tensor(rng.uniform(-15, 15, 100), dtype=torch.float64, requires_grad=True)
    x = torch.tensor(rng.uniform(0, 1, 100), dtype=torch.float64)
    cb_nll_logits(z, x).sum().backward()
    h = 1e-4
    with torch.no_grad():
        fd = (cb_nll_logits(z + h, x) - cb_nll_logits(z - h, x)) / (2 * h)
    rel = (z.grad - fd).abs() / fd.abs().clamp_min(1e-3)
    assert rel.max().item() < 1e-4
    # the analytic gradient is mu(z) - x
    np.testing.assert_allclose(z.grad.numpy(), cb_mean_logits(z.detach()).numpy() - x.numpy(),
                               atol=1e-10)
