"""
Training objectives and continuous Bernoulli utilities.

The continuous Bernoulli density on [0, 1] is C(lam) lam^x (1 - lam)^(1 - x) with
C(lam) = 2 atanh(1 - 2 lam) / (1 - 2 lam). With lam = sigmoid(z) this becomes
C = z / tanh(z / 2) and the mean becomes 1 / (1 - exp(-z)) - 1 / z, which is what
the torch code below uses since it avoids evaluating lam near 0 or 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import brentq

LOG2 = math.log(2.0)
# |lam - 1/2| below which the series branch is used
SERIES_EPS = 1e-6
# |logit| below which the logit-domain series branch is used
LOGIT_SERIES_EPS = 1e-3


@dataclass
class LossConfig:
    gamma: float = 10.0
    lambda_inh: float = 10.0
    deviation_loss: str = "continuous_bernoulli"
    r: float = 1.0
    dev_mask: str = "activity"

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.lambda_inh < 0:
            raise ValueError("lambda_inh must be nonnegative")
        if self.deviation_loss not in ("continuous_bernoulli", "mse"):
            raise ValueError(f"unknown deviation loss {self.deviation_loss!r}")
        if self.dev_mask not in ("activity", "all"):
            raise ValueError(f"unknown dev_mask {self.dev_mask!r}")


##################################################
# CONTINUOUS BERNOULLI (lambda domain)           #
##################################################


def _check_lam(lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(~(lam > 0) | ~(lam < 1)):
        raise ValueError("continuous Bernoulli parameter must lie in (0, 1)")
    return lam


def cb_log_normalizer(lam):
    """log C(lam), with a series in u = 1 - 2 lam near lam = 1/2."""
    lam = _check_lam(lam)
    u = 1 - 2 * lam
    near = np.abs(lam - 0.5) < SERIES_EPS
    u_safe = np.where(near, 0.5, u)
    with np.errstate(divide="ignore"):
        direct = np.log(2 * np.arctanh(u_safe) / u_safe)
    # atanh(u)/u = 1 + u^2/3 + u^4/5 + ...
    series = LOG2 + np.log1p(u ** 2 / 3 + u ** 4 / 5)
    out = np.where(near, series, direct)
    return out[()] if out.ndim == 0 else out


def cb_mean(lam):
    """Mean of the continuous Bernoulli distribution."""
    lam = _check_lam(lam)
    u = 1 - 2 * lam
    near = np.abs(lam - 0.5) < SERIES_EPS
    u_safe = np.where(near, 0.5, u)
    lam_safe = np.where(near, 0.25, lam)
    with np.errstate(divide="ignore"):
        direct = lam_safe / (2 * lam_safe - 1) + 1 / (2 * np.arctanh(u_safe))
    series = 0.5 - u / 6 - 2 * u ** 3 / 45
    out = np.where(near, series, direct)
    return out[()] if out.ndim == 0 else out


##################################################
# CONTINUOUS BERNOULLI (logit domain)            #
##################################################


def _is_torch(x):
    return isinstance(x, torch.Tensor)


def cb_log_normalizer_logits(z):
    """log C(sigmoid(z)) = log(z / tanh(z / 2)); works for numpy or torch input."""
    if _is_torch(z):
        small = z.abs() < LOGIT_SERIES_EPS
        a = torch.where(small, torch.ones_like(z), z.abs())
        direct = torch.log(a) - torch.log(torch.tanh(a / 2))
    else:
        z = np.asarray(z, dtype=np.float64)
        small = np.abs(z) < LOGIT_SERIES_EPS
        a = np.where(small, 1.0, np.abs(z))
        direct = np.log(a) - np.log(np.tanh(a / 2))
    z2 = z * z
    series = LOG2 + z2 / 12 - 7 * z2 * z2 / 1440
    if _is_torch(z):
        return torch.where(small, series, direct)
    return np.where(small, series, direct)


def cb_mean_logits(z):
    """Mean of CB(sigmoid(z)): 1 / (1 - exp(-z)) - 1 / z, series near 0."""
    if _is_torch(z):
        small = z.abs() < LOGIT_SERIES_EPS
        a = torch.where(small, torch.ones_like(z), z)
        direct = -1 / torch.expm1(-a) - 1 / a
        series = 0.5 + z / 12 - z ** 3 / 720
        return torch.where(small, series, direct)
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < LOGIT_SERIES_EPS
    a = np.where(small, 1.0, z)
    with np.errstate(over="ignore", divide="ignore"):
        direct = -1 / np.expm1(-a) - 1 / a
    out = np.where(small, 0.5 + z / 12 - z ** 3 / 720, direct)
    return out[()] if out.ndim == 0 else out


def deviation_from_logits(logits, r: float = 1.0):
    """Expected deviation in semitones, (2 mu - 1) r, elementwise."""
    return (2 * cb_mean_logits(logits) - 1) * r


def cb_logit_from_mean(x, max_logit: float = 1e4):
    """Invert ``cb_mean_logits``; targets at the boundary map to +-max_logit."""
    x = np.asarray(x, dtype=np.float64)
    lo_mu, hi_mu = cb_mean_logits(-max_logit), cb_mean_logits(max_logit)
    out = np.empty_like(x)
    for i, xi in np.ndenumerate(x):
        if xi <= lo_mu:
            out[i] = -max_logit
        elif xi >= hi_mu:
            out[i] = max_logit
        elif abs(xi - 0.5) < 1e-15:
            out[i] = 0.0
        else:
            out[i] = brentq(lambda z: cb_mean_logits(z) - xi, -max_logit, max_logit,
                            xtol=1e-14, rtol=1e-15)
    return out[()] if out.ndim == 0 else out


def cb_nll_logits(z, x):
    """Per-entry negative log-likelihood of x under CB(sigmoid(z))."""
    return -(cb_log_normalizer_logits(z) + x * z - F.softplus(z))


##################################################
# LOSS TERMS                                     #
##################################################


def _n_rows(t):
    # everything except the trailing [string, fret] axes counts as frames
    return max(1, int(np.prod(t.shape[:-2])))


def loss_tablature(logits, targets):
    """BCE summed over (string, fret) pairs, averaged over frames."""
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(targets.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="sum")
    return bce / _n_rows(logits)


def loss_onsets(logits, targets):
    return loss_tablature(logits, targets)


def loss_inhibition(activations):
    """Sum of pairwise products of same-string activations, averaged over frames."""
    total = activations.sum(-1)
    pairs = (total ** 2 - (activations ** 2).sum(-1)) / 2
    return pairs.sum() / _n_rows(activations)


def loss_deviation(logits, targets_x, mask, mode: str = "continuous_bernoulli"):
    """Masked mean of the continuous Bernoulli NLL (or MSE on sigmoid outputs)."""
    mask = mask.to(logits.dtype)
    n = mask.sum()
    if n.item() == 0:
        warnings.warn("deviation loss has an empty mask, contributing 0", RuntimeWarning)
        return (logits * 0).sum()
    x = targets_x.to(logits.dtype)
    if mode == "continuous_bernoulli":
        per_entry = cb_nll_logits(logits, x)
    elif mode == "mse":
        per_entry = (torch.sigmoid(logits) - x) ** 2
    else:
        raise ValueError(f"unknown deviation loss {mode!r}")
    return (per_entry * mask).sum() / n


def loss_total(components: dict, cfg: LossConfig = LossConfig()):
    """
    Combine component losses. Missing components (disabled heads) count as 0.

    Continuous Bernoulli: (tab + lambda inh + ons) / gamma + dev.
    MSE ablation: tab + lambda inh + ons + gamma dev.
    """
    tab = components.get("tab", 0.0)
    inh = components.get("inh", 0.0)
    ons = components.get("ons", 0.0)
    dev = components.get("dev", 0.0)
    discrete = tab + cfg.lambda_inh * inh + ons
    if cfg.deviation_loss == "mse":
        return discrete + cfg.gamma * dev
    return discrete / cfg.gamma + dev


def compute_losses(logits: dict, targets: dict, cfg: LossConfig = LossConfig()) -> dict:
    """
    All enabled loss terms for a batch.

    ``logits`` maps head name ("tablature", "deviation", "onset") to [N, S, F]
    tensors; ``targets`` holds "activity", "onsets", "deviation_x" and
    "deviation_mask" tensors of the same shape.
    """
    out = {}
    tab_logits = logits["tablature"]
    out["tab"] = loss_tablature(tab_logits, targets["activity"])
    out["inh"] = loss_inhibition(torch.sigmoid(tab_logits))
    if logits.get("onset") is not None:
        out["ons"] = loss_onsets(logits["onset"], targets["onsets"])
    if logits.get("deviation") is not None:
        mask = targets["deviation_mask"]
        if cfg.dev_mask == "all":
            mask = torch.ones_like(mask)
        out["dev"] = loss_deviation(logits["deviation"], targets["deviation_x"], mask,
                                    cfg.deviation_loss)
    out["total"] = loss_total(out, cfg)
    return out
