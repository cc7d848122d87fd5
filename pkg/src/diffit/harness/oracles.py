"""Sampler checks against closed-form optimal denoisers (no training)."""

from __future__ import annotations

import numpy as np

from ..diffusion import VE, VP, SamplerConfig, dirac_eps, gaussian_eps, sample
from ..tensor import Rng

DIRAC_SHAPE = (4, 8, 8, 1)


def dirac_target(seed: int) -> np.ndarray:
    return np.tanh(Rng(seed + 101).normal(DIRAC_SHAPE[1:]))


def gaussian_prior_moments(mu: float, s: float, sigma_max: float) -> tuple[float, float]:
    """Moments of the exact probability-flow map started from N(0, sigma_max^2)
    instead of the true marginal N(mu, s^2 + sigma_max^2). The flow is
    affine: x0 = mu + (x_T - mu) * s / sqrt(s^2 + sigma_max^2)."""
    k = s / np.sqrt(s * s + sigma_max * sigma_max)
    return mu * (1.0 - k), (k * sigma_max) ** 2


def run_oracles(seed: int = 0, draws: int = 10_000, mu: float = 0.5, s: float = 0.3,
                sde_beta: float = 0.1) -> dict:
    checks = {}
    x0 = dirac_target(seed)
    out = sample(dirac_eps(x0), DIRAC_SHAPE, VE, SamplerConfig("heun_ode", 40, seed=seed))
    err = float(np.abs(out - x0).max())
    checks["dirac_heun_40"] = {"max_abs_error": err, "tol": 1e-3, "passed": err <= 1e-3}

    out = sample(dirac_eps(x0), DIRAC_SHAPE, VP, SamplerConfig("ddpm", 250, seed=seed))
    err = float(np.abs(out - x0).max())
    checks["dirac_ddpm_250"] = {"max_abs_error": err, "tol": 5e-2, "passed": err <= 5e-2}

    m_ref, v_ref = gaussian_prior_moments(mu, s, VE.sigma_max)
    shape = (draws, 1, 1, 1)
    for name, cfg in (("gaussian_heun_40", SamplerConfig("heun_ode", 40, seed=seed)),
                      ("gaussian_sde_200", SamplerConfig("sde", 200, seed=seed, beta=sde_beta))):
        x = sample(gaussian_eps(mu, s), shape, VE, cfg).reshape(-1)
        se_m = np.sqrt(v_ref / draws)
        se_v = v_ref * np.sqrt(2.0 / (draws - 1))
        zm = abs(x.mean() - m_ref) / se_m
        zv = abs(x.var(ddof=1) - v_ref) / se_v
        checks[name] = {"mean": float(x.mean()), "mean_ref": m_ref, "var": float(x.var(ddof=1)), "var_ref": v_ref,
                        "z_mean": float(zm), "z_var": float(zv), "passed": bool(zm <= 3 and zv <= 3)}

    rng_shape = (64, 4, 4, 1)
    eps = gaussian_eps(mu, s)
    a = sample(eps, rng_shape, VE, SamplerConfig("euler_ode", 30, seed=seed))
    b = sample(eps, rng_shape, VE, SamplerConfig("sde", 30, seed=seed, beta=0.0))
    checks["sde_beta0_equals_euler"] = {"bitwise_equal": bool(np.array_equal(a, b)),
                                        "passed": bool(np.array_equal(a, b))}
    return {"checks": checks, "passed": all(c["passed"] for c in checks.values())}
