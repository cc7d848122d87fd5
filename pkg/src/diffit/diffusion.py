"""Noise schedules, the denoising objective and samplers.

All samplers work on an ``eps_fn(x, sigma) -> eps`` callable in
variance-exploding coordinates (``x = z0 + sigma * eps``). A VP-trained
network is adapted by feeding it ``x * alpha(sigma)`` with
``alpha = 1/sqrt(1 + sigma^2)``, so any network can be driven by any sampler
and closed-form oracle denoisers plug in directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Rng, Tensor, add, mean, mul, sub, sum_
from .tensor.core import ContractError, NumericError

EpsFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """VE: ``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t`` on t in [0, 1].
    VP: linear beta over ``num_steps`` discrete steps; ``sigma_t = s_t / alpha_t``.

    ``beta_sde`` is the default sampler stochasticity (0 = probability-flow ODE).
    """

    kind: str = "VE"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weighting: Optional[str] = None
    beta_sde: float = 0.0
    preconditioning: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("VE", "VP"):
            raise ContractError(f"schedule kind must be VE or VP, got {self.kind!r}")
        if self.weighting is None:
            object.__setattr__(self, "weighting", "edm" if self.kind == "VE" else "uniform")
        if self.weighting not in ("edm", "uniform"):
            raise ContractError(f"unknown loss weighting {self.weighting!r}")
        if self.preconditioning is None:
            object.__setattr__(self, "preconditioning", "edm" if self.kind == "VE" else "none")
        if self.preconditioning not in ("edm", "none"):
            raise ContractError(f"unknown preconditioning {self.preconditioning!r}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ContractError("need 0 < sigma_min < sigma_max")

    # -- VP tables
    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=np.float64)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    @property
    def vp_sigmas(self) -> np.ndarray:
        ab = self.alphas_cumprod
        return np.sqrt((1.0 - ab) / ab)

    # -- schedule functions
    @property
    def t_range(self) -> tuple[float, float]:
        return (0.0, 1.0) if self.kind == "VE" else (0.0, float(self.num_steps - 1))

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.t_range
        if np.any(t < lo) or np.any(t > hi) or not np.all(np.isfinite(t)):
            raise ContractError(f"time {t} outside schedule range [{lo}, {hi}]")
        return t

    def sigma(self, t) -> np.ndarray:
        t = self._check_t(t)
        if self.kind == "VE":
            return self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        return np.interp(t, np.arange(self.num_steps), self.vp_sigmas)

    def alpha(self, t) -> np.ndarray:
        t = self._check_t(t)
        if self.kind == "VE":
            return np.ones_like(t)
        return 1.0 / np.sqrt(1.0 + self.sigma(t) ** 2)

    def noise_std(self, t) -> np.ndarray:
        """s_t: std of the noise term in the schedule's own coordinates."""
        return self.sigma(t) * self.alpha(t)

    @property
    def sigma_range(self) -> tuple[float, float]:
        if self.kind == "VE":
            return self.sigma_min, self.sigma_max
        s = self.vp_sigmas
        return float(s[0]), float(s[-1])

    def time_label(self, sigma) -> np.ndarray:
        """Scalar fed to the time embedding: 1000 * t for VE, the (fractional)
        step index for VP. Both span roughly [0, 1000]."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind == "VE":
            return 1000.0 * np.log(sigma / self.sigma_min) / np.log(self.sigma_max / self.sigma_min)
        return np.interp(np.log(sigma), np.log(self.vp_sigmas), np.arange(self.num_steps, dtype=np.float64))

    def input_scale(self, sigma) -> np.ndarray:
        """Multiplier applied to VE-coordinate inputs before the network."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind == "VE":
            return 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)
        return 1.0 / np.sqrt(1.0 + sigma**2)

    def eps_coeffs(self, sigma) -> tuple[np.ndarray, np.ndarray]:
        """(a, b) with eps_theta = a * x + b * F, F the raw network output and
        x the VE-coordinate input.

        'edm' is eps = (x - D) / sigma for the EDM-preconditioned denoiser
        D = c_skip x - c_out F. Without it a pure eps-predictor must resolve
        eps to O(1/sigma) at large sigma, and its error is amplified by sigma
        in the implied x0. 'none' is the raw eps-prediction.
        """
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.preconditioning == "none":
            return np.zeros_like(sigma), np.ones_like(sigma)
        sd2 = self.sigma_data**2
        return sigma / (sigma**2 + sd2), self.sigma_data / np.sqrt(sigma**2 + sd2)

    def loss_weight(self, sigma) -> np.ndarray:
        """lambda for the epsilon objective. 'edm' matches EDM's unit-weight loss
        on the denoised output: (sigma^2 + sigma_data^2) / sigma_data^2."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.weighting == "uniform":
            return np.ones_like(sigma)
        return (sigma**2 + self.sigma_data**2) / self.sigma_data**2

    def sample_training_sigma(self, rng: Rng, n: int) -> np.ndarray:
        """VE: log-normal(p_mean, p_std) clipped to the schedule range.
        VP: uniform discrete step."""
        if self.kind == "VE":
            s = np.exp(self.p_mean + self.p_std * rng.normal(n))
            return np.clip(s, self.sigma_min, self.sigma_max)
        return self.vp_sigmas[rng.integers(self.num_steps, n)]

    def edm_grid(self, steps: int) -> np.ndarray:
        """``steps`` sigmas from sigma_max to sigma_min (rho spacing) plus a final 0."""
        if steps < 1:
            raise ContractError("need at least one step")
        smin, smax = self.sigma_range
        i = np.arange(steps, dtype=np.float64)
        inv = 1.0 / self.rho
        denom = max(steps - 1, 1)
        grid = (smax**inv + i / denom * (smin**inv - smax**inv)) ** self.rho
        return np.append(grid, 0.0)


VE = NoiseSchedule("VE")
VP = NoiseSchedule("VP")


# ---------------------------------------------------------------------------
# forward process / objective


def add_noise(z0, t, eps, schedule: NoiseSchedule, sigma=None) -> np.ndarray:
    """VE: ``z0 + sigma_t eps``; VP: ``alpha_t z0 + s_t eps`` with alpha^2 + s^2 = 1.

    ``sigma`` overrides ``t`` (VE only), e.g. ``sigma=0``.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ContractError(f"add_noise: z0 {z0.shape} vs eps {eps.shape}")
    if sigma is not None:
        if schedule.kind != "VE":
            raise ContractError("sigma override is only defined for VE schedules")
        return z0 + _bcast(sigma, z0) * eps
    if schedule.kind == "VE":
        return z0 + _bcast(schedule.sigma(t), z0) * eps
    return _bcast(schedule.alpha(t), z0) * z0 + _bcast(schedule.noise_std(t), z0) * eps


def _bcast(v, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def score_from_eps(eps, sigma):
    """s(z, t) = -eps / sigma_t."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("score_from_eps needs sigma > 0")
    return -np.asarray(eps) / sigma


@dataclass
class DsmDraw:
    sigma: np.ndarray  # (b,)
    eps: np.ndarray  # like z0
    x: np.ndarray  # VE-coordinate noisy sample z0 + sigma * eps
    weight: np.ndarray  # (b,)


def dsm_draw(z0: np.ndarray, schedule: NoiseSchedule, rng: Rng) -> DsmDraw:
    """Draw t ~ p(t) and eps ~ N(0, I) for one batch (noise first, then sigma)."""
    b = z0.shape[0]
    eps = rng.normal(z0.shape)
    sigma = schedule.sample_training_sigma(rng, b)
    x = z0 + _bcast(sigma, z0) * eps
    return DsmDraw(sigma, eps, x, schedule.loss_weight(sigma))


def dsm_objective(eps_pred, draw: DsmDraw) -> Tensor:
    """mean over batch of lambda * ||eps - eps_pred||^2."""
    pred = eps_pred if isinstance(eps_pred, Tensor) else Tensor(np.asarray(eps_pred, dtype=np.float64))
    target = Tensor(draw.eps.astype(pred.dtype))
    diff = sub(pred, target)
    per = sum_(mul(diff, diff), axis=tuple(range(1, pred.ndim)))
    loss = mean(mul(per, Tensor(draw.weight.astype(pred.dtype))))
    if not np.isfinite(loss.data).all():
        raise NumericError("dsm_loss: non-finite loss")
    return loss


def network_inputs(draw_x: np.ndarray, sigma: np.ndarray, schedule: NoiseSchedule, dtype) -> tuple[Tensor, np.ndarray]:
    x_in = draw_x * _bcast(schedule.input_scale(sigma), draw_x)
    return Tensor(x_in.astype(dtype)), schedule.time_label(sigma)


def eps_from_output(out, x: np.ndarray, sigma, schedule: NoiseSchedule):
    """Map raw network output ``out`` (Tensor or array) to eps_theta."""
    a, b = schedule.eps_coeffs(sigma)
    if schedule.preconditioning == "none":
        return out
    if isinstance(out, Tensor):
        skip = Tensor((_bcast(a, x) * x).astype(out.dtype))
        return add(mul(out, Tensor(_bcast(b, x).astype(out.dtype))), skip)
    return _bcast(a, x) * x + _bcast(b, x) * out


def dsm_loss(network, z0, schedule: NoiseSchedule, rng: Rng, labels=None) -> Tensor:
    """Denoising score-matching loss for one batch ``z0`` (b, H, W, C).

    ``labels`` (conditional nets) are replaced by the null label with the
    network's ``label_drop`` probability.
    """
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64)
    draw = dsm_draw(z0, schedule, rng)
    dtype = network.parameters()[0].dtype
    x_in, t = network_inputs(draw.x, draw.sigma, schedule, dtype)
    if labels is not None and network.num_classes:
        labels = np.asarray(labels, dtype=np.int64).copy()
        drop = rng.uniform(labels.shape[0]) < network.config.label_drop
        labels[drop] = network.num_classes
    return dsm_objective(eps_from_output(network(x_in, t, labels), draw.x, draw.sigma, schedule), draw)


# ---------------------------------------------------------------------------
# guidance / network adapters


def guided_eps(eps_cond, eps_uncond, scale: float, channel_mask=None) -> np.ndarray:
    """eps_u + g (eps_c - eps_u) on masked channels (last axis), eps_c elsewhere."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(f"guided_eps: shapes {eps_cond.shape} vs {eps_uncond.shape}")
    guided = eps_uncond + scale * (eps_cond - eps_uncond)
    if channel_mask is None:
        return guided
    mask = np.asarray(channel_mask, dtype=bool)
    if mask.shape != (eps_cond.shape[-1],):
        raise ContractError(f"guided_eps: mask length {mask.shape} vs channels {eps_cond.shape[-1]}")
    return np.where(mask, guided, eps_cond)


def network_eps_fn(network, schedule: NoiseSchedule, label=None, guidance_scale: float = 1.0,
                   channel_mask=None) -> EpsFn:
    """Wrap a denoising network as ``eps_fn(x, sigma)`` in VE coordinates."""
    dtype = network.parameters()[0].dtype
    guided = label is not None and guidance_scale != 1.0

    def eps_fn(x: np.ndarray, sigma: float) -> np.ndarray:
        b = x.shape[0]
        x_in = Tensor((x * schedule.input_scale(sigma)).astype(dtype))
        t = np.full(b, float(schedule.time_label(sigma)))
        sig = np.full(b, float(sigma))
        eps_c = eps_from_output(network(x_in, t, label).data.astype(np.float64), x, sig, schedule)
        if not guided:
            return eps_c
        out_u = network(x_in, t, np.full(b, network.num_classes)).data.astype(np.float64)
        eps_u = eps_from_output(out_u, x, sig, schedule)
        return guided_eps(eps_c, eps_u, guidance_scale, channel_mask)

    return eps_fn


# ---------------------------------------------------------------------------
# samplers


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "heun_ode"
    steps: int = 18
    guidance_scale: float = 1.0
    guidance_mask: Optional[tuple] = None
    seed: int = 0
    beta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("heun_ode", "euler_ode", "ddpm", "sde"):
            raise ContractError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1 or self.guidance_scale < 0:
            raise ContractError("steps must be >= 1 and guidance scale >= 0")


StepHook = Optional[Callable[[int, float], None]]


def sample_heun(eps_fn: EpsFn, shape, schedule: NoiseSchedule, config: SamplerConfig,
                on_step: StepHook = None) -> np.ndarray:
    """Deterministic 2nd-order Heun integration of dx/dsigma = eps(x, sigma)
    over the EDM grid, Euler on the last step to sigma = 0."""
    if config.steps < 2:
        raise ContractError("Heun sampler needs at least 2 steps")
    grid = schedule.edm_grid(config.steps)
    x = Rng(config.seed).normal(tuple(shape)) * grid[0]
    for i in range(config.steps):
        s_cur, s_next = grid[i], grid[i + 1]
        if on_step:
            on_step(i, s_cur)
        d = eps_fn(x, s_cur)
        x_next = x + (s_next - s_cur) * d
        if s_next > 0:
            d2 = eps_fn(x_next, s_next)
            x_next = x + (s_next - s_cur) * (0.5 * d + 0.5 * d2)
        x = x_next
    return x


def sample_euler(eps_fn: EpsFn, shape, schedule: NoiseSchedule, config: SamplerConfig,
                 on_step: StepHook = None) -> np.ndarray:
    """First-order probability-flow ODE integration on the EDM grid."""
    grid = schedule.edm_grid(config.steps)
    x = Rng(config.seed).normal(tuple(shape)) * grid[0]
    for i in range(config.steps):
        if on_step:
            on_step(i, grid[i])
        dt = grid[i + 1] - grid[i]
        x = x + dt * eps_fn(x, grid[i])
    return x


def sample_sde(eps_fn: EpsFn, shape, schedule: NoiseSchedule, config: SamplerConfig,
               on_step: StepHook = None) -> np.ndarray:
    """Euler-Maruyama for the reverse SDE in sigma-time with Langevin rate
    ``beta_t = beta / sigma`` (``beta`` dimensionless)::

        dx = (1 + beta) eps dsigma + sqrt(2 beta sigma) dw

    This keeps every noise-level marginal invariant for the exact eps and is
    stable whenever ``(1 + beta) |dsigma| / sigma < 2`` on the grid. The step
    into sigma = 0 adds no noise. ``beta = 0`` reproduces :func:`sample_euler`
    bit for bit.
    """
    if config.steps < 2:
        raise ContractError("SDE sampler needs at least 2 steps")
    beta = schedule.beta_sde if config.beta is None else config.beta
    if beta < 0:
        raise ContractError("beta must be >= 0")
    grid = schedule.edm_grid(config.steps)
    rng = Rng(config.seed)
    x = rng.normal(tuple(shape)) * grid[0]
    for i in range(config.steps):
        s = grid[i]
        if on_step:
            on_step(i, s)
        dt = grid[i + 1] - s
        x = x + ((1.0 + beta) * dt) * eps_fn(x, s)
        if beta > 0 and grid[i + 1] > 0:
            x = x + np.sqrt(2.0 * beta * s * -dt) * rng.normal(x.shape)
    return x


def ddpm_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    T = schedule.num_steps
    if steps < 1 or T % steps:
        raise ContractError(f"DDPM steps {steps} must divide the {T} training steps")
    return np.arange(0, T, T // steps)


def sample_ddpm(eps_fn: EpsFn, shape, schedule: NoiseSchedule, config: SamplerConfig,
                on_step: StepHook = None, clip: Optional[float] = None) -> np.ndarray:
    """Ancestral sampling over a strided step subsequence with the fixed
    posterior variance beta_tilde; the last transition is noise-free.
    Returns the t = 0 estimate (data coordinates)."""
    if schedule.kind != "VP":
        raise ContractError("DDPM sampling needs a VP schedule")
    ts = ddpm_timesteps(schedule, config.steps)
    ab_all = schedule.alphas_cumprod
    rng = Rng(config.seed)
    z = rng.normal(tuple(shape))
    for k, i in enumerate(reversed(range(len(ts)))):
        t = ts[i]
        ab = ab_all[t]
        ab_prev = ab_all[ts[i - 1]] if i > 0 else 1.0
        sigma = np.sqrt((1.0 - ab) / ab)
        if on_step:
            on_step(k, sigma)
        eps = eps_fn(z / np.sqrt(ab), sigma)
        x0 = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
        if i == 0:
            z = x0
            break
        beta_t = 1.0 - ab / ab_prev
        c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab)
        ct = np.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab)
        var = beta_t * (1.0 - ab_prev) / (1.0 - ab)
        z = c0 * x0 + ct * z + np.sqrt(var) * rng.normal(z.shape)
    return z


SAMPLERS = {"heun_ode": sample_heun, "euler_ode": sample_euler, "sde": sample_sde, "ddpm": sample_ddpm}


def sample(eps_fn: EpsFn, shape, schedule: NoiseSchedule, config: SamplerConfig, on_step: StepHook = None):
    return SAMPLERS[config.kind](eps_fn, shape, schedule, config, on_step=on_step)


def sample_network(network, n: int, schedule: NoiseSchedule, config: SamplerConfig, label=None,
                   on_step: StepHook = None) -> np.ndarray:
    c = network.config
    chans = c.in_channels if c.family == "image" else c.channels
    shape = (n, c.resolution, c.resolution, chans)
    mask = np.asarray(config.guidance_mask, dtype=bool) if config.guidance_mask is not None else None
    fn = network_eps_fn(network, schedule, label, config.guidance_scale, mask)
    return sample(fn, shape, schedule, config, on_step)


# ---------------------------------------------------------------------------
# closed-form oracle denoisers


def dirac_eps(x0: np.ndarray) -> EpsFn:
    """Optimal eps for data concentrated at ``x0``: (x - x0) / sigma."""
    x0 = np.asarray(x0, dtype=np.float64)
    return lambda x, sigma: (x - x0) / sigma


def gaussian_eps(mu, s: float) -> EpsFn:
    """Optimal eps for data N(mu, s^2 I): sigma (x - mu) / (s^2 + sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    return lambda x, sigma: sigma * (x - mu) / (s * s + sigma * sigma)
