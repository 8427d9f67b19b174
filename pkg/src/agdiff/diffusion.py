"""DDPM machinery: noise schedule, forward noising, ancestral denoising.

Sampling uses the same step count at train and inference and clips each
intermediate action prediction to [-1, 1]; `denoise_step` itself is pure
posterior-mean algebra so oracle round-trip checks stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, tsum
from .util import rng_from


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha tables, 1-indexed by diffusion step k in 1..K."""

    K: int
    beta: np.ndarray       # beta[k-1] for step k
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # cumulative product of alpha

    def bar(self, k) -> np.ndarray:
        """alpha_bar at step k with the k=0 extension alpha_bar(0)=1."""
        ks = np.asarray(k)
        out = np.where(ks > 0, self.alpha_bar[np.maximum(ks, 1) - 1], 1.0)
        return out if out.ndim else float(out)


def make_schedule(K: int, kind: str = "cosine", beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Build a schedule whose alpha_bar decreases strictly to below 0.05."""
    if K < 1:
        raise ValueError(f"make_schedule: K must be >= 1, got {K}")
    if kind == "linear":
        if beta_end is None:
            beta_end = min(0.96, 6.0 / K)
        if beta_start is None:
            beta_start = 0.1 * beta_end
        beta = np.full(1, beta_end) if K == 1 else np.linspace(beta_start, beta_end, K)
    elif kind == "cosine":
        # squared-cosine alpha_bar with the usual small offset, beta clipped
        s = 0.008
        ks = np.arange(K + 1, dtype=np.float64)
        f = np.cos((ks / K + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar_raw = f / f[0]
        beta = 1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]
        beta = np.clip(beta, 1e-8, 0.999)
    else:
        raise ValueError(f"make_schedule: unknown kind {kind!r}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("make_schedule: betas must lie strictly in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(K=K, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_k(k: int, sched: NoiseSchedule) -> int:
    k = int(k)
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step k={k} outside 1..{sched.K}")
    return k


def forward_noise(a0, k, eps, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_k) * a0 + sqrt(1 - abar_k) * eps; k may be a per-row array."""
    a0 = _as_array(a0)
    eps = _as_array(eps)
    if eps.shape != a0.shape:
        raise ValueError(f"forward_noise: eps shape {eps.shape} != a0 shape {a0.shape}")
    ks = np.asarray(k)
    if ks.ndim == 0:
        _check_k(int(ks), sched)
        abar = sched.alpha_bar[int(ks) - 1]
    else:
        if np.any(ks < 1) or np.any(ks > sched.K):
            raise ValueError(f"forward_noise: some k outside 1..{sched.K}")
        abar = sched.alpha_bar[ks - 1][:, None]
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def denoise_step(a_k, eps_hat, k: int, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """One DDPM posterior-mean step from a_k to a_{k-1}.

    sigma_k^2 = beta_k * (1 - abar_{k-1}) / (1 - abar_k); sigma_1 is zero so
    the sampler noise is ignored on the final step.
    """
    k = _check_k(k, sched)
    a_k = _as_array(a_k)
    eps_hat = _as_array(eps_hat)
    beta = sched.beta[k - 1]
    alpha = sched.alpha[k - 1]
    abar = sched.alpha_bar[k - 1]
    abar_prev = sched.bar(k - 1)
    mean = (a_k - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if k == 1 or noise is None:
        return mean
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    return mean + sigma * _as_array(noise)


def sample_actions(eps_theta, latent, sched: NoiseSchedule, seed: int, action_len: int,
                   clip_range: tuple[float, float] | None = (-1.0, 1.0)) -> np.ndarray:
    """Ancestral sampling from white noise, conditioned on a fixed latent.

    `eps_theta(a_k, latent, k)` must return the noise estimate as an array or
    Tensor. Deterministic given the seed. Each intermediate prediction is
    clipped to `clip_range` (disable only for statistical calibration tests).
    """
    rng = rng_from(seed, 0xD1F)
    a = rng.standard_normal(action_len)
    latent = _as_array(latent)
    for k in range(sched.K, 0, -1):
        eps_hat = _as_array(eps_theta(a, latent, k))
        noise = rng.standard_normal(action_len) if k > 1 else None
        a = denoise_step(a, eps_hat, k, sched, noise)
        if clip_range is not None:
            a = np.clip(a, clip_range[0], clip_range[1])
    return a


def dp_loss(eps_theta, a0_batch, latents, sched: NoiseSchedule, seed: int) -> Tensor:
    """Noise-matching objective: mean over the batch of ||eps_hat - eps||^2.

    Draws (k, eps) per item from seed-derived per-item streams, noises the
    clean actions, and evaluates `eps_theta` once on the whole batch.
    Differentiable through `eps_theta`'s Tensor output.
    """
    a0 = _as_array(a0_batch)
    if a0.ndim != 2 or a0.shape[0] == 0:
        raise ValueError("dp_loss: batch must be a nonempty (B, action_len) array")
    B, D = a0.shape
    ks = np.empty(B, dtype=np.int64)
    eps = np.empty((B, D))
    for i in range(B):
        rng = rng_from(seed, i)
        ks[i] = rng.integers(1, sched.K + 1)
        eps[i] = rng.standard_normal(D)
    a_k = forward_noise(a0, ks, eps, sched)
    pred = eps_theta(Tensor(a_k), latents, ks)
    diff = pred - Tensor(eps)
    return tsum(diff * diff, axis=1).mean()
