"""Numerical verification of the contrastive similarity/continuity bounds.

Two disciplines, kept separate on purpose:
  * the batch-mean similarity bound follows rigorously from averaging the
    per-term inequality in the contrastive loss, so it is asserted;
  * the per-sample form and the Lipschitz latent-step inequality carry extra
    assumptions (uniform per-item losses, an absorbed discretization
    constant), so they are reported but never asserted.

A negative right-hand side in the distance chain cannot be violated by a
squared distance; those cases are flagged vacuous instead of failed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .agcore import AgConfig, encode_posterior, infonce, latent_update, vjp_drift
from .autodiff import Tensor, no_grad
from .diffusion import NoiseSchedule, denoise_step
from .nn import PolicyNets
from .util import rng_from


@dataclass
class BoundReport:
    """One checked inequality: measured quantity vs. bound."""

    name: str
    batch_size: int
    tau: float
    alpha: float
    bound: float
    measured: float
    direction: str  # "ge": measured >= bound; "le": measured <= bound
    satisfied: bool
    margin: float
    vacuous: bool = False
    asserted: bool = True
    note: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _report(name, B, tau, alpha, bound, measured, direction, vacuous=False,
            asserted=True, note="") -> BoundReport:
    if vacuous:
        satisfied = True
        margin = float("nan")
    elif direction == "ge":
        satisfied = bool(measured >= bound)
        margin = measured - bound
    else:
        satisfied = bool(measured <= bound)
        margin = bound - measured
    return BoundReport(name, int(B), float(tau), float(alpha), float(bound),
                       float(measured), direction, satisfied, float(margin),
                       bool(vacuous), bool(asserted), note)


def unit_rows_np(x: np.ndarray) -> np.ndarray:
    """Exact unit normalization (zero rows pass through unchanged)."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def lemma1_bound(B: int, tau: float, alpha: float) -> float:
    """Similarity lower bound tau * (ln(B-1) - alpha) - 1."""
    if B < 2:
        raise ValueError("lemma1_bound: B must be >= 2")
    if tau <= 0:
        raise ValueError("lemma1_bound: tau must be > 0")
    return tau * (np.log(B - 1.0) - alpha) - 1.0


def verify_mean_similarity_bound(eps_static: np.ndarray, eps_evolved: np.ndarray,
                                 tau: float) -> BoundReport:
    """Mean positive-pair similarity against the measured-loss bound.

    Averaging the per-term inequality over the batch needs no uniformity
    assumption, so this report is assertable for any batch of vectors. The
    per-sample minimum rides along in the note, unasserted.
    """
    a = np.asarray(eps_static, dtype=np.float64)
    b = np.asarray(eps_evolved, dtype=np.float64)
    B = a.shape[0]
    alpha = infonce(Tensor(a), Tensor(b), tau).item()
    bound = lemma1_bound(B, tau, alpha)
    pos_sims = np.sum(unit_rows_np(a) * unit_rows_np(b), axis=1)
    per_sample_ok = bool(pos_sims.min() >= bound)
    return _report(
        "mean_positive_similarity", B, tau, alpha, bound, float(pos_sims.mean()), "ge",
        note=f"per-sample min {pos_sims.min():.6f} (bound holds per-sample: {per_sample_ok}; not asserted)",
    )


def cosine_distance_identity_check(u: np.ndarray, v: np.ndarray) -> float:
    """| ||u - v||^2 - 2 (1 - sim(u, v)) | for unit vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    for name, w in (("u", u), ("v", v)):
        if abs(np.linalg.norm(w) - 1.0) > 1e-9:
            raise ValueError(f"cosine_distance_identity_check: {name} is not unit length")
    lhs = float(np.sum((u - v) ** 2))
    rhs = 2.0 * (1.0 - float(u @ v))
    return abs(lhs - rhs)


def estimate_lipschitz(eps_theta, a_k, k: int, z_samples: np.ndarray,
                       radius: float = 0.5) -> float:
    """Empirical lower estimate of the latent Lipschitz constant.

    Max over sample pairs within `radius` of the unit-normalized output
    difference divided by the latent distance. Degenerate pairs are skipped.
    """
    zs = np.asarray(z_samples, dtype=np.float64)
    if zs.shape[0] < 2:
        raise ValueError("estimate_lipschitz: need at least 2 latent samples")
    with no_grad():
        outs = np.stack([
            unit_rows_np(np.atleast_1d(eps_theta(a_k, Tensor(z), k).data)) for z in zs
        ])
    best = 0.0
    for i in range(zs.shape[0]):
        dz = np.linalg.norm(zs[i + 1:] - zs[i], axis=1)
        dout = np.linalg.norm(outs[i + 1:] - outs[i], axis=1)
        ok = (dz > 1e-12) & (dz <= radius)
        if np.any(ok):
            best = max(best, float(np.max(dout[ok] / dz[ok])))
    return best


def evolved_latent_trace(model: PolicyNets, obs_batch: np.ndarray, cfg: AgConfig,
                         sched: NoiseSchedule, seed: int) -> dict:
    """Denoising rollout recording the evolved latent and both predictions per step.

    Static latents are the posterior means; at each step k the drift is the
    noise predictor's VJP at the static latent, the evolved latent follows
    the usual update, and the rollout itself is driven by the static-latent
    prediction.
    """
    B = obs_batch.shape[0]
    with no_grad():
        post = encode_posterior(model.encoder, model.heads, obs_batch)
    mu = post.mu.data
    log_var = post.log_var.data
    z = mu
    D = model.horizon * model.action_dim
    rng = rng_from(seed, 0x7E0)
    a = rng.standard_normal((B, D))
    steps = []
    for k in range(sched.K, 0, -1):
        a_t = Tensor(a)
        ks = np.full(B, k, dtype=np.int64)
        with no_grad():
            eps_static = model.eps(a_t, Tensor(z), ks).data
        drift = vjp_drift(model.eps, a_t, Tensor(z), ks).data
        sigma = np.exp(0.5 * log_var)
        z_tilde = mu + cfg.gamma * sigma * drift
        with no_grad():
            eps_evolved = model.eps(a_t, Tensor(z_tilde), ks).data
        steps.append({"k": k, "a": a.copy(), "z_tilde": z_tilde,
                      "eps_static": eps_static, "eps_evolved": eps_evolved})
        noise = rng.standard_normal((B, D)) if k > 1 else None
        a = np.clip(denoise_step(a, eps_static, k, sched, noise), -1.0, 1.0)
    return {"steps": steps, "mu": mu, "log_var": log_var}


def verify_continuity_bound(model: PolicyNets, obs_batch: np.ndarray, cfg: AgConfig,
                            sched: NoiseSchedule, seed: int = 0,
                            lipschitz_radius: float = 0.5) -> dict:
    """Check the distance chain along an evolved-latent denoising trace.

    Returns per-step reports for the (rigorous) distance bound, a summary
    report, the descriptive Lipschitz latent-step report, and the worst
    cosine-identity residual seen along the trace.
    """
    B = obs_batch.shape[0]
    if B < 2:
        raise ValueError("verify_continuity_bound: need a batch of >= 2")
    trace = evolved_latent_trace(model, obs_batch, cfg, sched, seed)
    steps = trace["steps"]
    tau = cfg.tau

    per_step: list[BoundReport] = []
    worst_identity = 0.0
    max_latent_step = 0.0
    paired_distance = 0.0
    for idx, step in enumerate(steps):
        ua = unit_rows_np(step["eps_static"])
        ub = unit_rows_np(step["eps_evolved"])
        dist2 = np.sum((ua - ub) ** 2, axis=1)
        sims = np.sum(ua * ub, axis=1)
        worst_identity = max(worst_identity, float(np.max(np.abs(dist2 - 2 * (1 - sims)))))
        alpha = infonce(Tensor(step["eps_static"]), Tensor(step["eps_evolved"]), tau).item()
        rhs = 2.0 * (2.0 - tau * np.log(B - 1.0) + tau * alpha)
        vacuous = rhs < 0.0
        per_step.append(_report(
            f"distance_chain_k{step['k']}", B, tau, alpha, rhs, float(dist2.mean()), "le",
            vacuous=vacuous, note="vacuous-negative right side" if vacuous else "",
        ))
        if idx + 1 < len(steps):
            dz2 = np.sum((steps[idx + 1]["z_tilde"] - step["z_tilde"]) ** 2, axis=1)
            max_latent_step = max(max_latent_step, float(dz2.max()))
            paired_distance = max(paired_distance, float(dist2.mean()))

    checked = [r for r in per_step if not r.vacuous]
    if checked:
        worst = min(checked, key=lambda r: r.margin)
        summary = _report("distance_chain_summary", B, tau, worst.alpha, worst.bound,
                          worst.measured, "le",
                          note=f"{len(checked)} steps checked, {len(per_step) - len(checked)} vacuous")
    else:
        summary = _report("distance_chain_summary", B, tau, float("nan"), float("nan"),
                          float("nan"), "le", vacuous=True,
                          note="all steps vacuous-negative")

    jitter = rng_from(seed, 0x11).standard_normal((16, trace["mu"].shape[1]))
    z_points = np.concatenate(
        [trace["mu"]] + [s["z_tilde"] for s in steps[:8]]
        + [trace["mu"][0] + 0.3 * lipschitz_radius * jitter], axis=0)
    mid = steps[len(steps) // 2]
    L_hat = estimate_lipschitz(model.eps, Tensor(mid["a"][0]), mid["k"],
                               z_points, radius=lipschitz_radius)
    lipschitz_report = _report(
        "latent_step_vs_lipschitz", B, tau, float("nan"),
        L_hat * L_hat * paired_distance, max_latent_step, "le", asserted=False,
        note="step-size normalization absorbed into the Lipschitz constant; descriptive only",
    )

    return {
        "per_step": per_step,
        "summary": summary,
        "lipschitz": lipschitz_report,
        "lipschitz_estimate": L_hat,
        "max_identity_residual": worst_identity,
        "max_latent_step_sq": max_latent_step,
    }
