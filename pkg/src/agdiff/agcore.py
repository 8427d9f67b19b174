"""Action-guided core: variational posterior, VJP-evolved latents, the
cycle-consistent contrastive loss, the closed-form KL, and the training step
that wires them together.

The latent evolves as z_tilde = mu + gamma * sigma (.) drift, where the drift
is the noise predictor's vector-Jacobian product against its own output,
taken at the static latent and detached from the parameter graph. Gradients
therefore reach the drift path only through mu and sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import Tensor, backward, forward, no_grad, norm, transpose, tsum
from .diffusion import NoiseSchedule, forward_noise, sample_actions
from .nn import Mlp, PolicyNets, PosteriorHeads
from .util import rng_from

_NORM_EPS = 1e-12


@dataclass
class LatentPosterior:
    """Gaussian over the latent: mean and log variance, each (d,) or (B, d)."""

    mu: Tensor
    log_var: Tensor

    def sigma(self) -> Tensor:
        return (0.5 * self.log_var).exp()


@dataclass
class AgConfig:
    """Training knobs; every key is mirrored as a CLI flag."""

    gamma: float = 1.0
    tau: float = 0.8
    lambda_cont: float = 1.0
    lambda_kl: float = 1.0
    lambda_lh: float = 0.0     # likelihood term (ablation); 0 disables
    diffusion_steps: int = 100
    schedule: str = "cosine"
    horizon: int = 8
    action_exec: int = 4
    latent_dim: int = 32
    learning_rate: float = 1e-4
    batch_size: int = 64
    train_steps: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("config: tau must be > 0")
        if self.gamma < 0 or self.lambda_cont < 0 or self.lambda_kl < 0 or self.lambda_lh < 0:
            raise ValueError("config: gamma and loss weights must be >= 0")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def save_config(path, cfg: AgConfig) -> None:
    with open(path, "w") as f:
        for key, value in cfg.as_dict().items():
            f.write(f"{key}={value}\n")


def load_config(path, overrides: dict | None = None) -> AgConfig:
    """Parse key=value lines; `overrides` (e.g. CLI flags) win over the file."""
    values: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config {path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    types = {f.name: f.type for f in fields(AgConfig)}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"config: unknown key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        except ValueError as e:
            raise ValueError(f"config: bad value for {key!r}: {raw!r}") from e
    return AgConfig(**kwargs)


# -- posterior / latent evolution -------------------------------------------


def encode_posterior(encoder: Mlp, heads: PosteriorHeads, obs) -> LatentPosterior:
    """Encoder features through the two linear heads."""
    obs_t = obs if isinstance(obs, Tensor) else Tensor(obs)
    feat = encoder(obs_t)
    mu, log_var = heads(feat)
    return LatentPosterior(mu=mu, log_var=log_var)


def reparameterize(post: LatentPosterior, eps) -> Tensor:
    """z = mu + sigma (.) eps."""
    eps_t = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps_t.shape != post.mu.shape:
        raise ValueError(f"reparameterize: eps shape {eps_t.shape} != mu shape {post.mu.shape}")
    return post.mu + post.sigma() * eps_t


def vjp_drift(eps_theta, a_k, z, k) -> Tensor:
    """(d eps_theta / d z)^T . eps_theta, detached from any parameter graph.

    Equals the gradient of 0.5 * ||eps_theta(a, z, k)||^2 with respect to z.
    Works for a single latent (d,) or a batch (B, d); batch rows decouple, so
    one backward pass yields every per-item product.
    """
    z_data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    leaf = Tensor(z_data.copy(), requires_grad=True)
    out, tape = forward(lambda t: eps_theta(a_k, t, k), leaf)
    grads = backward(tape, out.data)
    g = grads.get(leaf)
    return Tensor(np.zeros_like(z_data) if g is None else g)


def latent_update(post: LatentPosterior, drift, gamma: float) -> Tensor:
    """z_tilde = mu + gamma * sigma (.) drift; gamma=0 reduces to the static mu."""
    drift_t = drift if isinstance(drift, Tensor) else Tensor(drift)
    if drift_t.shape != post.mu.shape:
        raise ValueError(f"latent_update: drift shape {drift_t.shape} != mu shape {post.mu.shape}")
    if gamma == 0.0:
        return post.mu + 0.0 * post.sigma()  # keep the sigma head in the graph
    return post.mu + gamma * (post.sigma() * drift_t)


def unit_rows(x: Tensor) -> Tensor:
    """Row-normalize to unit L2 length (eps-guarded)."""
    n = norm(x, axis=1, keepdims=True) + _NORM_EPS
    return x * (-n.log()).exp()


def infonce(eps_static: Tensor, eps_evolved: Tensor, tau: float) -> Tensor:
    """Contrastive alignment of paired noise predictions.

    -(1/B) sum_i log[ exp(sim_ii/tau) / sum_{j != i} exp(sim_ij/tau) ], with
    cosine similarity over unit-normalized rows and the positive pair
    excluded from the denominator.
    """
    if tau <= 0:
        raise ValueError("infonce: tau must be > 0")
    a = eps_static if isinstance(eps_static, Tensor) else Tensor(np.asarray(eps_static))
    b = eps_evolved if isinstance(eps_evolved, Tensor) else Tensor(np.asarray(eps_evolved))
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"infonce: expected matching (B, D) batches, got {a.shape} and {b.shape}")
    B = a.shape[0]
    if B < 2:
        raise ValueError("infonce: batch size must be >= 2 (empty negative set)")
    ua = unit_rows(a)
    ub = unit_rows(b)
    scaled = (ua @ transpose(ub)) * (1.0 / tau)
    eye = np.eye(B)
    mask = Tensor(1.0 - eye)
    # max over the negatives only, detached, for a stable log-sum-exp
    m = np.max(np.where(eye > 0, -np.inf, scaled.data), axis=1, keepdims=True)
    lse = ((mask * (scaled - Tensor(m)).exp()).sum(axis=1, keepdims=True)).log() + Tensor(m)
    pos = (Tensor(eye) * scaled).sum(axis=1, keepdims=True)
    return (lse - pos).mean()


def kl_closed_form(post: LatentPosterior, z) -> Tensor:
    """KL( N(mu, diag sigma^2) || N(z, I) ) in closed form.

    0.5 * sum_i (sigma_i^2 + (mu_i - z_i)^2 - 1 - log sigma_i^2); batched
    inputs return the batch mean.
    """
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    var = post.log_var.exp()
    diff = post.mu - z_t
    axis = 1 if post.mu.ndim == 2 else 0
    per = 0.5 * tsum(var + diff * diff - 1.0 - post.log_var, axis=axis)
    return per.mean() if post.mu.ndim == 2 else per


def likelihood_loss(eps_pred_evolved: Tensor, eps_true: np.ndarray) -> Tensor:
    """Noise regression on the evolved-latent predictions (ablation only)."""
    diff = eps_pred_evolved - Tensor(eps_true)
    return tsum(diff * diff, axis=1).mean()


def total_loss(l_dp: Tensor, l_cont: Tensor, l_kl: Tensor, cfg: AgConfig,
               l_lh: Tensor | None = None) -> Tensor:
    for name, part in (("L_DP", l_dp), ("L_cont", l_cont), ("L_KL", l_kl), ("L_LH", l_lh)):
        if part is not None and not math.isfinite(part.item()):
            raise FloatingPointError(f"total_loss: non-finite {name} = {part.item()}")
    total = l_dp + cfg.lambda_cont * l_cont + cfg.lambda_kl * l_kl
    if l_lh is not None and cfg.lambda_lh > 0:
        total = total + cfg.lambda_lh * l_lh
    return total


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with optional decoupled weight decay over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the global gradient norm."""
        self.t += 1
        sq = 0.0
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            sq += float(np.sum(g * g))
            m = self.m[key] = self.b1 * self.m[key] + (1 - self.b1) * g
            v = self.v[key] = self.b2 * self.v[key] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return math.sqrt(sq)


# -- training / inference -----------------------------------------------------


def draw_batch_noise(seed: int, B: int, latent_dim: int, action_len: int, K: int):
    """Per-item (latent eps, diffusion step, action eps) draws.

    One independent stream per item keeps results identical whether the batch
    is processed serially or in parallel, and lets the plain and the
    action-guided training paths consume bit-identical randomness.
    """
    eps_z = np.empty((B, latent_dim))
    ks = np.empty(B, dtype=np.int64)
    eps_a = np.empty((B, action_len))
    for i in range(B):
        rng = rng_from(seed, i)
        eps_z[i] = rng.standard_normal(latent_dim)
        ks[i] = rng.integers(1, K + 1)
        eps_a[i] = rng.standard_normal(action_len)
    return eps_z, ks, eps_a


def _mse_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(target)
    return tsum(diff * diff, axis=1).mean()


def dp_training_step(model: PolicyNets, obs: np.ndarray, acts: np.ndarray,
                     sched: NoiseSchedule, opt: Adam, seed: int) -> dict:
    """Plain diffusion-policy step: noise matching only, no latent evolution."""
    B = obs.shape[0]
    eps_z, ks, eps_a = draw_batch_noise(seed, B, model.latent_dim, acts.shape[1], sched.K)
    post = encode_posterior(model.encoder, model.heads, obs)
    z = reparameterize(post, eps_z)
    a_k = forward_noise(acts, ks, eps_a, sched)
    pred = model.eps(Tensor(a_k), z, ks)
    l_dp = _mse_rows(pred, eps_a)
    opt.zero_grad()
    l_dp.backward()
    gnorm = opt.step()
    return {"loss_dp": l_dp.item(), "loss_total": l_dp.item(), "grad_norm": gnorm}


def training_step(model: PolicyNets, obs: np.ndarray, acts: np.ndarray, cfg: AgConfig,
                  sched: NoiseSchedule, opt: Adam, seed: int) -> dict:
    """One action-guided update on a batch of (observation, action sequence).

    Per item: encode the posterior, sample the static latent, noise the
    actions at a uniform step, predict noise from the static latent, evolve
    the latent through the detached VJP drift, predict again, then combine
    the noise-matching, contrastive, and KL terms into one Adam update.
    """
    B = obs.shape[0]
    if B < 2:
        raise ValueError("training_step: batch size must be >= 2 for the contrastive term")
    eps_z, ks, eps_a = draw_batch_noise(seed, B, model.latent_dim, acts.shape[1], sched.K)

    post = encode_posterior(model.encoder, model.heads, obs)
    z = reparameterize(post, eps_z)
    a_k = Tensor(forward_noise(acts, ks, eps_a, sched))

    eps_static = model.eps(a_k, z, ks)
    drift = vjp_drift(model.eps, a_k, z, ks)
    z_tilde = latent_update(post, drift, cfg.gamma)
    eps_evolved = model.eps(a_k, z_tilde, ks)

    l_dp = _mse_rows(eps_static, eps_a)
    l_cont = infonce(eps_static, eps_evolved, cfg.tau)
    l_kl = kl_closed_form(post, z)
    l_lh = likelihood_loss(eps_evolved, eps_a) if cfg.lambda_lh > 0 else None
    total = total_loss(l_dp, l_cont, l_kl, cfg, l_lh)

    opt.zero_grad()
    total.backward()
    gnorm = opt.step()
    metrics = {
        "loss_dp": l_dp.item(),
        "loss_cont": l_cont.item(),
        "loss_kl": l_kl.item(),
        "loss_total": total.item(),
        "grad_norm": gnorm,
    }
    if l_lh is not None:
        metrics["loss_lh"] = l_lh.item()
    return metrics


def infer_actions(model: PolicyNets, obs: np.ndarray, sched: NoiseSchedule, seed: int) -> np.ndarray:
    """Sample one action sequence conditioned on the posterior mean.

    No VJP and no latent sampling at inference; the denoising loop is the
    only cost, matching a plain diffusion policy with the same network.
    """
    with no_grad():
        post = encode_posterior(model.encoder, model.heads, obs)
        latent = post.mu.data

        def eps_fn(a, z, k):
            return model.eps(Tensor(a), Tensor(z), k).data

        return sample_actions(eps_fn, latent, sched, seed,
                              action_len=model.horizon * model.action_dim)


# -- action normalization ------------------------------------------------------


def fit_action_norm(model: PolicyNets, actions: np.ndarray) -> None:
    """Store per-dimension [low, high] over the flattened action columns."""
    per_dim = actions.reshape(-1, model.action_dim)
    low = per_dim.min(axis=0)
    high = per_dim.max(axis=0)
    span = np.where(high - low < 1e-9, 1.0, high - low)
    model.action_low = low
    model.action_high = low + span


def normalize_actions(model: PolicyNets, actions: np.ndarray) -> np.ndarray:
    flat = actions.reshape(actions.shape[:-1] + (-1, model.action_dim))
    out = 2.0 * (flat - model.action_low) / (model.action_high - model.action_low) - 1.0
    return np.clip(out, -1.0, 1.0).reshape(actions.shape)


def denormalize_actions(model: PolicyNets, actions: np.ndarray) -> np.ndarray:
    flat = actions.reshape(actions.shape[:-1] + (-1, model.action_dim))
    out = (flat + 1.0) / 2.0 * (model.action_high - model.action_low) + model.action_low
    return out.reshape(actions.shape)
