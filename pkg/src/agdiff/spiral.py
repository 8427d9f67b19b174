"""Irregular-spiral regression: base flow vs VJP-guided flow.

1,000 noisy 2D spirals sampled at 100 irregular time points, half clockwise.
Both models share an LSTM backbone (128 hidden units, 2 layers) with linear
mean/log-variance heads over the hidden state and an MLP regression head
predicting the next point. The guided variant evolves the latent through the
regression head's vector-Jacobian product before predicting; gamma = 0
reduces it to the base flow exactly, which is how the base flow is trained.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .agcore import Adam
from .autodiff import Tensor, backward, concat, enable_grad, forward, no_grad, tsum
from .datasets import Episode
from .nn import Lstm, Mlp, PosteriorHeads, init_heads, init_lstm, init_mlp, lstm_forward
from .util import rng_from

N_POINTS = 100
TIME_SPAN = 4.0 * np.pi


@dataclass
class SpiralDataset:
    times: np.ndarray       # (n, 100) strictly increasing
    points: np.ndarray      # (n, 100, 2)
    clockwise: np.ndarray   # (n,) bool
    sigmas: np.ndarray      # (n,)
    seed: int


def generate_spirals(n: int, seed: int,
                     sigma_range: tuple[float, float] = (0.02, 0.1)) -> SpiralDataset:
    """Half clockwise, half counterclockwise, irregular times, radial growth."""
    if n < 1:
        raise ValueError("generate_spirals: n must be >= 1")
    rng = rng_from(seed, 0x59A1)
    times = np.sort(rng.uniform(0.0, TIME_SPAN, size=(n, N_POINTS)), axis=1)
    # strictly increasing: nudge any ties apart (vanishing probability)
    for i in range(n):
        for j in range(1, N_POINTS):
            if times[i, j] <= times[i, j - 1]:
                times[i, j] = np.nextafter(times[i, j - 1], np.inf)
    clockwise = np.arange(n) % 2 == 0
    omegas = rng.uniform(0.8, 1.2, size=n) * np.where(clockwise, -1.0, 1.0)
    theta0 = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r0 = rng.uniform(0.25, 0.55, size=n)
    growth = rng.uniform(0.05, 0.09, size=n)
    sigmas = rng.uniform(sigma_range[0], sigma_range[1], size=n)
    radius = r0[:, None] + growth[:, None] * times
    angle = theta0[:, None] + omegas[:, None] * times
    clean = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=2)
    noise = rng.standard_normal(clean.shape) * sigmas[:, None, None]
    return SpiralDataset(times=times, points=clean + noise,
                         clockwise=clockwise, sigmas=sigmas, seed=seed)


def split_dataset(data: SpiralDataset, test_fraction: float = 0.2):
    """Deterministic train/test split over whole trajectories."""
    n = len(data.points)
    n_test = max(1, int(round(n * test_fraction)))
    idx = rng_from(data.seed, 0x5911).permutation(n)
    test, train = idx[:n_test], idx[n_test:]

    def subset(ix):
        return SpiralDataset(times=data.times[ix], points=data.points[ix],
                             clockwise=data.clockwise[ix], sigmas=data.sigmas[ix],
                             seed=data.seed)

    return subset(train), subset(test)


@dataclass
class SpiralModel:
    lstm: Lstm
    heads: PosteriorHeads
    out: Mlp
    gamma: float

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.lstm.parameters("lstm."))
        params.update(self.heads.parameters("heads."))
        params.update(self.out.parameters("out."))
        return params


def init_spiral_model(seed: int, gamma: float, hidden: int = 128, layers: int = 2,
                      out_hidden: int = 64) -> SpiralModel:
    # the regression head also sees the time gap to the queried next point
    return SpiralModel(
        lstm=init_lstm(2, hidden, layers, seed),
        heads=init_heads(hidden, seed + 1),
        out=init_mlp([hidden + 1, out_hidden, 2], seed + 2),
        gamma=gamma,
    )


def _stack_steps(hs: list[Tensor]) -> Tensor:
    """(B, H) per step -> (T*B, H), step-major."""
    return concat(hs, axis=0)


def _query_deltas(times: np.ndarray) -> np.ndarray:
    """Step-major (T-1)*B x 1 column of gaps to the queried next point."""
    d = np.diff(times, axis=1)  # (B, T-1)
    return d.T.reshape(-1, 1)


def _head_out(model: SpiralModel, latent: Tensor, qdt: np.ndarray) -> Tensor:
    return model.out(concat([latent, Tensor(qdt)], axis=1))


def predict_next(model: SpiralModel, points: np.ndarray, times: np.ndarray) -> Tensor:
    """Next-point predictions for steps 0..T-2, shaped (T-1)*B x 2.

    Predictions are queried at the next measurement time, so the head input
    is [latent, time gap]. The evolved latent is mu + gamma * sigma (.)
    drift with the drift taken as the regression head's VJP at the hidden
    state (latent slot only), detached; gamma=0 collapses to the base
    flow's mu-only path.
    """
    if points.ndim == 2:
        points = points[None]
        times = np.atleast_2d(times)
    hs = lstm_forward(model.lstm, points, times)[:-1]
    H = _stack_steps(hs)
    qdt = _query_deltas(np.atleast_2d(times))
    mu, log_var = model.heads(H)
    if model.gamma == 0.0:
        latent = mu
    else:
        with enable_grad():
            leaf = Tensor(H.data.copy(), requires_grad=True)
            y_out, tape = forward(lambda t: _head_out(model, t, qdt), leaf)
            drift = backward(tape, y_out.data)[leaf]
        sigma = (0.5 * log_var).exp()
        latent = mu + model.gamma * (sigma * Tensor(drift))
    return _head_out(model, latent, qdt)


def _targets(points: np.ndarray) -> np.ndarray:
    """Step-major next points matching predict_next's row layout."""
    B, T, _ = points.shape
    return points[:, 1:, :].transpose(1, 0, 2).reshape((T - 1) * B, 2)


def train_spiral_flow(data: SpiralDataset, seed: int, gamma: float,
                      epochs: int = 100, batch_size: int = 32, lr: float = 1e-3,
                      hidden: int = 128, layers: int = 2) -> tuple[SpiralModel, list[float]]:
    """Adam training of one flow variant; returns per-epoch train MSE."""
    if len(data.points) == 0:
        raise ValueError("train_spiral_flow: empty dataset")
    model = init_spiral_model(seed, gamma, hidden=hidden, layers=layers)
    opt = Adam(model.parameters(), lr=lr)
    n = len(data.points)
    order_rng = rng_from(seed, 0x7A1)
    curve = []
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n - batch_size + 1, batch_size):
            ix = order[start:start + batch_size]
            pred = predict_next(model, data.points[ix], data.times[ix])
            diff = pred - Tensor(_targets(data.points[ix]))
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return model, curve


def evaluate_mse(model: SpiralModel, data: SpiralDataset, chunk: int = 100) -> float:
    """Mean squared next-point error over a dataset (per coordinate)."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data.points), chunk):
            pts = data.points[start:start + chunk]
            tts = data.times[start:start + chunk]
            pred = predict_next(model, pts, tts).data
            diff = pred - _targets(pts)
            total += float(np.sum(diff * diff))
            count += diff.size
    return total / count


def latent_trace(model: SpiralModel, points: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Per-step evolved latents for one trajectory, (T-1, hidden)."""
    qdt = _query_deltas(np.atleast_2d(times))
    with no_grad():
        hs = lstm_forward(model.lstm, points[None], times[None])[:-1]
        H = _stack_steps(hs)
        mu, log_var = model.heads(H)
        if model.gamma == 0.0:
            return mu.data.copy()
    with enable_grad():
        leaf = Tensor(H.data.copy(), requires_grad=True)
        y_out, tape = forward(lambda t: _head_out(model, t, qdt), leaf)
        drift = backward(tape, y_out.data)[leaf]
    sigma = np.exp(0.5 * log_var.data)
    return (mu.data + model.gamma * sigma * drift).copy()


def hidden_trace(model: SpiralModel, points: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Raw LSTM hidden states for one trajectory, (T-1, hidden)."""
    with no_grad():
        hs = lstm_forward(model.lstm, points[None], times[None])[:-1]
        return np.concatenate([h.data for h in hs], axis=0)


def mean_step_norm(trace: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(np.diff(trace, axis=0), axis=1)))


def traces_to_episodes(model: SpiralModel, data: SpiralDataset, limit: int = 8) -> list[Episode]:
    """Evolved-latent traces in the episode container (env tag spiral-latent)."""
    episodes = []
    for i in range(min(limit, len(data.points))):
        z = latent_trace(model, data.points[i], data.times[i])
        with no_grad():
            qdt = _query_deltas(data.times[i][None])
            preds = _head_out(model, Tensor(z), qdt).data
        episodes.append(Episode(
            env="spiral-latent",
            dt=float(TIME_SPAN / N_POINTS),
            observations=z,
            actions=preds,
            meta={"seed": int(data.seed), "source": "policy",
                  "variant": "vjp" if model.gamma != 0 else "base",
                  "times": data.times[i].tolist()},
        ))
    return episodes


def dataset_to_episodes(data: SpiralDataset) -> list[Episode]:
    """Raw spiral trajectories in the episode container (env tag spiral)."""
    episodes = []
    for i in range(len(data.points)):
        episodes.append(Episode(
            env="spiral",
            dt=float(TIME_SPAN / N_POINTS),
            observations=data.points[i],
            actions=data.points[i, 1:],
            meta={"seed": int(data.seed), "source": "scripted",
                  "variant": "cw" if data.clockwise[i] else "ccw",
                  "sigma": float(data.sigmas[i]), "times": data.times[i].tolist()},
        ))
    return episodes


# -- paired experiment ---------------------------------------------------------


def train_base_flow(data: SpiralDataset, seed: int, **kw) -> tuple[SpiralModel, list[float]]:
    return train_spiral_flow(data, seed, gamma=0.0, **kw)


def train_vjp_flow(data: SpiralDataset, seed: int, gamma: float = 1.0, **kw):
    model, curve = train_spiral_flow(data, seed, gamma=gamma, **kw)
    return model, curve


def _run_one(args):
    kind, n_samples, seed, gamma, train_kw = args
    data = generate_spirals(n_samples, seed)
    train, test = split_dataset(data)
    model, curve = train_spiral_flow(train, seed, gamma=gamma if kind == "vjp" else 0.0,
                                     **train_kw)
    mse = evaluate_mse(model, test)
    z_steps = np.mean([mean_step_norm(latent_trace(model, test.points[i], test.times[i]))
                       for i in range(min(16, len(test.points)))])
    h_steps = np.mean([mean_step_norm(hidden_trace(model, test.points[i], test.times[i]))
                       for i in range(min(16, len(test.points)))])
    return {"kind": kind, "seed": seed, "mse": mse, "curve": curve,
            "latent_step": float(z_steps), "hidden_step": float(h_steps)}


def run_paired_experiment(n_samples: int, seed: int, gamma: float = 1.0,
                          parallel: bool = True, **train_kw) -> dict:
    """Base flow vs VJP-guided flow on one seed, identical data and init."""
    jobs = [("base", n_samples, seed, gamma, train_kw),
            ("vjp", n_samples, seed, gamma, train_kw)]
    if parallel:
        with ProcessPoolExecutor(max_workers=2) as pool:
            base, vjp = list(pool.map(_run_one, jobs))
    else:
        base, vjp = map(_run_one, jobs)
    improvement = (base["mse"] - vjp["mse"]) / base["mse"]
    return {"seed": seed, "base": base, "vjp": vjp, "relative_improvement": improvement}
