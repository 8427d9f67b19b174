"""Network building blocks on top of the tape engine.

MLPs with per-layer activation tags, a two-layer-capable LSTM for irregular
sequences (the time delta is appended to each step's input), sinusoidal
diffusion-step embeddings, the observation encoder + posterior heads, and the
conditional noise predictor. Parameters are plain `Tensor` leaves addressable
by name for the optimizer and the checkpoint container.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, concat, matmul, relu, sigmoid, tanh

CHECKPOINT_MAGIC = b"AGDF"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": tanh,
    "relu": relu,
    "linear": lambda t: t,
}


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Scaled uniform weights: |w| <= sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Mlp:
    """Affine-activation stack. `activations[i]` tags layer i's nonlinearity."""

    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"mlp: input last dim {x.shape[-1]} != expected {self.in_dim}")
        h = x
        for W, b, act in zip(self.weights, self.biases, self.activations):
            h = _ACTIVATIONS[act](matmul(h, W) + b)
        return h

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = W
            out[f"{prefix}b{i}"] = b
        return out


def init_mlp(dims: list[int], seed: int, hidden_activation: str = "tanh",
             final_activation: str = "linear") -> Mlp:
    """Deterministic MLP init: fan-in scaled uniform weights, zero biases."""
    if any(d <= 0 for d in dims):
        raise ValueError(f"init_mlp: non-positive layer dim in {dims}")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        weights.append(Tensor(uniform_init(rng, dims[i], (dims[i], dims[i + 1])), requires_grad=True))
        biases.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True))
        acts.append(final_activation if i == len(dims) - 2 else hidden_activation)
    return Mlp(weights, biases, acts)


@dataclass
class PosteriorHeads:
    """Two independent linear maps z -> mu(z) and z -> log variance(z)."""

    mu_w: Tensor
    mu_b: Tensor
    logvar_w: Tensor
    logvar_b: Tensor

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return matmul(z, self.mu_w) + self.mu_b, matmul(z, self.logvar_w) + self.logvar_b

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}mu_w": self.mu_w,
            f"{prefix}mu_b": self.mu_b,
            f"{prefix}logvar_w": self.logvar_w,
            f"{prefix}logvar_b": self.logvar_b,
        }


def init_heads(dim: int, seed: int) -> PosteriorHeads:
    rng = np.random.default_rng(seed)
    return PosteriorHeads(
        mu_w=Tensor(uniform_init(rng, dim, (dim, dim)), requires_grad=True),
        mu_b=Tensor(np.zeros(dim), requires_grad=True),
        logvar_w=Tensor(uniform_init(rng, dim, (dim, dim)), requires_grad=True),
        logvar_b=Tensor(np.zeros(dim), requires_grad=True),
    )


@dataclass
class Lstm:
    """Stacked LSTM. Gate order in the fused weight: input, forget, cell, output."""

    w: list[Tensor]  # per layer: (in+hidden, 4*hidden)
    b: list[Tensor]  # per layer: (4*hidden,)
    hidden: int

    @property
    def layers(self) -> int:
        return len(self.w)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (W, bb) in enumerate(zip(self.w, self.b)):
            out[f"{prefix}w{i}"] = W
            out[f"{prefix}b{i}"] = bb
        return out


def init_lstm(in_dim: int, hidden: int, layers: int, seed: int) -> Lstm:
    """`in_dim` is the raw feature width; the appended time delta adds one."""
    if min(in_dim, hidden, layers) <= 0:
        raise ValueError("init_lstm: dims must be positive")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for layer in range(layers):
        d = in_dim + 1 if layer == 0 else hidden
        fan = d + hidden
        ws.append(Tensor(uniform_init(rng, fan, (fan, 4 * hidden)), requires_grad=True))
        bs.append(Tensor(np.zeros(4 * hidden), requires_grad=True))
    return Lstm(ws, bs, hidden)


def _sig(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _lstm_step(x, h_prev: Tensor, c_prev: Tensor, wx: Tensor, wh: Tensor,
               b: Tensor, H: int) -> tuple[Tensor, Tensor]:
    """One fully fused LSTM step; gate order input, forget, cell, output.

    `x` may be a plain array (constant inputs skip their gradient GEMM) or a
    Tensor (stacked layers). Emits a single packed [h | c] node whose
    analytic VJP is shared across all parents through a per-backward cache,
    so the engine merges the h- and c-path cotangents exactly as the
    unfused composition would.
    """
    x_t = x if isinstance(x, Tensor) else None
    x_data = x.data if x_t is not None else x
    gates = x_data @ wx.data
    gates += h_prev.data @ wh.data
    gates += b.data
    i = _sig(gates[:, :H])
    f = _sig(gates[:, H:2 * H])
    g = np.tanh(gates[:, 2 * H:3 * H])
    o = _sig(gates[:, 3 * H:])
    cp = c_prev.data
    c = f * cp + i * g
    hc = np.tanh(c)
    packed_data = np.concatenate([o * hc, c], axis=1)

    cache: dict = {}

    def _da(dout: np.ndarray) -> np.ndarray:
        if cache.get("id") == id(dout):
            return cache["da"]
        dh = dout[:, :H]
        dc = dout[:, H:] + dh * o * (1.0 - hc * hc)
        da = np.empty_like(gates)
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H:2 * H] = dc * cp * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H:] = dh * hc * o * (1.0 - o)
        cache["id"] = id(dout)
        cache["da"] = da
        cache["dc"] = dc
        return da

    def vjp_h(dout):
        return _da(dout) @ wh.data.T

    def vjp_c(dout):
        _da(dout)
        return cache["dc"] * f

    def vjp_wx(dout):
        return x_data.T @ _da(dout)

    def vjp_wh(dout):
        return h_prev.data.T @ _da(dout)

    def vjp_b(dout):
        return _da(dout).sum(axis=0)

    parents = [h_prev, c_prev, wx, wh, b]
    vjps = [vjp_h, vjp_c, vjp_wx, vjp_wh, vjp_b]
    if x_t is not None:
        parents.append(x_t)
        vjps.append(lambda dout: _da(dout) @ wx.data.T)
    packed = Tensor._node(packed_data, tuple(parents), tuple(vjps))
    return packed[:, :H], packed[:, H:]


def lstm_forward(params: Lstm, sequence: np.ndarray, times: np.ndarray) -> list[Tensor]:
    """Run the LSTM over an irregular sequence, returning per-step top hiddens.

    sequence: (B, T, D) observations; times: (T,) or (B, T), strictly
    increasing. The per-step time delta (first delta measured from t=0) is
    appended to the input, so irregular spacing conditions every update.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    B, T, D = seq.shape
    tt = np.asarray(times, dtype=np.float64)
    if tt.ndim == 1:
        tt = np.broadcast_to(tt, (B, T))
    if tt.shape != (B, T):
        raise ShapeError(f"lstm_forward: times shape {tt.shape} != sequence steps {(B, T)}")
    if np.any(np.diff(tt, axis=1) <= 0):
        raise ValueError("lstm_forward: times must be strictly increasing")
    deltas = np.diff(tt, axis=1, prepend=0.0)

    H = params.hidden
    # split each fused weight once per call; the input and recurrent matmuls
    # then run separately per step (the input half is tiny for layer 0)
    wx = [params.w[layer][: (D + 1 if layer == 0 else H), :] for layer in range(params.layers)]
    wh = [params.w[layer][(D + 1 if layer == 0 else H):, :] for layer in range(params.layers)]
    h = [Tensor(np.zeros((B, H))) for _ in range(params.layers)]
    c = [Tensor(np.zeros((B, H))) for _ in range(params.layers)]
    outputs: list[Tensor] = []
    for t in range(T):
        x = np.concatenate([seq[:, t, :], deltas[:, t:t + 1]], axis=1)
        for layer in range(params.layers):
            h[layer], c[layer] = _lstm_step(x, h[layer], c[layer],
                                            wx[layer], wh[layer], params.b[layer], H)
            x = h[layer]
        outputs.append(h[-1])
    return outputs


def timestep_embed(k, dim: int, max_steps: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos of k at geometrically spaced frequencies.

    Base frequency is 1; frequency j is max_steps**(-2j/dim). Accepts a
    scalar step or an integer array, returning (dim,) or (B, dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"timestep_embed: dim must be even, got {dim}")
    ks = np.asarray(k, dtype=np.float64)
    half = dim // 2
    freqs = max_steps ** (-2.0 * np.arange(half) / dim)
    angles = ks[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


@dataclass
class NoisePredictor:
    """Conditional noise estimator over [noisy_actions, latent, step embed]."""

    mlp: Mlp
    action_len: int  # horizon * action_dim, flattened
    latent_dim: int
    embed_dim: int

    def __call__(self, noisy_actions: Tensor, latent: Tensor, k) -> Tensor:
        if noisy_actions.shape[-1] != self.action_len:
            raise ShapeError(
                f"noise_predictor: action length {noisy_actions.shape[-1]} != {self.action_len}"
            )
        if latent.shape[-1] != self.latent_dim:
            raise ShapeError(
                f"noise_predictor: latent dim {latent.shape[-1]} != {self.latent_dim}"
            )
        emb = timestep_embed(k, self.embed_dim)
        if noisy_actions.ndim == 2 and emb.ndim == 1:
            emb = np.broadcast_to(emb, (noisy_actions.shape[0], self.embed_dim))
        axis = 1 if noisy_actions.ndim == 2 else 0
        return self.mlp(concat([noisy_actions, latent, Tensor(emb)], axis=axis))

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return self.mlp.parameters(prefix)


def init_noise_predictor(action_len: int, latent_dim: int, embed_dim: int,
                         hidden: list[int], seed: int) -> NoisePredictor:
    dims = [action_len + latent_dim + embed_dim] + list(hidden) + [action_len]
    return NoisePredictor(init_mlp(dims, seed), action_len, latent_dim, embed_dim)


@dataclass
class PolicyNets:
    """Encoder + posterior heads + noise predictor for one policy."""

    encoder: Mlp
    heads: PosteriorHeads
    eps: NoisePredictor
    obs_dim: int
    latent_dim: int
    horizon: int
    action_dim: int
    action_low: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    action_high: np.ndarray = field(default_factory=lambda: np.array([1.0]))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.parameters("enc."))
        out.update(self.heads.parameters("heads."))
        out.update(self.eps.parameters("eps."))
        return out


def init_policy(obs_dim: int, latent_dim: int, horizon: int, action_dim: int,
                seed: int, enc_hidden: int = 128, eps_hidden: tuple[int, int] = (256, 256),
                embed_dim: int = 16) -> PolicyNets:
    action_len = horizon * action_dim
    return PolicyNets(
        encoder=init_mlp([obs_dim, enc_hidden, latent_dim], seed),
        heads=init_heads(latent_dim, seed + 1),
        eps=init_noise_predictor(action_len, latent_dim, embed_dim, list(eps_hidden), seed + 2),
        obs_dim=obs_dim,
        latent_dim=latent_dim,
        horizon=horizon,
        action_dim=action_dim,
    )


# -- checkpoint container ----------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned self-describing container of named arrays (bit-exact)."""
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {}, "arrays": manifest}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint: version {header['version']} != {CHECKPOINT_VERSION}")
        blob = f.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def policy_to_arrays(model: PolicyNets) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.parameters().items()}
    out["norm.action_low"] = model.action_low
    out["norm.action_high"] = model.action_high
    return out


def load_policy_arrays(model: PolicyNets, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for name, p in params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise ShapeError(f"checkpoint: {name} shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].copy()
    if "norm.action_low" in arrays:
        model.action_low = arrays["norm.action_low"].copy()
        model.action_high = arrays["norm.action_high"].copy()
