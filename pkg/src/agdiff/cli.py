"""Command-line entry point wiring data generation, demo collection,
training, evaluation, theory checks, and the teleop service.

Outputs are structured line records (one JSON object per line) next to a
human-readable summary on stdout; the effective configuration is echoed
into every artifact. Exit codes: 0 success, 2 usage, 3 missing file,
4 malformed config, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import agcore, datasets, diffusion, nn, pushtsim, spiral, theory
from .agcore import AgConfig, Adam
from .autodiff import Tensor, grad_check
from .util import rng_from

EXIT_OK = 0
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_FAILURE = 5


def write_records(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def step_seed(seed: int, *keys: int) -> int:
    """Stable derived seed for one training step or rollout."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0] % 2**31)


# -- policy pipeline -----------------------------------------------------------


def build_windows(episodes: list[datasets.Episode], horizon: int):
    """(obs, flattened action sequence) training pairs from episodes."""
    obs_rows, act_rows = [], []
    for ep in episodes:
        T = len(ep.actions)
        for t in range(T - horizon + 1):
            obs_rows.append(ep.observations[t])
            act_rows.append(ep.actions[t:t + horizon].reshape(-1))
    if not obs_rows:
        raise ValueError("build_windows: no training windows (episodes too short?)")
    return np.array(obs_rows), np.array(act_rows)


def train_policy(episodes: list[datasets.Episode], cfg: AgConfig, seed: int,
                 dp_baseline: bool = False, action_dim: int = 2,
                 log_every: int = 200) -> tuple[nn.PolicyNets, list[dict]]:
    """Train a policy (plain diffusion or action-guided) on recorded episodes."""
    obs, acts_raw = build_windows(episodes, cfg.horizon)
    model = nn.init_policy(obs_dim=obs.shape[1], latent_dim=cfg.latent_dim,
                           horizon=cfg.horizon, action_dim=action_dim, seed=seed)
    agcore.fit_action_norm(model, acts_raw)
    acts = agcore.normalize_actions(model, acts_raw)
    sched = diffusion.make_schedule(cfg.diffusion_steps, cfg.schedule)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    n = obs.shape[0]
    log = [{"type": "config", "dp_baseline": dp_baseline, "windows": n, **cfg.as_dict()}]
    for step in range(cfg.train_steps):
        ix = rng_from(seed, 0xBA7C, step).integers(0, n, size=cfg.batch_size)
        s = step_seed(seed, 0x57E9, step)
        if dp_baseline:
            metrics = agcore.dp_training_step(model, obs[ix], acts[ix], sched, opt, s)
        else:
            metrics = agcore.training_step(model, obs[ix], acts[ix], cfg, sched, opt, s)
        if step % log_every == 0 or step == cfg.train_steps - 1:
            log.append({"type": "train_step", "step": step, **metrics})
    return model, log


class DiffusionPolicyRunner:
    """Receding-horizon policy adapter: observation in, ee targets out."""

    def __init__(self, model: nn.PolicyNets, sched: diffusion.NoiseSchedule, seed: int):
        self.model = model
        self.sched = sched
        self.seed = seed
        self.calls = 0

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        s = step_seed(self.seed, 0x1F3A, self.calls)
        self.calls += 1
        flat = agcore.infer_actions(self.model, obs, self.sched, s)
        plan = flat.reshape(self.model.horizon, self.model.action_dim)
        return agcore.denormalize_actions(self.model, plan)


def evaluate_policy(model: nn.PolicyNets, cfg: AgConfig, variant: str,
                    seeds: list[int], max_steps: int = 300) -> tuple[dict, list[datasets.Episode]]:
    sched = diffusion.make_schedule(cfg.diffusion_steps, cfg.schedule)
    episodes = []
    for s in seeds:
        runner = DiffusionPolicyRunner(model, sched, seed=s)
        ep, _ = pushtsim.run_episode(runner, variant, s, max_steps=max_steps,
                                     action_exec=cfg.action_exec)
        episodes.append(ep)
    report = datasets.aggregate_eval(episodes)
    report["variant"] = variant
    report["seeds"] = seeds
    return report, episodes


def save_policy(path, model: nn.PolicyNets, cfg: AgConfig, extra: dict | None = None) -> None:
    meta = {"config": cfg.as_dict(), "obs_dim": model.obs_dim, "latent_dim": model.latent_dim,
            "horizon": model.horizon, "action_dim": model.action_dim}
    if extra:
        meta.update(extra)
    nn.save_checkpoint(path, nn.policy_to_arrays(model), meta=meta)


def load_policy(path) -> tuple[nn.PolicyNets, AgConfig]:
    arrays, meta = nn.load_checkpoint(path)
    cfg = AgConfig(**meta["config"])
    model = nn.init_policy(obs_dim=meta["obs_dim"], latent_dim=meta["latent_dim"],
                           horizon=meta["horizon"], action_dim=meta["action_dim"], seed=0)
    nn.load_policy_arrays(model, arrays)
    return model, cfg


# -- gradient suite ------------------------------------------------------------


def gradient_suite(instances: int = 100, seed: int = 0) -> float:
    """Randomized finite-difference checks across every network family."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    kinds = ["mlp", "encoder", "eps", "lstm"]
    for i in range(instances):
        kind = kinds[i % len(kinds)]
        s = int(rng.integers(0, 2**31))
        if kind == "mlp":
            mlp = nn.init_mlp([4, 8, 3], seed=s)
            err = grad_check(mlp, Tensor(rng.standard_normal(4)), step=1e-5)
        elif kind == "encoder":
            enc = nn.init_mlp([6, 12, 4], seed=s)
            heads = nn.init_heads(4, seed=s + 1)
            err = grad_check(lambda o: agcore.encode_posterior(enc, heads, o).mu,
                             Tensor(rng.standard_normal(6)), step=1e-5)
        elif kind == "eps":
            pred = nn.init_noise_predictor(6, 4, 4, [16], seed=s)
            a = Tensor(rng.uniform(-1, 1, 6))
            k = int(rng.integers(1, 10))
            err = grad_check(lambda z: pred(a, z, k),
                             Tensor(rng.standard_normal(4)), step=1e-5)
        else:
            lstm = nn.init_lstm(2, 4, 2, seed=s)
            seq = rng.standard_normal((2, 5, 2))
            times = np.cumsum(rng.uniform(0.05, 0.5, 5))
            W = lstm.w[i % 2]

            def f(w, _lstm=lstm, _ix=i % 2, _seq=seq, _times=times):
                _lstm.w[_ix] = w
                hs = nn.lstm_forward(_lstm, _seq, _times)
                total = hs[0].sum()
                for h in hs[1:]:
                    total = total + h.sum()
                return total

            err = grad_check(f, Tensor(W.data), step=1e-5)
            lstm.w[i % 2] = W
        worst = max(worst, err)
    return worst


# -- subcommands ----------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(AgConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None)


def _effective_config(args) -> AgConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(AgConfig)}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            print(f"config file not found: {path}", file=sys.stderr)
            raise SystemExit(EXIT_MISSING_FILE)
        return agcore.load_config(path, overrides=overrides)
    kwargs = {}
    types = {f.name: f.type for f in fields(AgConfig)}
    for key, raw in overrides.items():
        if raw is None:
            continue
        kind = types[key]
        kwargs[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else str(raw)
    return AgConfig(**kwargs)


def cmd_spiral(args) -> int:
    if args.action == "gen":
        data = spiral.generate_spirals(args.n, args.seed)
        datasets.save_episodes(args.out, spiral.dataset_to_episodes(data))
        print(f"wrote {args.n} spiral trajectories to {args.out}")
        return EXIT_OK
    if args.action == "train":
        result = spiral.run_paired_experiment(args.n, args.seed, gamma=args.gamma,
                                              parallel=not args.serial, epochs=args.epochs)
        records = [{"type": "spiral_result", "seed": args.seed,
                    "base_mse": result["base"]["mse"], "vjp_mse": result["vjp"]["mse"],
                    "relative_improvement": result["relative_improvement"],
                    "gamma": args.gamma, "epochs": args.epochs, "n": args.n}]
        if args.out:
            write_records(args.out, records)
        print(f"base MSE {result['base']['mse']:.5f}  vjp MSE {result['vjp']['mse']:.5f}  "
              f"improvement {result['relative_improvement'] * 100:.1f}%")
        return EXIT_OK
    if args.action == "eval":
        data = spiral.generate_spirals(args.n, args.seed)
        _, test = spiral.split_dataset(data)
        model, _ = spiral.train_spiral_flow(test, args.seed, gamma=args.gamma, epochs=1)
        print(f"smoke-eval MSE {spiral.evaluate_mse(model, test):.5f}")
        return EXIT_OK
    return EXIT_FAILURE


def cmd_demos(args) -> int:
    episodes = []
    covs = []
    for i in range(args.episodes):
        ep, cov = pushtsim.run_episode(pushtsim.ExpertPolicy(), args.variant,
                                       seed=args.seed + i, max_steps=args.max_steps,
                                       action_exec=1, source="scripted")
        episodes.append(ep)
        covs.append(cov)
    datasets.save_episodes(args.out, episodes)
    print(f"collected {len(episodes)} {args.variant} episodes, "
          f"mean coverage {np.mean(covs):.3f}, success {np.mean(np.array(covs) >= 0.95):.2f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"data file not found: {data_path}", file=sys.stderr)
        return EXIT_MISSING_FILE
    episodes = datasets.load_episodes(data_path)
    model, log = train_policy(episodes, cfg, seed=cfg.seed, dp_baseline=args.dp_baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_policy(out / "policy.agdf", model, cfg, extra={"dp_baseline": args.dp_baseline})
    write_records(out / "train_log.jsonl", log)
    agcore.save_config(out / "effective.cfg", cfg)
    print(f"trained {'DP baseline' if args.dp_baseline else 'action-guided policy'} "
          f"on {len(episodes)} episodes; final loss "
          f"{log[-1].get('loss_total', float('nan')):.4f}; artifacts in {out}")
    return EXIT_OK


def _parse_seeds(spec: str) -> list[int]:
    if ":" in spec:
        a, b = spec.split(":")
        return list(range(int(a), int(b)))
    return [int(s) for s in spec.split(",")]


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        print(f"checkpoint not found: {path}", file=sys.stderr)
        return EXIT_MISSING_FILE
    model, cfg = load_policy(path)
    seeds = _parse_seeds(args.seeds)
    report, episodes = evaluate_policy(model, cfg, args.variant, seeds,
                                       max_steps=args.max_steps)
    records = [{"type": "config", **cfg.as_dict()}, {"type": "eval_report", **report}]
    if args.out:
        write_records(args.out, records)
        if args.save_episodes:
            datasets.save_episodes(Path(args.out).with_suffix(".episodes.jsonl"), episodes)
    print(f"{args.variant}: coverage {report['coverage_mean']:.3f} "
          f"+- {report['coverage_std']:.3f}, success {report['success_rate']:.2f}, "
          f"jerk {report['jerk_mean']:.4f}")
    return EXIT_OK


def cmd_theory(args) -> int:
    cfg = AgConfig(diffusion_steps=args.steps)
    if args.checkpoint:
        model, cfg = load_policy(args.checkpoint)
    else:
        model = nn.init_policy(obs_dim=22, latent_dim=cfg.latent_dim, horizon=cfg.horizon,
                               action_dim=2, seed=args.seed)
    sched = diffusion.make_schedule(cfg.diffusion_steps, cfg.schedule)
    rng = rng_from(args.seed, 0x7EC)
    obs = rng.standard_normal((args.batch, model.obs_dim))
    out = theory.verify_continuity_bound(model, obs, cfg, sched, seed=args.seed)
    sim_rep = theory.verify_mean_similarity_bound(
        rng.standard_normal((args.batch, 8)), rng.standard_normal((args.batch, 8)), cfg.tau)
    records = [r.as_dict() for r in out["per_step"]]
    records.append(out["summary"].as_dict())
    records.append(out["lipschitz"].as_dict())
    records.append(sim_rep.as_dict())
    if args.out:
        write_records(args.out, records)
    ok = out["summary"].satisfied and sim_rep.satisfied
    print(f"distance chain: {'ok' if out['summary'].satisfied else 'VIOLATED'} "
          f"({out['summary'].note}); similarity bound margin {sim_rep.margin:.4f}; "
          f"identity residual {out['max_identity_residual']:.2e}; "
          f"Lipschitz estimate {out['lipschitz_estimate']:.3f}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst = gradient_suite(instances=args.instances, seed=args.seed)
    dt = time.perf_counter() - t0
    print(f"max relative error {worst:.3e} over {args.instances} instances ({dt:.1f}s)")
    return EXIT_OK if worst < 1e-5 else EXIT_FAILURE


def cmd_teleop(args) -> int:
    from . import teleop

    teleop.serve(port=args.port, variant=args.variant, out=args.out,
                 tick_hz=args.tick_hz)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agdiff",
                                description="Action-guided diffusion policy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp_p = sub.add_parser("spiral", help="irregular-spiral regression experiment")
    sp_p.add_argument("action", choices=["gen", "train", "eval"])
    sp_p.add_argument("--n", type=int, default=1000)
    sp_p.add_argument("--seed", type=int, default=0)
    sp_p.add_argument("--gamma", type=float, default=1.0)
    sp_p.add_argument("--epochs", type=int, default=100)
    sp_p.add_argument("--serial", action="store_true")
    sp_p.add_argument("--out", default=None)
    sp_p.set_defaults(fn=cmd_spiral)

    d = sub.add_parser("demos", help="collect scripted-expert demonstrations")
    d.add_argument("action", choices=["collect"])
    d.add_argument("--variant", choices=["static", "dynamic"], default="static")
    d.add_argument("--episodes", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--max-steps", type=int, default=300)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_demos)

    t = sub.add_parser("train", help="train a policy on recorded episodes")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dp-baseline", action="store_true",
                   help="plain diffusion policy (no latent evolution terms)")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="roll out a trained policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--variant", choices=["static", "dynamic"], default="static")
    e.add_argument("--seeds", default="1000:1020")
    e.add_argument("--max-steps", type=int, default=300)
    e.add_argument("--out", default=None)
    e.add_argument("--save-episodes", action="store_true")
    e.set_defaults(fn=cmd_eval)

    th = sub.add_parser("theory", help="numerical bound verification")
    th.add_argument("action", choices=["check"])
    th.add_argument("--checkpoint", default=None)
    th.add_argument("--batch", type=int, default=16)
    th.add_argument("--steps", type=int, default=20)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", default=None)
    th.set_defaults(fn=cmd_theory)

    g = sub.add_parser("gradcheck", help="randomized gradient verification suite")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    ts = sub.add_parser("teleop", help="human demonstration collection service")
    ts.add_argument("action", choices=["serve"])
    ts.add_argument("--port", type=int, default=8765)
    ts.add_argument("--variant", choices=["static", "dynamic"], default="static")
    ts.add_argument("--out", default="teleop_episodes.jsonl")
    ts.add_argument("--tick-hz", type=float, default=10.0)
    ts.set_defaults(fn=cmd_teleop)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG if "config" in str(e) else EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE


if __name__ == "__main__":
    sys.exit(main())
