#!/usr/bin/env python3
"""
hyprl - experiment runner for hyperbolic-head reinforcement learning

Subcommands:
  train          PPO / DQN on ProcGrid levels, JSONL metrics per seed
  compare        matched-seed runs of several heads (and latent sizes)
  grad-probe     gradient magnitudes/variances of each head on one frozen batch
  measure-delta  Gromov delta and delta_rel of a CSV point set or distance matrix
  embed-tree     embed a tree metric in Euclidean space or on the Poincare ball
"""

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress
from rich.table import Table

import autodiff as ad
from autodiff import Tape, Tensor
from envs import (N_ACTIONS, EnvError, TreeSpec, VecEnv, make_level_factory, radial_layout, render, test_seeds,
                  train_seeds, tree_graph, tree_metric)
from hyperbolicity import DistanceMatrix, HyperbolicityError, delta_rel, delta_rel_matrix
from nn import HeadMode, NetworkError, PolicyNetwork, save_checkpoint
from optim import AdamState, RAdamState, adam_step, riemannian_adam_step
from poincare import BallConfig, PoincareBall
from rl import (DivergenceError, DQNConfig, DQNTrainer, PPOConfig, PPOTrainer, TrainingError, TrajectoryBatch,
                collect_rollout, export_latents, gae, gradient_stats, ppo_loss)

console = Console(stderr=True)
log = logging.getLogger("hyprl")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Unknown key, unparsable value or invalid setting"""


# -- experiment configuration -------------------------------------------------

def _opt(default, help):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = _opt("ppo", "trainer: ppo | dqn")
    head: str = _opt("srym", "head mode: " + " | ".join(m.value for m in HeadMode))
    latent_dim: int = _opt(32, "latent size n; compare sweeps 2,32,256 (Procgen PPO: 256, compact agent 32)")
    train_levels: int = _opt(32, "training level seeds 0..N-1; sweep 8,16,32 (Procgen: 200 halved to 25)")
    test_levels: int = _opt(200, "held-out level seeds 1000..")
    updates: int = _opt(300, "PPO updates / DQN update iterations")
    seed: int = _opt(0, "base rng seed (HYPRL_SEED when unset)")
    seeds: int = _opt(1, "number of consecutive seeds to run")
    out: str = _opt("runs", "output directory")
    c: float = _opt(1.0, "ball curvature magnitude c")
    level_kind: str = _opt("procgrid", "procgrid | empty")
    grid_size: int = _opt(9, "grid side length")
    step_cap: int = _opt(64, "episode step cap")
    num_envs: int = _opt(16, "parallel environments (Procgen PPO and Rainbow: 64)")
    rollout_steps: int = _opt(32, "PPO steps per environment per rollout")
    minibatch_size: int = _opt(128, "PPO minibatch size (Procgen PPO: 2048)")
    epochs: int = _opt(3, "PPO epochs per rollout (Procgen PPO setting)")
    lr: float = _opt(None, "Adam learning rate; unset gives PPO 5e-4 (Procgen PPO setting), DQN 1e-3")
    gamma: float = _opt(None, "discount; unset gives PPO 0.99, DQN 0.95 (Procgen: 0.999 / 0.99)")
    eval_every: int = _opt(10, "updates between held-out evaluations")
    delta_every: int = _opt(10, "updates between delta_rel measurements")
    power_iters: int = _opt(1, "power iterations per spectral-norm update (GAN spectral-norm setting)")
    batch_size: int = _opt(64, "DQN replay batch size (Procgen Rainbow: 512)")
    n_step: int = _opt(3, "DQN n-step return horizon (Procgen Rainbow setting)")
    min_replay: int = _opt(256, "DQN transitions stored before learning starts (Procgen Rainbow: 32K)")
    steps_per_update: int = _opt(1, "DQN vector-env steps per gradient update (Procgen Rainbow: 256 env steps)")
    target_sync: int = _opt(25, "DQN gradient updates between target syncs (Procgen Rainbow: 12800 env steps)")
    epsilon_steps: int = _opt(2000, "DQN env steps for epsilon 1 -> 0.01 (Procgen Rainbow: 512K)")
    double_q: bool = _opt(True, "DQN double-Q bootstrap action selection")
    timing: bool = _opt(False, "record wall_ms (breaks byte-identical reruns)")

    def __post_init__(self):
        if self.kind not in ("ppo", "dqn"):
            raise ConfigError(f"kind must be ppo or dqn, got {self.kind!r}")
        try:
            HeadMode(self.head)
        except ValueError:
            raise ConfigError(f"unknown head {self.head!r}") from None
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type in (int, "int") and f.name != "seed" and value < 1:
                raise ConfigError(f"{f.name} must be positive, got {value}")
        if self.c <= 0 or (self.lr is not None and self.lr < 0):
            raise ConfigError("c must be positive and lr non-negative")

    @staticmethod
    def _set(**values):
        """Leave unset keys to the trainer config's own defaults"""
        return {k: v for k, v in values.items() if v is not None}

    def ppo(self):
        return PPOConfig(**self._set(
            epochs=self.epochs, minibatch_size=self.minibatch_size, lr=self.lr, gamma=self.gamma,
            num_envs=self.num_envs, rollout_steps=self.rollout_steps, updates=self.updates,
            eval_every=self.eval_every, delta_every=self.delta_every, latent_dim=self.latent_dim,
            power_iters=self.power_iters, c=self.c, level_kind=self.level_kind, grid_size=self.grid_size,
            step_cap=self.step_cap, timing=self.timing))

    def dqn(self):
        return DQNConfig(**self._set(
            lr=self.lr, gamma=self.gamma, n_step=self.n_step, batch_size=self.batch_size,
            min_replay=self.min_replay, steps_per_update=self.steps_per_update, num_envs=self.num_envs,
            updates=self.updates, target_sync=self.target_sync, epsilon_steps=self.epsilon_steps,
            double_q=self.double_q, eval_every=self.eval_every, delta_every=self.delta_every,
            latent_dim=self.latent_dim, power_iters=self.power_iters, c=self.c, level_kind=self.level_kind,
            grid_size=self.grid_size, step_cap=self.step_cap, timing=self.timing))

    def trainer(self, seed, head=None, latent_dim=None):
        cfg = dataclasses.replace(self, head=head or self.head, latent_dim=latent_dim or self.latent_dim)
        levels = (train_seeds(cfg.train_levels), test_seeds(cfg.test_levels))
        if cfg.kind == "ppo":
            return PPOTrainer(cfg.ppo(), cfg.head, seed, *levels)
        return DQNTrainer(cfg.dqn(), cfg.head, seed, *levels)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _FIELD_TYPES[key]
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def read_config_file(path):
    """key=value lines; # comments and blank lines ignored"""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{number}: unknown config key {key!r}")
        values[key] = _convert(key, value)
    return values


def build_config(file_path=None, overrides=None, environ=None):
    """Defaults < HYPRL_SEED < config file < flags"""
    environ = os.environ if environ is None else environ
    values = {}
    if environ.get("HYPRL_SEED"):
        values["seed"] = _convert("seed", environ["HYPRL_SEED"])
    if file_path:
        values.update(read_config_file(file_path))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            values[key] = _convert(key, value)
    return ExperimentConfig(**values)


def config_help():
    lines = ["config keys (key=value in --config files, flags override):"]
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"  {f.name:<15} default {f.default!r:<12} {f.metadata.get('help', '')}")
    return "\n".join(lines)


# -- output helpers -----------------------------------------------------------

class JsonlWriter:
    """Append-only JSONL, flushed after every record"""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w")

    def write(self, line):
        self.fh.write(line + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_points_csv(path):
    """Uniform-width numeric rows; raises ConfigError naming the bad row"""
    rows = []
    try:
        with open(path, newline="") as fh:
            for number, row in enumerate(csv.reader(fh), 1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    values = [float(cell) for cell in row]
                except ValueError:
                    raise ConfigError(f"{path}: row {number} is not numeric") from None
                if rows and len(values) != len(rows[0]):
                    raise ConfigError(f"{path}: row {number} has {len(values)} columns, "
                                      f"expected {len(rows[0])}")
                rows.append(values)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    if not rows:
        raise ConfigError(f"{path}: no rows")
    return np.array(rows, dtype=np.float64)


def _fmt(value, digits=4):
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "-"
    return f"{value:.{digits}g}"


def _stats(values):
    values = [v for v in values if v is not None]
    if not values:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(values)), "std": float(np.std(values))}


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


# -- training -----------------------------------------------------------------

def summarize_run(records):
    """Final train/test return, median gradient stats and the delta_rel trajectory"""
    train = [r for r in records if r["split"] == "train"]
    test = [r for r in records if r["split"] == "test"]
    returns = [r["mean_return"] for r in train if r["mean_return"] is not None]
    tail = returns[-10:]
    return {
        "final_train_return": float(np.mean(tail)) if tail else None,
        "final_test_return": test[-1]["mean_return"] if test else None,
        "grad_latent_mag": _median([r["grad_latent_mag"] for r in train]),
        "grad_latent_var": _median([r["grad_latent_var"] for r in train]),
        "grad_encoder_mag": _median([r["grad_encoder_mag"] for r in train]),
        "grad_encoder_var": _median([r["grad_encoder_var"] for r in train]),
        "delta_rel": [[r["update"], r["delta_rel"]] for r in train if r["delta_rel"] is not None],
    }


def run_one(cfg, seed, path, head=None, latent_dim=None, progress=None):
    """Train one seed, streaming records to path; returns (summary, trainer)"""
    trainer = cfg.trainer(seed, head, latent_dim)
    records = []
    task = progress.add_task(f"{trainer.mode.value} seed {seed}", total=cfg.updates) if progress else None
    with JsonlWriter(path) as out:
        try:
            for record in trainer.run():
                out.write(record.to_json())
                records.append(dataclasses.asdict(record))
                if progress and record.split == "train":
                    progress.advance(task)
        except DivergenceError as e:
            diag = Path(path).with_suffix(".diag.json")
            write_json(diag, {"seed": seed, "head": trainer.mode.value, **e.diagnostic})
            log.warning("seed %d diverged, diagnostic written to %s", seed, diag)
            raise
    log.info("seed %d: %d records -> %s", seed, len(records), path)
    return summarize_run(records), trainer


def aggregate(summaries):
    """Across-seed mean/std of the per-seed summaries"""
    keys = ("final_train_return", "final_test_return", "grad_latent_mag", "grad_latent_var",
            "grad_encoder_mag", "grad_encoder_var")
    result = {key: _stats([s[key] for s in summaries]) for key in keys}
    gaps = [s["final_train_return"] - s["final_test_return"] for s in summaries
            if s["final_train_return"] is not None and s["final_test_return"] is not None]
    result["generalization_gap"] = _stats(gaps)
    by_update = {}
    for s in summaries:
        for update, value in s["delta_rel"]:
            by_update.setdefault(update, []).append(value)
    result["delta_rel"] = [[u, float(np.mean(v))] for u, v in sorted(by_update.items())]
    result["seeds"] = summaries
    return result


def _export(trainer, path, every):
    net = trainer.network
    rows, sidecar = export_latents(net, trainer.make, trainer.test_levels[0], every,
                                   np.random.default_rng(trainer.test_levels[0]))
    write_csv(path, rows)
    write_json(Path(path).with_suffix(".json"), sidecar)
    console.print(f"latent trajectory ({len(rows)} rows) -> {path}")


def cmd_train(args, cfg):
    out_dir = Path(cfg.out)
    if args.render:
        make = make_level_factory(cfg.level_kind, cfg.grid_size, cfg.step_cap)
        console.print(render(make(train_seeds(cfg.train_levels)[0])), highlight=False)
    summaries = []
    with Progress(console=console, transient=True, disable=console.quiet) as progress:
        for seed in range(cfg.seed, cfg.seed + cfg.seeds):
            stem = f"{cfg.kind}_{cfg.head}_n{cfg.latent_dim}_seed{seed}"
            summary, trainer = run_one(cfg, seed, out_dir / f"{stem}.jsonl", progress=progress)
            summaries.append(summary)
            if args.save_params:
                save_checkpoint(out_dir / f"{stem}.params", trainer.network.named_arrays())
            if args.export_latents and seed == cfg.seed:
                _export(trainer, args.export_latents, args.export_every)
    agg = aggregate(summaries)
    agg["config"] = dataclasses.asdict(cfg)
    write_json(out_dir / f"{cfg.kind}_{cfg.head}_n{cfg.latent_dim}_aggregate.json", agg)

    table = Table(title=f"{cfg.kind} / {cfg.head}", box=box.SIMPLE)
    for column in ("seed", "train return", "test return", "|g| latent", "|g| encoder", "delta_rel"):
        table.add_column(column, justify="right")
    for seed, s in zip(range(cfg.seed, cfg.seed + cfg.seeds), summaries):
        last_delta = s["delta_rel"][-1][1] if s["delta_rel"] else None
        table.add_row(str(seed), _fmt(s["final_train_return"]), _fmt(s["final_test_return"]),
                      _fmt(s["grad_latent_mag"]), _fmt(s["grad_encoder_mag"]), _fmt(last_delta))
    console.print(table)
    return EXIT_OK


def cmd_compare(args, cfg):
    heads = [h.strip() for h in args.heads.split(",") if h.strip()]
    if len(heads) < 2:
        raise ConfigError("compare needs at least two heads")
    for head in heads:
        try:
            HeadMode(head)
        except ValueError:
            raise ConfigError(f"unknown head {head!r}") from None
    dims = [int(d) for d in args.latent_dims.split(",")] if args.latent_dims else [cfg.latent_dim]
    out_dir = Path(cfg.out)
    results = {}
    with Progress(console=console, transient=True, disable=console.quiet) as progress:
        for dim in dims:
            for head in heads:
                summaries = []
                for seed in range(cfg.seed, cfg.seed + cfg.seeds):
                    path = out_dir / f"{cfg.kind}_{head}_n{dim}_seed{seed}.jsonl"
                    summary, _ = run_one(cfg, seed, path, head, dim, progress)
                    summaries.append(summary)
                results[f"{head}@{dim}"] = {"head": head, "latent_dim": dim, **aggregate(summaries)}
    write_json(out_dir / f"compare_{cfg.kind}.json", {"config": dataclasses.asdict(cfg), "runs": results})

    table = Table(title=f"compare ({cfg.kind}, {cfg.seeds} seeds)", box=box.SIMPLE)
    for column in ("head", "n", "train", "test", "gap", "|g| encoder", "var encoder"):
        table.add_column(column, justify="right")
    for entry in results.values():
        table.add_row(entry["head"], str(entry["latent_dim"]),
                      _fmt(entry["final_train_return"]["mean"]), _fmt(entry["final_test_return"]["mean"]),
                      _fmt(entry["generalization_gap"]["mean"]), _fmt(entry["grad_encoder_mag"]["mean"]),
                      _fmt(entry["grad_encoder_var"]["mean"]))
    console.print(table)
    return EXIT_OK


# -- gradient probe -----------------------------------------------------------

def probe_heads(heads, cfg, seed):
    """Gradient stats of each head's PPO loss on one batch gathered by a uniform policy"""
    make = make_level_factory(cfg.level_kind, cfg.grid_size, cfg.step_cap)
    venv = VecEnv(make, train_seeds(cfg.train_levels), cfg.num_envs, np.random.default_rng([seed, 1]))
    obs_dim = venv.obs_dim
    uniform = PolicyNetwork(obs_dim, N_ACTIONS, "euclid", np.random.default_rng([seed, 9]),
                            cfg.latent_dim, ball_config=BallConfig(c=cfg.c))
    for layer in uniform.head.parameters():
        layer.assign(np.zeros(layer.shape))
    rollout, _, _, last_obs = collect_rollout(uniform, venv, cfg.rollout_steps,
                                              np.random.default_rng([seed, 2]))
    flat = rollout.flatten()
    ppo_cfg = cfg.ppo()
    results = {}
    for head in heads:
        net = PolicyNetwork(obs_dim, N_ACTIONS, head, np.random.default_rng([seed, 0]), cfg.latent_dim,
                            ball_config=BallConfig(c=cfg.c), power_iters=cfg.power_iters)
        values = net.forward(flat.observations).value.data.reshape(rollout.values.shape)
        last_value = net.forward(last_obs).value.data
        adv, ret = gae(rollout.rewards, values, rollout.dones, last_value, ppo_cfg.gamma, ppo_cfg.gae_lambda)
        batch = TrajectoryBatch(flat.observations, flat.actions, flat.rewards, flat.dones, flat.log_probs,
                                values.reshape(-1), adv.reshape(-1), ret.reshape(-1))
        with Tape() as tape:
            out = net.forward(batch.observations, training=True)
            loss, _ = ppo_loss(batch, out.logits, out.value, ppo_cfg)
        tape.backward(loss)
        stats = gradient_stats(tape, scale=len(batch))
        results[head] = dataclasses.asdict(stats)
    return results


def cmd_grad_probe(args, cfg):
    heads = [h.strip() for h in args.heads.split(",") if h.strip()]
    for head in heads:
        try:
            HeadMode(head)
        except ValueError:
            raise ConfigError(f"unknown head {head!r}") from None
    results = probe_heads(heads, cfg, cfg.seed)
    write_json(Path(cfg.out) / "grad_probe.json", {"seed": cfg.seed, "latent_dim": cfg.latent_dim,
                                                   "heads": results})
    table = Table(title=f"gradient probe (n={cfg.latent_dim})", box=box.SIMPLE)
    for column in ("head", "|g| latent", "var latent", "|g| encoder", "var encoder"):
        table.add_column(column, justify="right")
    for head, s in results.items():
        table.add_row(head, _fmt(s["latent"]["magnitude"]), _fmt(s["latent"]["variance"]),
                      _fmt(s["encoder"]["magnitude"]), _fmt(s["encoder"]["variance"]))
    console.print(table)
    return EXIT_OK


# -- delta measurement --------------------------------------------------------

def cmd_measure_delta(args, cfg):
    data = read_points_csv(args.input)
    rng = np.random.default_rng(cfg.seed)
    try:
        if args.matrix:
            report = delta_rel_matrix(DistanceMatrix(data), args.sample_size, rng)
        else:
            report = delta_rel(data, args.metric, args.sample_size, rng, c=cfg.c)
    except (HyperbolicityError, ad.DomainError) as e:
        raise ConfigError(str(e)) from e
    payload = report.to_dict()
    if args.output:
        write_json(args.output, payload)
    table = Table(title=f"hyperbolicity of {args.input}", box=box.SIMPLE)
    for key in ("delta", "diameter", "delta_rel", "sample_size", "degenerate"):
        table.add_row(key, str(payload[key]))
    console.print(table)
    if not args.output:
        print(json.dumps(payload))
    return EXIT_OK


# -- tree embedding -----------------------------------------------------------

@dataclass(frozen=True)
class TreeEmbedConfig:
    dim: int = 2
    geometry: str = "hyperbolic"
    steps: int = 2000
    lr: float = 0.05
    init: str = "radial"
    init_scale: float = 1e-2
    c: float = 1.0

    def __post_init__(self):
        if self.geometry not in ("euclidean", "hyperbolic"):
            raise ConfigError(f"geometry must be euclidean or hyperbolic, got {self.geometry!r}")
        if self.init not in ("radial", "random"):
            raise ConfigError(f"init must be radial or random, got {self.init!r}")
        if self.dim < 1 or self.steps < 1 or self.lr <= 0:
            raise ConfigError("dim and steps must be positive, lr > 0")


def _pair_index(n):
    i, j = np.triu_indices(n, k=1)
    return i, j


def embedding_distances(X, i, j, ball=None):
    a, b = ad.gather_rows(X, i), ad.gather_rows(X, j)
    if ball is None:
        return ad.norm_last(a - b)
    return ball.dist(a, b)


def distortion(d_emb, d_src):
    """Mean and max of max(r, 1/r), r = d_emb / d_src, over pairs"""
    r = np.maximum(np.asarray(d_emb) / np.asarray(d_src), 1e-12)
    per_pair = np.maximum(r, 1.0 / r)
    return float(np.mean(per_pair)), float(np.max(per_pair))


def initial_coords(n, config, rng, ball=None, layout=None):
    """Jittered start points, laid out radially when a (radius, angle) layout is given

    On the ball the layout radius is a geodesic distance from the origin, which
    expmap0 reaches from a tangent vector of half that length.
    """
    X = rng.normal(scale=config.init_scale, size=(n, config.dim))
    if layout is None:
        return X
    radius, angle = layout
    polar = np.zeros((n, config.dim))
    polar[:, 0] = radius * np.cos(angle)
    if config.dim > 1:
        polar[:, 1] = radius * np.sin(angle)
    if ball is None:
        return polar + X
    return ball.project(ball.expmap0(Tensor(polar / 2.0 + X))).data


def embed_metric(D, config, rng, layout=None):
    """Minimise sum (d_emb/d_src - 1)^2 with Adam or Riemannian Adam

    The learning rate decays linearly to zero over the run. Ball points use
    per-point Riemannian moments so leaves near the boundary keep moving.
    Returns (coords, report).
    """
    n = D.n
    if n < 2:
        raise ConfigError("need at least two nodes to embed")
    i, j = _pair_index(n)
    target = D.values[i, j]
    ball = PoincareBall(BallConfig(c=config.c)) if config.geometry == "hyperbolic" else None
    X = Tensor(initial_coords(n, config, rng, ball, layout), requires_grad=True, name="coords")
    if ball:
        state = RAdamState(lr=config.lr, eps=1e-8, per_point=True)
    else:
        state = AdamState(lr=config.lr, eps=1e-8)
    loss_value = float("nan")
    for step in range(config.steps):
        state.lr = config.lr * (1.0 - step / config.steps)
        with Tape() as tape:
            ratio = embedding_distances(X, i, j, ball) / target
            loss = ad.sum_(ad.square(ratio - 1.0))
        grads = tape.backward(loss)
        loss_value = loss.item()
        g = grads.get(X, np.zeros(X.shape))
        if ball:
            riemannian_adam_step([X], [g], state, ball)
        else:
            adam_step([X], [g], state)
    d_emb = embedding_distances(X, i, j, ball).data
    mean_d, max_d = distortion(d_emb, target)
    report = {"geometry": config.geometry, "dim": config.dim, "nodes": n, "init": config.init,
              "loss": loss_value, "mean_distortion": mean_d, "max_distortion": max_d}
    return np.array(X.data), report


def embed_tree(spec, config, rng):
    """Embed the complete b-ary tree; returns (coords, report, nodes)"""
    D, nodes = tree_metric(spec)
    layout = radial_layout(tree_graph(spec)) if config.init == "radial" else None
    coords, report = embed_metric(D, config, rng, layout)
    return coords, report, nodes


def cmd_embed_tree(args, cfg):
    try:
        spec = TreeSpec(args.branching, args.depth)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    embed_cfg = TreeEmbedConfig(dim=args.dim, geometry=args.geometry, steps=args.steps, lr=args.lr,
                                init=args.init, c=cfg.c)
    coords, report, nodes = embed_tree(spec, embed_cfg, np.random.default_rng(cfg.seed))
    out_dir = Path(cfg.out)
    stem = f"tree_b{spec.branching}_d{spec.depth}_{embed_cfg.geometry}_dim{embed_cfg.dim}_seed{cfg.seed}"
    write_csv(out_dir / f"{stem}.csv", coords.tolist())
    write_json(out_dir / f"{stem}.json", {**report, "branching": spec.branching, "depth": spec.depth,
                                          "seed": cfg.seed})
    table = Table(title=f"tree b={spec.branching} d={spec.depth} ({len(nodes)} nodes)", box=box.SIMPLE)
    table.add_column("geometry")
    table.add_column("mean distortion", justify="right")
    table.add_column("max distortion", justify="right")
    table.add_row(report["geometry"], _fmt(report["mean_distortion"], 6), _fmt(report["max_distortion"], 6))
    console.print(table)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

CONFIG_FLAGS = {
    "head": ("--head", str), "latent_dim": ("--latent-dim", int), "seeds": ("--seeds", int),
    "seed": ("--seed", int), "updates": ("--updates", int), "train_levels": ("--train-levels", int),
    "test_levels": ("--test-levels", int), "out": ("--out", str), "c": ("--c", float),
    "level_kind": ("--level-kind", str), "grid_size": ("--grid-size", int), "lr": ("--lr", float),
    "num_envs": ("--num-envs", int), "rollout_steps": ("--rollout-steps", int),
}


def _add_config_flags(parser, names):
    parser.add_argument("--config", help="key=value experiment file (flags override it)")
    for name in names:
        flag, kind = CONFIG_FLAGS[name]
        parser.add_argument(flag, dest=name, type=kind, default=None,
                            help=ExperimentConfig.__dataclass_fields__[name].metadata["help"])


def build_parser():
    parser = argparse.ArgumentParser(prog="hyprl", description="Hyperbolic-head RL experiment runner",
                                     epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser.add_argument("--quiet", "-q", action="store_true", help="no console output")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train PPO or DQN", epilog=config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
    train.add_argument("kind", choices=["ppo", "dqn"])
    _add_config_flags(train, list(CONFIG_FLAGS))
    train.add_argument("--timing", action="store_const", const=True, default=None, help="record wall_ms")
    train.add_argument("--render", action="store_true", help="print the first training level")
    train.add_argument("--save-params", action="store_true", help="write a parameter checkpoint per seed")
    train.add_argument("--export-latents", metavar="CSV", help="write ball coordinates of a test trajectory")
    train.add_argument("--export-every", type=int, default=4, help="trajectory sampling stride")

    compare = sub.add_parser("compare", help="matched-seed comparison of heads", epilog=config_help(),
                             formatter_class=argparse.RawDescriptionHelpFormatter)
    compare.add_argument("kind", choices=["ppo", "dqn"])
    compare.add_argument("--heads", default="euclid,euclid-sn,naive,clipped,srym",
                         help="comma-separated head modes")
    compare.add_argument("--latent-dims", help="comma-separated latent sizes, e.g. 2,32,256")
    _add_config_flags(compare, [k for k in CONFIG_FLAGS if k != "head"])

    probe = sub.add_parser("grad-probe", help="gradient statistics of heads on one frozen batch",
                           epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    probe.add_argument("--heads", default="naive,srym", help="comma-separated head modes")
    _add_config_flags(probe, ["latent_dim", "seed", "out", "c", "level_kind", "grid_size",
                              "num_envs", "rollout_steps", "train_levels"])

    measure = sub.add_parser("measure-delta", help="delta hyperbolicity of a CSV point set",
                             epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    measure.add_argument("input", help="CSV, one point (or distance-matrix row) per line")
    measure.add_argument("--metric", choices=["euclidean", "poincare"], default="euclidean")
    measure.add_argument("--matrix", action="store_true", help="input is a distance matrix")
    measure.add_argument("--sample-size", "-m", type=int, default=256)
    measure.add_argument("--output", "-o", help="JSON report path (stdout when omitted)")
    _add_config_flags(measure, ["seed", "c"])

    embed = sub.add_parser("embed-tree", help="tree embedding distortion benchmark",
                           epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    embed.add_argument("--branching", "-b", type=int, default=2)
    embed.add_argument("--depth", "-d", type=int, default=5)
    embed.add_argument("--dim", type=int, default=2)
    embed.add_argument("--geometry", choices=["euclidean", "hyperbolic"], default="hyperbolic")
    embed.add_argument("--steps", type=int, default=2000)
    embed.add_argument("--lr", type=float, default=0.05)
    embed.add_argument("--init", choices=["radial", "random"], default="radial",
                       help="start from a polar tree drawing or from jitter around the origin")
    _add_config_flags(embed, ["seed", "out", "c"])
    return parser


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "grad-probe": cmd_grad_probe,
    "measure-delta": cmd_measure_delta,
    "embed-tree": cmd_embed_tree,
}


def setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(message)s",
                        handlers=[RichHandler(console=console, show_path=False)], force=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    console.quiet = args.quiet
    setup_logging(args.verbose)

    overrides = {name: getattr(args, name) for name in _FIELD_TYPES if hasattr(args, name)}
    if args.command in ("train", "compare"):
        overrides["kind"] = args.kind
    if args.command == "embed-tree":
        overrides.pop("lr", None)
    try:
        cfg = build_config(getattr(args, "config", None), overrides)
        log.debug("config: %s", cfg)
        return COMMANDS[args.command](args, cfg)
    except DivergenceError as e:
        console.print(f"[red]training diverged:[/red] {e}")
        return EXIT_DIVERGED
    except ad.AutodiffError as e:
        console.print(f"[red]numerical error:[/red] {e}")
        return EXIT_DIVERGED
    except (ConfigError, TrainingError, EnvError, NetworkError) as e:
        console.print(f"[red]config error:[/red] {e}")
        return EXIT_CONFIG
    except KeyboardInterrupt:
        console.print("\n[yellow]interrupted[/yellow]")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
