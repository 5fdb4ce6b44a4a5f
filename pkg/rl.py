#!/usr/bin/env python3
"""
PPO and n-step DQN trainers for any head mode, plus the gradient
instrumentation used to compare how stable each head trains.

Both trainers are generators of MetricsRecord, one per update (plus a test
record at every evaluation), so callers can stream them to JSONL as they
arrive. All randomness comes from generators derived from the run seed.
"""

import copy
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

import autodiff as ad
from autodiff import AutodiffError, Tape, Tensor
from envs import N_ACTIONS, VecEnv, make_level_factory, test_seeds, train_seeds
from hyperbolicity import HyperbolicityError, delta_rel
from nn import HeadMode, PolicyNetwork
from optim import HybridOptimizer, OptimError
from poincare import BallConfig

log = logging.getLogger(__name__)

GRAD_CUTS = ("latent", "encoder")


class TrainingError(ValueError):
    """Bad training input or a non-finite loss term"""


class DivergenceError(TrainingError):
    """Training produced non-finite values; carries a diagnostic dump"""

    def __init__(self, message, diagnostic):
        super().__init__(message)
        self.diagnostic = diagnostic


# -- rollout storage and advantage estimation ---------------------------------

@dataclass
class TrajectoryBatch:
    """Aligned rollout arrays; leading axes (T, k) or flattened (T*k,)"""
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        lead = self.actions.shape
        for name in ("rewards", "dones", "log_probs", "values", "advantages", "returns"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != lead:
                raise TrainingError(f"{name} has shape {arr.shape}, actions have {lead}")
        if self.observations.shape[:len(lead)] != lead:
            raise TrainingError(f"observations {self.observations.shape} not aligned with {lead}")

    def __len__(self):
        return int(np.prod(self.actions.shape))

    def flatten(self):
        n = len(self)
        return TrajectoryBatch(
            self.observations.reshape(n, -1),
            *(None if a is None else a.reshape(n) for a in
              (self.actions, self.rewards, self.dones, self.log_probs, self.values,
               self.advantages, self.returns)),
        )

    def subset(self, idx):
        return TrajectoryBatch(
            self.observations[idx],
            *(None if a is None else a[idx] for a in
              (self.actions, self.rewards, self.dones, self.log_probs, self.values,
               self.advantages, self.returns)),
        )


def gae(rewards, values, dones, last_value, gamma=0.99, lam=0.95):
    """Generalised advantage estimation over a (T,) or (T, k) rollout

    dones[t] marks that the transition at t ended its episode, so neither the
    bootstrap value nor later advantages leak across it.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    last_value = np.asarray(last_value, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise TrainingError(f"gae: rewards {rewards.shape}, values {values.shape}, "
                            f"dones {dones.shape} must align")
    if last_value.shape != rewards.shape[1:]:
        raise TrainingError(f"gae: bootstrap value shape {last_value.shape} vs {rewards.shape[1:]}")
    T = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    running = np.zeros_like(last_value)
    next_value = last_value
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        td = rewards[t] + gamma * next_value * live - values[t]
        running = td + gamma * lam * live * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(adv):
    """Zero mean, unit population std; mean-only when std is 0 or n is 1"""
    adv = np.asarray(adv, dtype=np.float64)
    centred = adv - np.mean(adv)
    std = np.std(adv)
    if adv.size > 1 and std > 0:
        return centred / std
    return centred


# -- PPO ------------------------------------------------------------------------

@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 3
    minibatch_size: int = 128
    lr: float = 5e-4
    adam_eps: float = 1e-5
    max_grad_norm: float = 0.5
    num_envs: int = 16
    rollout_steps: int = 32
    updates: int = 300
    eval_every: int = 10
    delta_every: int = 10
    delta_samples: int = 256
    latent_dim: int = 32
    hidden: Tuple[int, ...] = (128, 128)
    power_iters: int = 1
    c: float = 1.0
    level_kind: str = "procgrid"
    grid_size: int = 9
    step_cap: int = 64
    timing: bool = False

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise TrainingError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        for name in ("entropy_coef", "value_coef", "lr"):
            if getattr(self, name) < 0:
                raise TrainingError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0 <= self.gae_lambda <= 1 and 0 <= self.gamma <= 1):
            raise TrainingError("gamma and gae_lambda must lie in [0, 1]")
        for name in ("epochs", "minibatch_size", "num_envs", "rollout_steps", "updates",
                     "eval_every", "delta_every", "latent_dim", "power_iters"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive, got {getattr(self, name)}")


def _check_term(name, value):
    if not np.all(np.isfinite(value.data)):
        raise TrainingError(f"non-finite {name} term in loss")


def entropy_from_logits(logits):
    """Exact per-row entropy -sum p log p from log-softmax"""
    log_p = ad.log_softmax(logits)
    return -ad.sum_last(ad.exp(log_p) * log_p)


def ppo_loss(batch, logits, values, config):
    """Clipped surrogate + value MSE - entropy bonus; returns (loss, terms)"""
    if batch.advantages is None or batch.returns is None:
        raise TrainingError("ppo_loss: batch has no advantages/returns")
    if not np.all(np.isfinite(batch.log_probs)):
        raise TrainingError("ppo_loss: non-finite behaviour log-probs")
    adv = normalize_advantages(batch.advantages)
    log_p = ad.log_softmax(logits)
    new_lp = ad.pick(log_p, batch.actions)
    ratio = ad.exp(new_lp - batch.log_probs)
    surr = ratio * adv
    surr_clipped = ad.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    policy_loss = -ad.mean(ad.minimum(surr, surr_clipped))
    value_loss = ad.mean(ad.square(values - batch.returns))
    entropy = ad.mean(entropy_from_logits(logits))
    for name, term in (("policy", policy_loss), ("value", value_loss), ("entropy", entropy)):
        _check_term(name, term)
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    terms = {"policy": policy_loss.item(), "value": value_loss.item(), "entropy": entropy.item()}
    return loss, terms


# -- gradient instrumentation -------------------------------------------------

@dataclass
class CutStats:
    magnitude: float
    variance: float


@dataclass
class GradStats:
    latent: CutStats
    encoder: CutStats


def _per_sample_stats(sq_norms, mean_sq_norm):
    magnitude = float(np.mean(np.sqrt(sq_norms)))
    variance = max(float(np.mean(sq_norms)) - mean_sq_norm, 0.0)
    return CutStats(magnitude, variance)


def _encoder_layers(tape):
    count = 0
    while f"encoder.{count}.input" in tape.retained:
        count += 1
    return count


def grad_probe(tape, cut="latent", scale=1.0):
    """Mean per-sample gradient norm and its across-sample variance at a cut

    scale multiplies every per-sample gradient; pass the batch size when the
    loss is a batch mean to recover per-sample gradients. The encoder cut
    reconstructs per-sample weight gradients delta_b a_b^T (and bias delta_b)
    from the retained layer inputs and output gradients.
    """
    if cut not in GRAD_CUTS:
        raise TrainingError(f"unknown gradient cut {cut!r} ({' | '.join(GRAD_CUTS)})")
    try:
        if cut == "latent":
            G = scale * np.atleast_2d(tape.retained_grad("latent"))
            mean = np.mean(G, axis=0)
            return _per_sample_stats(np.sum(G * G, axis=1), float(np.sum(mean * mean)))

        n_layers = _encoder_layers(tape)
        if n_layers == 0:
            raise AutodiffError("no encoder layers retained")
        sq_norms = 0.0
        mean_sq = 0.0
        for i in range(n_layers):
            a = np.atleast_2d(tape.retained[f"encoder.{i}.input"].data)
            delta = scale * np.atleast_2d(tape.retained_grad(f"encoder.{i}.output"))
            B = a.shape[0]
            d2 = np.sum(delta * delta, axis=1)
            sq_norms = sq_norms + d2 * (np.sum(a * a, axis=1) + 1.0)
            mean_W = delta.T @ a / B
            mean_b = np.mean(delta, axis=0)
            mean_sq += float(np.sum(mean_W * mean_W) + np.sum(mean_b * mean_b))
        return _per_sample_stats(np.asarray(sq_norms), mean_sq)
    except AutodiffError as e:
        raise TrainingError(f"gradient cut {cut!r} was not retained: {e}") from e


def gradient_stats(tape, scale=1.0):
    return GradStats(grad_probe(tape, "latent", scale), grad_probe(tape, "encoder", scale))


def premap_stats(net, latent):
    """(mean, std) of the latent norm entering the exponential map, clip saturation"""
    pre = net.head.premap(Tensor(latent)).data
    norms = np.sqrt(np.sum(pre * pre, axis=-1))
    raw = np.sqrt(np.sum(np.asarray(latent) ** 2, axis=-1))
    saturation = float(np.mean(raw >= 1.0)) if net.mode.clip else 0.0
    return float(np.mean(norms)), float(np.std(norms)), saturation


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricsRecord:
    update: int
    env_steps: int
    split: str
    mean_return: Optional[float] = None
    entropy: Optional[float] = None
    grad_latent_mag: Optional[float] = None
    grad_latent_var: Optional[float] = None
    grad_encoder_mag: Optional[float] = None
    grad_encoder_var: Optional[float] = None
    delta_rel: Optional[float] = None
    wall_ms: Optional[float] = None
    latent_norm_mean: Optional[float] = None
    latent_norm_std: Optional[float] = None
    clip_saturation: Optional[float] = None

    def set_grads(self, stats):
        self.grad_latent_mag = stats.latent.magnitude
        self.grad_latent_var = stats.latent.variance
        self.grad_encoder_mag = stats.encoder.magnitude
        self.grad_encoder_var = stats.encoder.variance

    def to_json(self):
        return json.dumps(asdict(self))


# -- shared helpers -----------------------------------------------------------

def _rngs(seed):
    """Independent streams: network init, level choice, actions, analysis, evaluation"""
    return [np.random.default_rng([seed, stream]) for stream in range(5)]


def sample_actions(logits, rng):
    """Categorical draw per row from logits via inverse CDF"""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    p = np.exp(z)
    p /= np.sum(p, axis=-1, keepdims=True)
    u = rng.random(p.shape[0])
    cdf = np.cumsum(p, axis=-1)
    actions = np.sum(cdf < u[:, None], axis=-1)
    return np.minimum(actions, p.shape[-1] - 1)


def _log_probs(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def evaluate(policy, make, seeds):
    """Mean undiscounted return of one episode per seed, stepped as a batch"""
    envs = [make(s) for s in seeds]
    totals = np.zeros(len(envs))
    live = list(range(len(envs)))
    while live:
        obs = np.stack([envs[i].observe() for i in live])
        actions = policy(obs)
        still = []
        for i, a in zip(live, actions):
            _, r, done = envs[i].step(int(a))
            totals[i] += r
            if not done:
                still.append(i)
        live = still
    return float(np.mean(totals))


def _delta_rel_of(net, observations, config, rng):
    """delta_rel of Euclidean latents for up to delta_samples observations"""
    idx = rng.choice(len(observations), size=min(config.delta_samples, len(observations)), replace=False)
    latent = net.encoder.forward(observations[idx]).data
    try:
        return delta_rel(latent, "euclidean", config.delta_samples, rng).delta_rel
    except HyperbolicityError as e:
        log.debug("delta_rel skipped: %s", e)
        return None


def _diagnostic(update, net, **extra):
    norms = {name: float(np.sqrt(np.sum(np.square(arr)))) for name, arr in net.named_arrays().items()}
    finite = {name: bool(np.all(np.isfinite(arr))) for name, arr in net.named_arrays().items()}
    return {"update": update, "param_norms": norms, "param_finite": finite, **extra}


def _mean_or_none(values):
    return float(np.mean(values)) if values else None


@contextmanager
def diverge_on_error(update, net, loss_terms=None):
    """Re-raise numerical failures inside an update as DivergenceError with a diagnostic"""
    try:
        yield
    except DivergenceError:
        raise
    except (TrainingError, OptimError, AutodiffError) as e:
        diagnostic = _diagnostic(update, net, error=str(e), loss_terms=dict(loss_terms or {}))
        raise DivergenceError(f"update {update}: {e}", diagnostic) from e


# -- PPO training -------------------------------------------------------------

def collect_rollout(net, venv, steps, rng):
    """Run the policy for steps vector steps; returns (batch, finished, entropies, last_obs)"""
    obs_buf, act_buf, rew_buf, done_buf, lp_buf, val_buf = [], [], [], [], [], []
    finished, entropies = [], []
    obs = venv.observe()
    for _ in range(steps):
        out = net.forward(obs)
        logits = out.logits.data
        actions = sample_actions(logits, rng)
        log_p = _log_probs(logits)
        entropies.append(float(np.mean(-np.sum(np.exp(log_p) * log_p, axis=-1))))
        next_obs, rewards, dones, done_returns = venv.step(actions)
        obs_buf.append(obs)
        act_buf.append(actions)
        rew_buf.append(rewards)
        done_buf.append(dones.astype(np.float64))
        lp_buf.append(log_p[np.arange(len(actions)), actions])
        val_buf.append(out.value.data)
        finished.extend(done_returns)
        obs = next_obs
    batch = TrajectoryBatch(np.stack(obs_buf), np.stack(act_buf), np.stack(rew_buf),
                            np.stack(done_buf), np.stack(lp_buf), np.stack(val_buf))
    return batch, finished, entropies, obs


class PPOTrainer:
    """PPO over a VecEnv of training levels with periodic held-out evaluation"""

    def __init__(self, config, mode, seed=0, train_levels=None,
                 test_levels=None):
        self.config = config
        self.mode = HeadMode(mode)
        self.train_levels = list(train_levels) if train_levels is not None else train_seeds()
        self.test_levels = list(test_levels) if test_levels is not None else test_seeds()
        net_rng, env_rng, self.act_rng, self.delta_rng, self.eval_rng = _rngs(seed)
        self.make = make_level_factory(config.level_kind, config.grid_size, config.step_cap)
        self.venv = VecEnv(self.make, self.train_levels, config.num_envs, env_rng)
        self.network = PolicyNetwork(self.venv.obs_dim, N_ACTIONS, self.mode, net_rng, config.latent_dim,
                                     config.hidden, BallConfig(c=config.c), with_value=True,
                                     power_iters=config.power_iters)
        self.optimizer = HybridOptimizer(self.network.euclidean_parameters(), self.network.ball_parameters(),
                                         self.network.ball, lr=config.lr, eps=config.adam_eps,
                                         max_grad_norm=config.max_grad_norm)
        self.env_steps = 0

    def policy(self, obs):
        """Stochastic policy used for evaluation"""
        return sample_actions(self.network.forward(obs).logits.data, self.eval_rng)

    def _optimize(self, update, flat, record):
        config, net = self.config, self.network
        terms = {}
        with diverge_on_error(update, net, terms):
            for epoch in range(config.epochs):
                perm = self.act_rng.permutation(len(flat))
                for start in range(0, len(flat), config.minibatch_size):
                    mb = flat.subset(perm[start:start + config.minibatch_size])
                    with Tape() as tape:
                        out = net.forward(mb.observations, training=True)
                        loss, step_terms = ppo_loss(mb, out.logits, out.value, config)
                    terms.update(step_terms)
                    grads = tape.backward(loss)
                    if epoch == 0 and start == 0:
                        record.set_grads(gradient_stats(tape, scale=len(mb)))
                        (record.latent_norm_mean, record.latent_norm_std,
                         record.clip_saturation) = premap_stats(net, out.latent.data)
                    self.optimizer.step(grads)
        return terms

    def run(self):
        """Yield a train record per update and a test record every eval_every updates"""
        config, net = self.config, self.network
        for update in range(1, config.updates + 1):
            started = time.perf_counter()
            with diverge_on_error(update, net):
                rollout, finished, entropies, last_obs = collect_rollout(net, self.venv, config.rollout_steps,
                                                                         self.act_rng)
                last_value = net.forward(last_obs).value.data
                rollout.advantages, rollout.returns = gae(rollout.rewards, rollout.values, rollout.dones,
                                                          last_value, config.gamma, config.gae_lambda)
            self.env_steps += len(rollout)
            flat = rollout.flatten()

            record = MetricsRecord(update, self.env_steps, "train", _mean_or_none(finished),
                                   float(np.mean(entropies)))
            terms = self._optimize(update, flat, record)
            if update % config.delta_every == 0:
                with diverge_on_error(update, net):
                    record.delta_rel = _delta_rel_of(net, flat.observations, config, self.delta_rng)
            if config.timing:
                record.wall_ms = (time.perf_counter() - started) * 1e3
            log.debug("update %d: return %s, terms %s", update, record.mean_return, terms)
            yield record

            if update % config.eval_every == 0 or update == config.updates:
                with diverge_on_error(update, net):
                    test_return = evaluate(self.policy, self.make, self.test_levels)
                yield MetricsRecord(update, self.env_steps, "test", test_return)


def train_ppo(config, mode, seed=0, train_levels=None, test_levels=None):
    return PPOTrainer(config, mode, seed, train_levels, test_levels).run()


# -- DQN ------------------------------------------------------------------------

@dataclass(frozen=True)
class DQNConfig:
    lr: float = 1e-3
    adam_eps: float = 1e-5
    max_grad_norm: float = 0.5
    gamma: float = 0.95
    n_step: int = 3
    batch_size: int = 64
    replay_capacity: int = 50_000
    min_replay: int = 256
    num_envs: int = 16
    steps_per_update: int = 1
    updates: int = 300
    target_sync: int = 25
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_steps: int = 2_000
    double_q: bool = True
    eval_every: int = 10
    delta_every: int = 10
    delta_samples: int = 256
    latent_dim: int = 32
    hidden: Tuple[int, ...] = (128, 128)
    power_iters: int = 1
    c: float = 1.0
    level_kind: str = "procgrid"
    grid_size: int = 9
    step_cap: int = 64
    timing: bool = False

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise TrainingError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not (0 <= self.epsilon_end <= self.epsilon_start <= 1):
            raise TrainingError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("n_step", "batch_size", "replay_capacity", "num_envs", "steps_per_update",
                     "updates", "target_sync", "epsilon_steps", "eval_every", "delta_every",
                     "latent_dim", "power_iters"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class NStepSample:
    observations: np.ndarray
    actions: np.ndarray
    returns: np.ndarray       # sum_{i<h} gamma^i r_{t+i}
    next_observations: np.ndarray
    not_done: np.ndarray      # 0 when the window hit an episode end
    horizon: np.ndarray       # steps summed (n unless the episode ended first)

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Ring of (T, k) transition rows; n-step windows stop at episode ends"""

    def __init__(self, capacity, num_envs, obs_dim, n_step=3, gamma=0.99):
        if n_step < 1:
            raise TrainingError(f"n_step must be positive, got {n_step}")
        self.rows = max(capacity // num_envs, n_step + 1)
        self.num_envs = num_envs
        self.n_step = n_step
        self.gamma = gamma
        self.obs = np.zeros((self.rows, num_envs, obs_dim))
        self.actions = np.zeros((self.rows, num_envs), dtype=np.int64)
        self.rewards = np.zeros((self.rows, num_envs))
        self.dones = np.zeros((self.rows, num_envs), dtype=bool)
        self.start = 0
        self.size = 0

    @property
    def capacity(self):
        return self.rows * self.num_envs

    def __len__(self):
        return self.size * self.num_envs

    @property
    def sampleable(self):
        """Transitions whose n-step window and bootstrap row are stored"""
        return max(self.size - self.n_step, 0) * self.num_envs

    def add(self, obs, actions, rewards, dones):
        """Append one vector step: arrays of leading size num_envs"""
        row = (self.start + self.size) % self.rows
        if self.size == self.rows:
            self.start = (self.start + 1) % self.rows
        else:
            self.size += 1
        self.obs[row] = obs
        self.actions[row] = actions
        self.rewards[row] = rewards
        self.dones[row] = dones

    def _phys(self, logical):
        return (self.start + logical) % self.rows

    def window(self, t, env):
        """n-step return, bootstrap row, not_done and horizon for logical row t"""
        total, discount = 0.0, 1.0
        for i in range(self.n_step):
            row = self._phys(t + i)
            total += discount * self.rewards[row, env]
            discount *= self.gamma
            if self.dones[row, env]:
                return total, row, 0.0, i + 1
        return total, self._phys(t + self.n_step), 1.0, self.n_step

    def sample(self, batch_size, rng):
        if self.sampleable < batch_size:
            raise TrainingError(f"replay holds {self.sampleable} sampleable transitions, "
                                f"batch needs {batch_size}")
        flat = rng.integers(self.sampleable, size=batch_size)
        ts, envs = flat // self.num_envs, flat % self.num_envs
        returns = np.empty(batch_size)
        next_rows = np.empty(batch_size, dtype=np.int64)
        not_done = np.empty(batch_size)
        horizon = np.empty(batch_size, dtype=np.int64)
        for b, (t, e) in enumerate(zip(ts, envs)):
            returns[b], next_rows[b], not_done[b], horizon[b] = self.window(int(t), int(e))
        rows = np.array([self._phys(int(t)) for t in ts])
        return NStepSample(self.obs[rows, envs], self.actions[rows, envs], returns,
                           self.obs[next_rows, envs], not_done, horizon)


def dqn_targets(sample, target_q_next, gamma, n, online_q_next=None):
    """y = n-step return + gamma^n max_a Q_target(s_{t+n}, a) (1 - done)

    With online_q_next the bootstrap action is the online argmax (double Q).
    """
    q = np.asarray(target_q_next, dtype=np.float64)
    if q.shape[0] != len(sample):
        raise TrainingError(f"target Q rows {q.shape[0]} vs sample size {len(sample)}")
    if online_q_next is None:
        bootstrap = np.max(q, axis=-1)
    else:
        pick = np.argmax(np.asarray(online_q_next), axis=-1)
        bootstrap = q[np.arange(len(q)), pick]
    return sample.returns + gamma ** n * bootstrap * sample.not_done


def epsilon_greedy(q, epsilon, rng):
    """Uniform action with probability epsilon, else lowest-index argmax"""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise TrainingError(f"epsilon_greedy needs a non-empty vector, got shape {q.shape}")
    if not 0 <= epsilon <= 1:
        raise TrainingError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def epsilon_at(step, config):
    frac = min(step / config.epsilon_steps, 1.0)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def dqn_loss(q_values, actions, targets):
    """Mean squared TD error of the chosen actions"""
    td = ad.pick(q_values, actions) - targets
    loss = ad.mean(ad.square(td))
    _check_term("td", loss)
    return loss


class DQNTrainer:
    """n-step DQN with a periodically synced target network"""

    def __init__(self, config, mode, seed=0, train_levels=None,
                 test_levels=None):
        self.config = config
        self.mode = HeadMode(mode)
        self.train_levels = list(train_levels) if train_levels is not None else train_seeds()
        self.test_levels = list(test_levels) if test_levels is not None else test_seeds()
        net_rng, env_rng, self.act_rng, self.delta_rng, self.sample_rng = _rngs(seed)
        self.make = make_level_factory(config.level_kind, config.grid_size, config.step_cap)
        self.venv = VecEnv(self.make, self.train_levels, config.num_envs, env_rng)
        self.network = PolicyNetwork(self.venv.obs_dim, N_ACTIONS, self.mode, net_rng, config.latent_dim,
                                     config.hidden, BallConfig(c=config.c), with_value=False,
                                     power_iters=config.power_iters)
        self.target = self.network.clone()
        self.optimizer = HybridOptimizer(self.network.euclidean_parameters(), self.network.ball_parameters(),
                                         self.network.ball, lr=config.lr, eps=config.adam_eps,
                                         max_grad_norm=config.max_grad_norm)
        self.buffer = ReplayBuffer(config.replay_capacity, config.num_envs, self.venv.obs_dim,
                                   config.n_step, config.gamma)
        self.env_steps = 0
        self.grad_updates = 0

    def policy(self, obs):
        """Greedy policy used for evaluation"""
        return np.argmax(self.network.forward(obs).logits.data, axis=-1)

    @property
    def ready(self):
        return (len(self.buffer) >= self.config.min_replay
                and self.buffer.sampleable >= self.config.batch_size)

    def _act(self):
        config, finished = self.config, []
        obs = self.venv.observe()
        for _ in range(config.steps_per_update):
            q = self.network.forward(obs).logits.data
            eps = epsilon_at(self.env_steps, config)
            actions = np.array([epsilon_greedy(row, eps, self.act_rng) for row in q])
            next_obs, rewards, dones, done_returns = self.venv.step(actions)
            self.buffer.add(obs, actions, rewards, dones)
            finished.extend(done_returns)
            self.env_steps += config.num_envs
            obs = next_obs
        return finished

    def _learn(self, update, record):
        config, net = self.config, self.network
        sample = self.buffer.sample(config.batch_size, self.sample_rng)
        with diverge_on_error(update, net):
            q_next = self.target.forward(sample.next_observations).logits.data
            online_next = net.forward(sample.next_observations).logits.data if config.double_q else None
            targets = dqn_targets(sample, q_next, config.gamma, config.n_step, online_next)
            with Tape() as tape:
                out = net.forward(sample.observations, training=True)
                loss = dqn_loss(out.logits, sample.actions, targets)
            grads = tape.backward(loss)
            record.set_grads(gradient_stats(tape, scale=len(sample)))
            (record.latent_norm_mean, record.latent_norm_std,
             record.clip_saturation) = premap_stats(net, out.latent.data)
            self.optimizer.step(grads)
        self.grad_updates += 1
        if self.grad_updates % config.target_sync == 0:
            self.target = net.clone()
            log.debug("target network synced after %d gradient updates", self.grad_updates)
        if update % config.delta_every == 0:
            with diverge_on_error(update, net):
                record.delta_rel = _delta_rel_of(net, sample.observations, config, self.delta_rng)

    def run(self):
        """One train record per update iteration; grad fields stay null during warmup"""
        config = self.config
        for update in range(1, config.updates + 1):
            started = time.perf_counter()
            with diverge_on_error(update, self.network):
                finished = self._act()
            record = MetricsRecord(update, self.env_steps, "train", _mean_or_none(finished))
            if self.ready:
                self._learn(update, record)
            if config.timing:
                record.wall_ms = (time.perf_counter() - started) * 1e3
            yield record

            if update % config.eval_every == 0 or update == config.updates:
                with diverge_on_error(update, self.network):
                    test_return = evaluate(self.policy, self.make, self.test_levels)
                yield MetricsRecord(update, self.env_steps, "test", test_return)


def train_dqn(config, mode, seed=0, train_levels=None, test_levels=None):
    return DQNTrainer(config, mode, seed, train_levels, test_levels).run()


# -- 2-D latent export ----------------------------------------------------------

def export_latents(net, make, seed, every=4, rng=None):
    """Ball coordinates along one policy trajectory plus random-action excursions

    Returns (rows, sidecar): rows are (kind, step, *coords) with kind 0 for
    on-policy states taken every `every` steps and kind 1 for the states
    reached from each of them by `every` random actions. The sidecar holds the
    value gyroplane (p, w) of hyperbolic heads.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    env = make(seed)

    def coords(observation):
        x_E = net.encoder.forward(observation[None, :])
        point = net.head.to_ball(x_E) if net.mode.hyperbolic else x_E
        return [float(v) for v in point.data[0]]

    rows = []
    step, done = 0, False
    while not done:
        if step % every == 0:
            rows.append([0, step, *coords(env.observe())])
            walker = copy.deepcopy(env)
            for _ in range(every):
                if walker.done:
                    break
                walker.step(int(rng.integers(N_ACTIONS)))
            rows.append([1, step, *coords(walker.observe())])
        action = sample_actions(net.forward(env.observe()[None, :]).logits.data, rng)[0]
        _, _, done = env.step(int(action))
        step += 1

    sidecar = {"mode": net.mode.value, "value_gyroplane": None}
    if net.mode.hyperbolic and net.head.with_value:
        g = net.head.gyroplanes[net.head.n_actions]
        sidecar["value_gyroplane"] = {"p": g.p.data.tolist(), "w": g.w.data.tolist()}
    return rows, sidecar
