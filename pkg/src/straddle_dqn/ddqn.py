"""Double-DQN training: replay, exploration schedule, targets, Adam, training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import MarketState, StraddleEnv
from .qnet import (NetConfig, QNetworkParams, backward, forward, init_params, read_container,
                   save_params, stack_states, write_container)

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "epsilon", "loss", "episode_return", "buffer_len")


@dataclass(frozen=True)
class Transition:
    state: MarketState
    action: int
    reward: float
    next_state: MarketState
    terminal: bool

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")
        if self.action not in (0, 1):
            raise ValueError(f"bad action {self.action}")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 64
    capacity: int = 100_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    sync_every: int = 1_000
    warmup: int = 2_000
    clip_norm: float = 10.0
    total_steps: int = 50_000
    seed: int = 0
    train_every: int = 1
    log_every: int = 100
    checkpoint_every: int = 0  # 0: final checkpoint only
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size > self.capacity:
            raise ValueError("batch size exceeds buffer capacity")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if min(self.batch_size, self.capacity, self.sync_every, self.train_every, self.log_every) < 1:
            raise ValueError("sizes and intervals must be >= 1")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        if k > len(self._items):
            raise ValueError(f"cannot sample {k} from buffer of {len(self._items)}")
        idx = rng.choice(len(self._items), size=k, replace=False)
        return [self._items[i] for i in idx]

    def contents(self) -> list[Transition]:
        """Oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]


def buffer_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def buffer_sample(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(k, rng)


def epsilon_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def double_q_target(batch: Sequence[Transition], online: QNetworkParams, target: QNetworkParams,
                    gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, else ``r + gamma * Q_target(s', argmax Q_online(s'))``.

    Terminal next states are never evaluated.
    """
    y = np.array([t.reward for t in batch], dtype=np.float64)
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live and gamma != 0.0:
        nxt = stack_states([batch[i].next_state for i in live])
        q_on, _ = forward(nxt, online)
        q_tg, _ = forward(nxt, target)
        best = np.argmax(q_on, axis=1)  # first max wins: ties go to action 0
        y[live] += gamma * q_tg[np.arange(len(live)), best]
    return y


class Adam:
    def __init__(self, params: QNetworkParams, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def update(self, params: QNetworkParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params.tensors[k] -= lr_t * m / (np.sqrt(v) + self.eps)

    def save(self, path: str | Path, config: NetConfig) -> None:
        tensors = {f"adam.m/{k}": v for k, v in self.m.items()}
        tensors.update({f"adam.v/{k}": v for k, v in self.v.items()})
        tensors["adam.step"] = np.array([float(self.t)])
        tensors["adam.hyper"] = np.array([self.lr, self.beta1, self.beta2, self.eps])
        write_container(path, config, tensors)

    @classmethod
    def load(cls, path: str | Path, params: QNetworkParams) -> "Adam":
        _, tensors = read_container(path)
        lr, b1, b2, eps = tensors["adam.hyper"]
        opt = cls(params, lr, b1, b2, eps)
        opt.t = int(tensors["adam.step"][0])
        for k in opt.m:
            opt.m[k][...] = tensors[f"adam.m/{k}"]
            opt.v[k][...] = tensors[f"adam.v/{k}"]
        return opt


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; returns the new norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm > 0:
        s = max_norm / total
        for g in grads.values():
            g *= s
        return total * s
    return total


def huber(x: np.ndarray, delta: float = 1.0) -> np.ndarray:
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def train_step(online: QNetworkParams, target: QNetworkParams, batch: Sequence[Transition],
               opt: Adam, cfg: TrainConfig) -> tuple[float, float]:
    """One Huber-loss update on the taken actions. Returns (loss, clipped grad norm)."""
    y = double_q_target(batch, online, target, cfg.gamma)
    states = stack_states([t.state for t in batch])
    actions = np.array([t.action for t in batch])
    Q, cache = forward(states, online)
    rows = np.arange(len(batch))
    diff = Q[rows, actions] - y
    loss = float(huber(diff).mean())
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss}: |Q|max={np.nanmax(np.abs(Q))}, |y|max={np.nanmax(np.abs(y))}")
    dQ = np.zeros_like(Q)
    dQ[rows, actions] = np.clip(diff, -1.0, 1.0) / len(batch)
    grads = backward(cache, dQ, online)
    norm = clip_global_norm(grads, cfg.clip_norm)
    opt.update(online, grads)
    return loss, norm


def greedy_action(state: MarketState, params: QNetworkParams) -> int:
    Q, _ = forward(stack_states([state]), params)
    return int(np.argmax(Q[0]))


@dataclass
class TrainResult:
    online: QNetworkParams
    checkpoint: Path | None
    log_path: Path | None
    episode_returns: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def train(env_factory: Callable[[np.random.Generator], StraddleEnv], net_cfg: NetConfig,
          cfg: TrainConfig, out_dir: str | Path | None = None,
          on_sync: Callable[[int, QNetworkParams, QNetworkParams], None] | None = None) -> TrainResult:
    """Epsilon-greedy Double-DQN loop; deterministic for a fixed ``cfg.seed``.

    Writes ``train_log.csv`` and ``checkpoint.bin`` (+ ``checkpoint.opt``) into
    ``out_dir`` when given.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_env, rng_act, rng_replay = (np.random.Generator(np.random.PCG64(s)) for s in seeds)
    online = init_params(net_cfg, rng_init)
    target = online.copy()
    opt = Adam(online, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    buffer = ReplayBuffer(cfg.capacity)
    env = env_factory(rng_env)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.csv").open("w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)

    result = TrainResult(online, None, out / "train_log.csv" if out else None)
    state = env.reset()
    ep_return = 0.0
    last_return = None
    last_loss = None
    try:
        for step in range(cfg.total_steps):
            eps = epsilon_at(step, cfg)
            if rng_act.random() < eps:
                action = int(rng_act.integers(2))
            else:
                action = greedy_action(state, online)
            next_state, reward, terminal, _ = env.step(action)
            buffer.push(Transition(state, action, reward, next_state, terminal))
            ep_return += reward
            if terminal:
                last_return = ep_return
                result.episode_returns.append(ep_return)
                ep_return = 0.0
                state = env.reset()
            else:
                state = next_state

            if step >= cfg.warmup and step % cfg.train_every == 0 and len(buffer) >= cfg.batch_size:
                batch = buffer.sample(cfg.batch_size, rng_replay)
                last_loss, _ = train_step(online, target, batch, opt, cfg)
                result.losses.append(last_loss)
            if (step + 1) % cfg.sync_every == 0:
                target.assign(online)
                if on_sync is not None:
                    on_sync(step, online, target)
            if writer is not None and (step + 1) % cfg.log_every == 0:
                writer.writerow([step + 1, _fmt(eps), _fmt(last_loss), _fmt(last_return), len(buffer)])
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_params(online, out / f"checkpoint_{step + 1}.bin")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        result.checkpoint = out / "checkpoint.bin"
        save_params(online, result.checkpoint)
        opt.save(out / "checkpoint.opt", net_cfg)
    return result
