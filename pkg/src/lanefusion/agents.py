"""Value-based agents (DQN, DDQN, D3QN) over the dueling Q-net.

All three share the replay buffer, the training loop, and soft target
maintenance; they differ only in the bootstrap rule and the exploration
mechanism. DQN/DDQN run the network with zero noise and explore with an
epsilon-greedy schedule; D3QN samples fresh factorized noise per decision
and per gradient step, so the network structure is identical across kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .sim import OBS_DIM, Action, ConfigError

AGENT_KINDS = ("dqn", "ddqn", "d3qn")


class TrainingDiverged(RuntimeError):
    """Raised when the TD loss or a gradient goes non-finite."""


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward_env: float
    reward_shaped: float
    next_obs: np.ndarray
    done: bool


@dataclass
class AgentConfig:
    kind: str = "d3qn"
    gamma: float = 0.99
    lr: float = 0.001
    batch_size: int = 32
    tau: float = 0.005
    warmup_transitions: int = 1000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.3
    train_every: int = 1
    use_shaped_reward: bool = False
    hidden: int = 256
    dtype: str = "float32"

    def validate(self) -> None:
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"unknown agent kind {self.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.train_every < 1:
            raise ConfigError("train_every must be >= 1")

    def epsilon(self, episode_fraction: float) -> float:
        """Linear decay over the first epsilon_fraction of training; zero for
        the noisy-net agent, which explores through its sigma parameters."""
        if self.kind == "d3qn":
            return 0.0
        t = min(max(episode_fraction, 0.0) / self.epsilon_fraction, 1.0)
        return self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    reward_env: np.ndarray
    reward_shaped: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring over flat arrays; FIFO eviction once full."""

    def __init__(self, capacity: int = 100_000, obs_dim: int = OBS_DIM):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        self.cursor = 0
        self.size = 0
        self._obs = np.zeros((capacity, obs_dim))
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._reward_env = np.zeros(capacity)
        self._reward_shaped = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, obs_dim))
        self._done = np.zeros(capacity)

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.cursor
        self._obs[i] = t.obs
        self._actions[i] = t.action
        self._reward_env[i] = t.reward_env
        self._reward_shaped[i] = t.reward_shaped
        self._next_obs[i] = t.next_obs
        self._done[i] = float(t.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            obs=self._obs[idx],
            actions=self._actions[idx],
            reward_env=self._reward_env[idx],
            reward_shaped=self._reward_shaped[idx],
            next_obs=self._next_obs[idx],
            done=self._done[idx],
        )


def target_from_q(kind: str, rewards: np.ndarray, dones: np.ndarray, gamma: float,
                  q_eval_next: np.ndarray, q_target_next: np.ndarray) -> np.ndarray:
    """Bootstrap rule on explicit Q-tables. DQN takes the target net's own
    maximum; DDQN and D3QN pick the action with the evaluation net and read
    its value from the target net."""
    if kind not in AGENT_KINDS:
        raise ConfigError(f"unknown agent kind {kind!r}")
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if kind == "dqn":
        next_val = q_target_next.max(axis=1)
    else:
        best = np.argmax(q_eval_next, axis=1)
        next_val = q_target_next[np.arange(len(best)), best]
    return rewards + gamma * (1.0 - dones) * next_val


def compute_targets(kind: str, batch: Batch, eval_params: net.NetworkParams,
                    target_params: net.NetworkParams, gamma: float,
                    use_shaped_reward: bool = False) -> np.ndarray:
    """TD targets for a sampled batch; both bootstrap passes run noise-free."""
    zero = net.zero_noise(eval_params)
    q_eval_next = net.forward(eval_params, batch.next_obs, zero)
    q_target_next = net.forward(target_params, batch.next_obs, zero)
    rewards = batch.reward_shaped if use_shaped_reward else batch.reward_env
    return target_from_q(kind, rewards, batch.done, gamma, q_eval_next, q_target_next)


class Agent:
    """Owns the evaluation/target parameter pair, the optimizer state, and a
    private rng for exploration and batch sampling."""

    def __init__(self, config: AgentConfig, seed: int, obs_dim: int = OBS_DIM,
                 action_count: int = len(Action)):
        config.validate()
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.eval_params = net.init_network(obs_dim, action_count, self.rng,
                                            hidden=config.hidden,
                                            dtype=np.dtype(config.dtype))
        self.target_params = net.clone(self.eval_params)
        self.adam = net.init_adam_state(self.eval_params)
        self.train_steps = 0

    @property
    def noisy(self) -> bool:
        return self.config.kind == "d3qn"

    def _q(self, obs: np.ndarray, noise) -> np.ndarray:
        try:
            return net.forward(self.eval_params, obs, noise)
        except (ValueError, FloatingPointError) as exc:
            raise TrainingDiverged(str(exc)) from None

    def select_action(self, obs: np.ndarray, episode_fraction: float,
                      bias: np.ndarray | None = None) -> int:
        """Pick an action; `bias` is added to the Q-values before the argmax
        (advisor Q-bias coupling) and never touches the stored parameters."""
        if self.noisy:
            q = self._q(obs, net.sample_noise(self.eval_params, self.rng))
            return int(np.argmax(q if bias is None else q + bias))
        if self.rng.random() < self.config.epsilon(episode_fraction):
            return int(self.rng.integers(len(Action)))
        q = self._q(obs, net.zero_noise(self.eval_params))
        return int(np.argmax(q if bias is None else q + bias))

    def greedy_action(self, obs: np.ndarray) -> int:
        return int(np.argmax(self._q(obs, net.zero_noise(self.eval_params))))

    def exploration_level(self, episode_fraction: float) -> float:
        """Epsilon for the greedy agents, mean |sigma| for the noisy one."""
        if self.noisy:
            return net.mean_sigma(self.eval_params)
        return self.config.epsilon(episode_fraction)

    def train_step(self, buffer: ReplayBuffer):
        """One gradient step off the buffer; returns the loss, or None while
        the buffer is still below the warmup size."""
        cfg = self.config
        if len(buffer) < cfg.warmup_transitions:
            return None
        batch = buffer.sample(cfg.batch_size, self.rng)
        try:
            targets = compute_targets(cfg.kind, batch, self.eval_params,
                                      self.target_params, cfg.gamma,
                                      cfg.use_shaped_reward)
            noise = (net.sample_noise(self.eval_params, self.rng) if self.noisy
                     else net.zero_noise(self.eval_params))
            loss, grads = net.backward(self.eval_params, batch.obs,
                                       batch.actions, targets, noise)
        except (ValueError, FloatingPointError) as exc:
            raise TrainingDiverged(str(exc)) from None
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at train step {self.train_steps}")
        self.eval_params, self.adam = net.adam_step(self.eval_params, grads,
                                                    self.adam, cfg.lr)
        self.target_params = net.soft_update(self.target_params,
                                             self.eval_params, cfg.tau)
        self.train_steps += 1
        return loss


CHECKPOINT_VERSION = 1


def save_agent(path, agent: Agent, buffer: ReplayBuffer | None = None) -> None:
    """Both parameter sets plus optimizer state and buffer cursor metadata in
    one npz; buffer contents themselves are not persisted."""
    data = {"format_version": np.array(CHECKPOINT_VERSION),
            "adam_t": np.array(agent.adam.t),
            "train_steps": np.array(agent.train_steps),
            "kind": np.array(agent.config.kind)}
    trees = {"eval": agent.eval_params, "target": agent.target_params,
             "adam_m": agent.adam.m, "adam_v": agent.adam.v}
    for prefix, tree in trees.items():
        for name, arr in zip(net.LEAF_NAMES, net.leaves(tree)):
            data[f"{prefix}/{name}"] = arr
    if buffer is not None:
        data["buffer_cursor"] = np.array(buffer.cursor)
        data["buffer_size"] = np.array(buffer.size)
    np.savez(path, **data)


def load_agent(path, config: AgentConfig, seed: int) -> Agent:
    agent = Agent(config, seed)
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        stored_kind = str(data["kind"])
        if stored_kind != config.kind:
            raise ValueError(f"checkpoint holds a {stored_kind} agent, "
                             f"config asks for {config.kind}")
        def tree(prefix):
            return net.from_leaves([np.array(data[f"{prefix}/{n}"])
                                    for n in net.LEAF_NAMES])
        agent.eval_params = tree("eval")
        agent.target_params = tree("target")
        agent.adam = net.AdamState(m=tree("adam_m"), v=tree("adam_v"),
                                   t=int(data["adam_t"]))
        agent.train_steps = int(data["train_steps"])
    return agent
