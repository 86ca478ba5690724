"""Episodic FIFO buffer that serves fixed-length training windows."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class EpisodeRecord:
    """Row ``t`` holds o[t], the encoded action that led to it, the reward it carried and a done flag.

    Row 0 carries a zero action and zero reward.
    """
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        if n == 0:
            raise ValueError("empty episode")
        if not (len(self.actions) == len(self.rewards) == len(self.dones) == n):
            raise ValueError("episode fields have different lengths")
        dones = np.asarray(self.dones, dtype=bool)
        if not dones[-1] or dones[:-1].any():
            raise ValueError("exactly one terminal flag, on the last row")

    def __len__(self):
        return len(self.obs)


@dataclass
class SequenceBatch:
    obs: np.ndarray       # (B, L, D)
    actions: np.ndarray   # (B, L, A)
    rewards: np.ndarray   # (B, L)
    dones: np.ndarray     # (B, L)
    starts: np.ndarray    # (B, 2) -> (episode slot in buffer, offset)


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.episodes = deque()
        self.steps = 0

    def __len__(self):
        return self.steps

    def append(self, ep: EpisodeRecord) -> None:
        if len(ep) > self.capacity:
            raise ValueError("episode longer than buffer capacity")
        self.episodes.append(ep)
        self.steps += len(ep)
        while self.steps > self.capacity:
            old = self.episodes.popleft()
            self.steps -= len(old)

    def sample(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> SequenceBatch:
        """Uniform over every in-episode window of length ``seq_len``."""
        counts = np.array([max(len(e) - seq_len + 1, 0) for e in self.episodes])
        total = int(counts.sum())
        if total == 0:
            raise ValueError(f"no stored episode has {seq_len} steps")
        flat = rng.integers(0, total, size=batch_size)
        bounds = np.cumsum(counts)
        ep_idx = np.searchsorted(bounds, flat, side="right")
        offsets = flat - (bounds[ep_idx] - counts[ep_idx])
        obs, act, rew, done = [], [], [], []
        for e, o in zip(ep_idx, offsets):
            ep = self.episodes[e]
            sl = slice(o, o + seq_len)
            obs.append(ep.obs[sl])
            act.append(ep.actions[sl])
            rew.append(ep.rewards[sl])
            done.append(ep.dones[sl])
        return SequenceBatch(np.stack(obs), np.stack(act), np.stack(rew),
                             np.stack(done), np.column_stack([ep_idx, offsets]))

    def save(self, path) -> None:
        arrays = {"capacity": np.array(self.capacity), "n_episodes": np.array(len(self.episodes))}
        for i, ep in enumerate(self.episodes):
            arrays[f"ep{i}/obs"] = ep.obs
            arrays[f"ep{i}/actions"] = ep.actions
            arrays[f"ep{i}/rewards"] = ep.rewards
            arrays[f"ep{i}/dones"] = ep.dones
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            buf = cls(int(data["capacity"]))
            for i in range(int(data["n_episodes"])):
                buf.append(EpisodeRecord(data[f"ep{i}/obs"], data[f"ep{i}/actions"],
                                         data[f"ep{i}/rewards"], data[f"ep{i}/dones"]))
        return buf
