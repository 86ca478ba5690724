"""Reference schedulers: random, greedy (rate / age), round-robin and a model-free A2C."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .agent import MASK_LOGIT, project_choices
from .config import EnvConfig
from .env import (FROM_RSU, IDLE, NetworkState, ScheduleAction, V2XEnv,
                  expected_next)

V_RSU = -1
KINDS = ("random", "greedy-rate", "greedy-age", "round-robin", "model-free-ac")


def random_schedule(cfg: EnvConfig, state: NetworkState | None, rng) -> ScheduleAction:
    """Random vehicle order; each free vehicle picks uniformly among idle and every non-conflicting source."""
    V = cfg.n_vehicles
    used = np.zeros(V + 1, dtype=bool)
    choices = np.zeros(V, dtype=np.int64)
    for v in rng.permutation(V):
        if used[v]:
            continue
        options = [IDLE]
        if not used[V]:
            options.append(FROM_RSU)
        options += [2 + s for s in range(V) if s != v and not used[s]]
        c = options[rng.integers(len(options))]
        choices[v] = c
        if c == FROM_RSU:
            used[v] = used[V] = True
        elif c >= 2:
            used[v] = used[c - 2] = True
    return ScheduleAction.from_choices(choices)


def _expected_new_age(cfg, state, src, v, k):
    if src == V_RSU:
        gen = float(state.t)
    else:
        gen = state.stamp[src]
    if k <= 0 or gen <= state.stamp[v]:
        return state.age[v] + 1.0
    w = k / cfg.packets_per_slot
    return state.t - (w * gen + (1.0 - w) * state.stamp[v]) + 1.0


def link_values(cfg: EnvConfig, state: NetworkState, objective: str):
    """Candidate links ``(value, rx, tx)`` for the next slot; tx = -1 is the RSU."""
    if objective not in ("rate", "age"):
        raise ValueError(f"unknown greedy objective {objective!r}")
    V = cfg.n_vehicles
    table = expected_next(cfg, state)
    p, rl, rn = table["p_los"], table["rate_los"], table["rate_nlos"]
    out = []
    for v in range(V):
        for tx in [V_RSU] + [s for s in range(V) if s != v]:
            i = V if tx == V_RSU else tx
            if objective == "rate":
                val = p[i, v] * rl[i, v] + (1.0 - p[i, v]) * rn[i, v]
            else:
                cap = cfg.packets_per_slot if tx == V_RSU else state.inventory[tx]
                k_l = min(int(np.floor(rl[i, v])), cap)
                k_n = min(int(np.floor(rn[i, v])), cap)
                new = (p[i, v] * _expected_new_age(cfg, state, tx, v, k_l)
                       + (1.0 - p[i, v]) * _expected_new_age(cfg, state, tx, v, k_n))
                val = state.age[v] + 1.0 - new
            out.append((float(val), v, tx))
    return out


def greedy_schedule(cfg: EnvConfig, state: NetworkState, objective: str = "rate") -> ScheduleAction:
    """Repeatedly add the compatible link with the largest value (ties: lowest receiver, then transmitter)."""
    cands = sorted(link_values(cfg, state, objective), key=lambda c: (-c[0], c[1], c[2]))
    used = set()
    v2i, v2v = [], []
    for val, rx, tx in cands:
        if val <= 0:
            break
        if rx in used or tx in used:
            continue
        used.update((rx, tx))
        if tx == V_RSU:
            v2i.append(rx)
        else:
            v2v.append((tx, rx))
    return ScheduleAction(tuple(v2i), tuple(v2v))


def round_robin_schedule(cfg: EnvConfig, state: NetworkState) -> ScheduleAction:
    return ScheduleAction(v2i=(state.t % cfg.n_vehicles,))


# --------------------------------------------------------------- model-free

@dataclass
class A2CConfig:
    hidden: int = 64
    lr: float = 1e-3
    gamma: float = 0.99
    entropy_coef: float = 1e-2
    adam_eps: float = 1e-4
    clip_norm: float = 100.0
    reward_scale: float = 0.125


class ModelFreePolicy:
    """Advantage actor-critic on normalised real observations, same heads as the agent."""

    def __init__(self, cfg: EnvConfig, ac: A2CConfig | None = None, seed: int = 0):
        self.cfg, self.ac = cfg, ac or A2CConfig()
        V, C, D = cfg.n_vehicles, cfg.n_choices, cfg.obs_dim
        self.V, self.C = V, C
        rng = np.random.default_rng(seed)
        U = self.ac.hidden
        self.actor = dc.ParamStore(eps=self.ac.adam_eps)
        self.actor_sizes = dc.init_mlp(self.actor, rng, "actor", (D, U, U, V * C), out_scale=0.0)
        self.critic = dc.ParamStore(eps=self.ac.adam_eps)
        self.critic_sizes = dc.init_mlp(self.critic, rng, "critic", (D, U, U, 1), out_scale=0.1)
        mask = np.zeros((V, C))
        mask[np.arange(V), 2 + np.arange(V)] = MASK_LOGIT
        self.mask = mask

    def _logp(self, P, obs):
        logits = dc.mlp_forward(P, "actor", self.actor_sizes, obs)
        n = logits.shape[0]
        logits = dc.reshape(logits, (n, self.V, self.C))
        return dc.reshape(dc.log_softmax(logits, self.mask), (n * self.V, self.C))

    def probs(self, obs_norm) -> np.ndarray:
        lp = self._logp(self.actor.constants(), np.atleast_2d(obs_norm)).value
        return np.exp(lp).reshape(-1, self.V, self.C)

    def sample(self, obs_norm, rng):
        p = self.probs(obs_norm)[0]
        u = rng.random((self.V, 1))
        picked = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), self.C - 1)
        conf = p[np.arange(self.V), picked]
        return picked, project_choices(picked, conf)

    def act(self, obs_norm) -> ScheduleAction:
        p = self.probs(obs_norm)[0]
        picked = np.argmax(p, axis=1)
        return ScheduleAction.from_choices(project_choices(picked, p[np.arange(self.V), picked]))

    def update(self, obs, picked, rewards) -> dict:
        """One A2C step on a full episode of (obs, sampled choices, rewards)."""
        g, ret = 0.0, np.zeros(len(rewards))
        for t in reversed(range(len(rewards))):
            g = rewards[t] * self.ac.reward_scale + self.ac.gamma * g
            ret[t] = g
        obs = np.asarray(obs)
        PC = self.critic.leaves()
        v = dc.mlp_forward(PC, "critic", self.critic_sizes, obs)
        c_loss = dc.mean(dc.square(v - ret[:, None])) * 0.5
        adv = ret - v.value[:, 0]
        dc.backward_and_step(self.critic, c_loss, PC, self.ac.lr, self.ac.clip_norm)
        PA = self.actor.leaves()
        logp = self._logp(PA, obs)
        n = len(picked)
        sel = np.zeros((n * self.V, self.C))
        sel[np.arange(n * self.V), np.asarray(picked).reshape(-1)] = 1.0
        chosen = dc.reshape(dc.sum(logp * sel, axis=-1), (n, self.V))
        pg = dc.mean(dc.sum(chosen, axis=-1) * adv)
        ent = dc.mean(dc.sum(dc.exp(logp) * logp, axis=-1)) * -1.0
        a_loss = pg * -1.0 - ent * self.ac.entropy_coef
        dc.backward_and_step(self.actor, a_loss, PA, self.ac.lr, self.ac.clip_norm)
        return {"actor_loss": a_loss.item(), "critic_loss": c_loss.item()}


def modelfree_ac_train(cfg: EnvConfig, episodes: int, seed: int = 0,
                       ac: A2CConfig | None = None, callback=None) -> ModelFreePolicy:
    """Train on ``episodes`` real episodes (one update per episode) and return the policy."""
    policy = ModelFreePolicy(cfg, ac, seed)
    rng = np.random.default_rng(seed + 1)
    env = V2XEnv(cfg)
    for ep in range(episodes):
        obs = env.normalize(env.reset(int(rng.integers(2**31))))
        o_hist, c_hist, r_hist = [], [], []
        done = False
        while not done:
            picked, proj = policy.sample(obs, rng)
            o_hist.append(obs)
            c_hist.append(picked)
            raw, r, done = env.step(ScheduleAction.from_choices(proj))
            r_hist.append(r)
            obs = env.normalize(raw)
        diag = policy.update(o_hist, c_hist, r_hist)
        if callback is not None:
            callback(ep, float(np.mean(r_hist)), diag)
    return policy


def make_scheduler(kind: str, cfg: EnvConfig, rng=None, policy=None):
    """Callable ``(state, obs_norm) -> ScheduleAction`` for a baseline kind."""
    if kind == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return lambda state, obs: random_schedule(cfg, state, rng)
    if kind == "greedy-rate":
        return lambda state, obs: greedy_schedule(cfg, state, "rate")
    if kind == "greedy-age":
        return lambda state, obs: greedy_schedule(cfg, state, "age")
    if kind == "round-robin":
        return lambda state, obs: round_robin_schedule(cfg, state)
    if kind == "model-free-ac":
        if policy is None:
            raise ValueError("model-free-ac needs a trained policy")
        return lambda state, obs: policy.act(obs)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {KINDS}")
