"""Training loop, evaluation protocol, prediction-mode evaluation and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import config as config_mod
from .agent import Agent, LatentController, predict_and_schedule
from .baselines import make_scheduler, random_schedule
from .config import ExperimentConfig
from .env import ScheduleAction, V2XEnv
from .replay import EpisodeRecord, ReplayBuffer
from .worldmodel import WorldModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("episode", "phase", "env_steps", "avg_caoi", "avg_reward", "violation_rate",
                 "eval_caoi", "wm_loss", "obs_mse", "actor_loss", "critic_loss")


@dataclass
class EpisodeResult:
    ages: np.ndarray            # (T, V) ages after each slot
    rewards: np.ndarray         # (T,)
    actions: list               # ScheduleAction per slot
    obs: list = field(default_factory=list)       # normalised o[0..T]
    trace: list = field(default_factory=list)

    @property
    def avg_caoi(self) -> float:
        return float(self.ages.mean())

    def violation_rate(self, age_max: float) -> float:
        return float(np.mean(self.ages > age_max))


class AgentPolicy:
    """Closed-loop world-model policy: filter the latent, act greedily (or explore)."""

    def __init__(self, wm: WorldModel, agent: Agent, explore=False, rng=None, sample_latent=False):
        self.ctl = LatentController(wm, agent)
        self.explore, self.rng, self.sample_latent = explore, rng, sample_latent

    def reset(self):
        self.ctl.reset()

    def __call__(self, state, obs_norm) -> ScheduleAction:
        noise = None
        if self.sample_latent:
            noise = self.rng.standard_normal((1, self.ctl.wm.Z))
        self.ctl.observe(obs_norm, noise)
        return self.ctl.act(self.explore, self.rng)


def run_episode(cfg: ExperimentConfig, seed: int, policy) -> EpisodeResult:
    """One full period with ``policy(state, obs_norm) -> ScheduleAction``."""
    env = V2XEnv(cfg.env)
    obs = env.normalize(env.reset(seed))
    if hasattr(policy, "reset"):
        policy.reset()
    ages, rewards, actions, seen = [], [], [], [obs]
    done = False
    while not done:
        action = policy(env.state, obs)
        raw, r, done = env.step(action)
        obs = env.normalize(raw)
        seen.append(obs)
        ages.append(env.state.age.copy())
        rewards.append(r)
        actions.append(action)
    return EpisodeResult(np.array(ages), np.array(rewards), actions, seen, env.trace)


def to_record(res: EpisodeResult, n_vehicles: int) -> EpisodeRecord:
    T = len(res.actions)
    acts = np.zeros((T + 1, n_vehicles * (n_vehicles + 2)))
    for t, a in enumerate(res.actions):
        acts[t + 1] = a.encode(n_vehicles)
    rew = np.concatenate([[0.0], res.rewards])
    done = np.zeros(T + 1, dtype=bool)
    done[-1] = True
    return EpisodeRecord(np.array(res.obs), acts, rew, done)


# ---------------------------------------------------------------- training

class Trainer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        e, w = cfg.env, cfg.world_model
        seq = np.random.SeedSequence(cfg.run.seed)
        s_wm, s_ag, s_train, s_collect, s_env = seq.spawn(5)
        self.wm = WorldModel(e.obs_dim, e.action_dim, w, seed=int(s_wm.generate_state(1)[0]),
                             n_ages=e.n_vehicles)
        self.agent = Agent(e, w.det_size + w.stoch_size, cfg.actor_critic,
                           seed=int(s_ag.generate_state(1)[0]))
        self.train_rng = np.random.default_rng(s_train)
        self.collect_rng = np.random.default_rng(s_collect)
        self.env_seeds = np.random.default_rng(s_env)
        self.buffer = ReplayBuffer(w.buffer_size)
        self.env_steps = 0
        self.gradient_steps = 0
        self.best = None   # (eval_caoi, episode index, snapshot)

    def _collect(self, policy) -> EpisodeResult:
        res = run_episode(self.cfg, int(self.env_seeds.integers(2**31 - 1)), policy)
        self.buffer.append(to_record(res, self.cfg.env.n_vehicles))
        self.env_steps += len(res.actions)
        return res

    def eval_seeds(self, n=None):
        n = self.cfg.run.eval_episodes if n is None else n
        return [self.cfg.run.eval_seed_base + i for i in range(n)]

    def greedy_eval(self, n=None) -> float:
        pol = AgentPolicy(self.wm, self.agent)
        return float(np.mean([run_episode(self.cfg, s, pol).avg_caoi for s in self.eval_seeds(n)]))

    def snapshot(self) -> dict:
        return {"wm": {k: np.array(v) for k, v in self.wm.store.state_dict().items()},
                "agent": {k: np.array(v) for k, v in self.agent.state_dict().items()},
                "return_range": self.agent.return_range}

    def restore(self, state: dict) -> None:
        self.wm.store.load_state_dict(state["wm"])
        self.agent.load_state_dict(state["agent"])
        self.agent.return_range = state["return_range"]

    def train_iter(self):
        w = self.cfg.world_model
        diag = {}
        for _ in range(w.collect_interval):
            batch = self.buffer.sample(w.batch_size, w.seq_len, self.train_rng)
            wm_diag, (h, z) = self.wm.train_step(batch, self.train_rng)
            ac_diag = self.agent.update(self.wm, h, z, self.train_rng)
            self.gradient_steps += 1
            for k, v in {**wm_diag, **ac_diag}.items():
                diag.setdefault(k, []).append(float(v))
        return {k: float(np.mean(v)) for k, v in diag.items()}

    def train(self, episodes=None, on_row=None):
        """Seed episodes, then (gradient phase, exploration episode) per training episode.

        With ``run.keep_best`` the parameters that scored the lowest eval CAoI
        (on the held-out eval seeds) are restored once training ends.
        """
        cfg = self.cfg
        n_train = cfg.world_model.train_episodes if episodes is None else episodes
        rows = []
        start = time.perf_counter()

        def emit(row):
            row["wall_clock"] = time.perf_counter() - start
            rows.append(row)
            if on_row is not None:
                on_row(row)

        rnd = np.random.default_rng(self.collect_rng.integers(2**63))
        for i in range(cfg.world_model.seed_episodes):
            res = self._collect(lambda state, obs: random_schedule(cfg.env, state, rnd))
            emit(self._row(len(rows), "seed", res, {}, None))
        for ep in range(n_train):
            diag = self.train_iter()
            pol = AgentPolicy(self.wm, self.agent, explore=True, rng=self.collect_rng,
                              sample_latent=True)
            res = self._collect(pol)
            ev = None
            if cfg.run.eval_every > 0 and ((ep + 1) % cfg.run.eval_every == 0 or ep + 1 == n_train):
                ev = self.greedy_eval()
                if cfg.run.keep_best and (self.best is None or ev < self.best[0]):
                    self.best = (ev, len(rows), self.snapshot())
            emit(self._row(len(rows), "train", res, diag, ev))
        if cfg.run.keep_best and self.best is not None:
            self.restore(self.best[2])
        return rows

    def _row(self, idx, phase, res, diag, ev):
        e = self.cfg.env
        return {
            "episode": idx, "phase": phase, "env_steps": self.env_steps,
            "avg_caoi": res.avg_caoi, "avg_reward": float(np.mean(res.rewards)),
            "violation_rate": res.violation_rate(e.age_max),
            "eval_caoi": "" if ev is None else ev,
            "wm_loss": diag.get("loss", ""), "obs_mse": diag.get("obs_mse", ""),
            "actor_loss": diag.get("actor_loss", ""), "critic_loss": diag.get("critic_loss", ""),
        }


def write_metrics(rows, path) -> None:
    """metrics.csv holds only deterministic columns; wall clock goes to timing.csv."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    with open(path.with_name("timing.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(("episode", "wall_clock"))
        for r in rows:
            wr.writerow((r["episode"], f"{r['wall_clock']:.3f}"))


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def train(cfg: ExperimentConfig, out_dir, episodes=None, on_row=None) -> Trainer:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg)
    rows = trainer.train(episodes, on_row)
    write_metrics(rows, out / "metrics.csv")
    save_checkpoint(out / "checkpoint.npz", cfg, trainer.wm, trainer.agent)
    final = [r for r in rows if r["eval_caoi"] != ""]
    summary = {"episodes": len(rows), "env_steps": trainer.env_steps,
               "gradient_steps": trainer.gradient_steps,
               "final_eval_caoi": final[-1]["eval_caoi"] if final else None,
               "selected_episode": trainer.best[1] if trainer.best else None,
               "selected_eval_caoi": trainer.best[0] if trainer.best else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return trainer


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, cfg: ExperimentConfig, wm: WorldModel, agent: Agent) -> None:
    """npz container: version, YAML config, world-model and actor/critic parameter groups."""
    buf = io.StringIO()
    yaml.safe_dump(_plain(cfg.to_dict()), buf, sort_keys=True)
    arrays = {"format_version": np.array(CHECKPOINT_VERSION),
              "config_yaml": np.array(buf.getvalue())}
    for k, v in wm.store.state_dict().items():
        arrays[f"wm:{k}"] = v
    for k, v in agent.state_dict().items():
        arrays[f"agent:{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = config_mod.from_dict(yaml.safe_load(str(data["config_yaml"])))
        arrays = {k: data[k] for k in data.files}
    e, w = cfg.env, cfg.world_model
    wm = WorldModel(e.obs_dim, e.action_dim, w, n_ages=e.n_vehicles)
    wm.store.load_state_dict({k[3:]: v for k, v in arrays.items() if k.startswith("wm:")})
    agent = Agent(e, w.det_size + w.stoch_size, cfg.actor_critic)
    agent.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("agent:")})
    return cfg, wm, agent


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x


# -------------------------------------------------------------- evaluation

def episode_seeds(n: int, base: int):
    return [base + i for i in range(n)]


def evaluate(cfg: ExperimentConfig, policies: dict, episodes: int, seed_base: int = 10_000) -> dict:
    """Run every policy on the same env seeds.

    ``policies`` maps a name to a factory returning a fresh policy callable.
    Returns per-policy mean/std plus the per-episode values for paired tests.
    """
    seeds = episode_seeds(episodes, seed_base)
    out = {}
    for name, factory in policies.items():
        caoi, rew = [], []
        for s in seeds:
            res = run_episode(cfg, s, factory())
            caoi.append(res.avg_caoi)
            rew.append(float(np.mean(res.rewards)))
        out[name] = {"caoi_mean": float(np.mean(caoi)), "caoi_std": float(np.std(caoi)),
                     "reward_mean": float(np.mean(rew)), "reward_std": float(np.std(rew)),
                     "caoi": caoi, "reward": rew}
    return out


def policy_factories(cfg: ExperimentConfig, kinds, wm=None, agent=None, mf_policy=None, seed=0):
    fac = {}
    for kind in kinds:
        if kind == "agent":
            fac[kind] = lambda: AgentPolicy(wm, agent)
        elif kind == "random":
            fac[kind] = (lambda k=kind: make_scheduler(k, cfg.env, np.random.default_rng(seed)))
        else:
            fac[kind] = (lambda k=kind: make_scheduler(k, cfg.env, policy=mf_policy))
    return fac


def paired_test(a, b) -> dict:
    """One-sided paired t-test of mean(a) < mean(b)."""
    a, b = np.asarray(a), np.asarray(b)
    diff = a - b
    if np.all(diff == 0):
        return {"mean_diff": 0.0, "t": 0.0, "p_value": 1.0}
    res = stats.ttest_rel(a, b, alternative="less")
    return {"mean_diff": float(diff.mean()), "t": float(res.statistic), "p_value": float(res.pvalue)}


class OpenLoopPolicy:
    """Closed loop for the first ``prefix`` slots, then the world model's open-loop plan."""

    def __init__(self, wm: WorldModel, agent: Agent, prefix: int, period: int):
        self.wm, self.agent, self.prefix, self.period = wm, agent, prefix, period
        self.reset()

    def reset(self):
        self.t = 0
        self.obs, self.acts, self.plan = [], [], None
        self.closed = AgentPolicy(self.wm, self.agent)

    def __call__(self, state, obs_norm) -> ScheduleAction:
        t = self.t
        self.t += 1
        if t < self.prefix:
            self.obs.append(obs_norm)
            action = self.closed(state, obs_norm)
            self.acts.append(action)
            return action
        if self.plan is None:
            res = predict_and_schedule(self.wm, self.agent, self.obs, self.acts,
                                       self.period - self.prefix)
            self.plan = res.actions
        return self.plan[t - self.prefix]


def predict_mode_eval(cfg: ExperimentConfig, wm: WorldModel, agent: Agent, prefix: int,
                      episodes: int, seed_base: int = 10_000) -> dict:
    """Closed-loop agent vs open-loop prediction mode vs random on paired seeds."""
    T = cfg.env.period
    if not 1 <= prefix < T:
        raise ValueError(f"prefix length must be in [1, {T - 1}]")
    fac = {
        "closed_loop": lambda: AgentPolicy(wm, agent),
        "prediction": lambda: OpenLoopPolicy(wm, agent, prefix, T),
        "random": lambda: make_scheduler("random", cfg.env, np.random.default_rng(0)),
    }
    out = evaluate(cfg, fac, episodes, seed_base)
    out["prefix"] = prefix
    out["prediction_vs_random"] = paired_test(out["prediction"]["caoi"], out["random"]["caoi"])
    return out
