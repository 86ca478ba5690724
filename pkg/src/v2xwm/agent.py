"""Actor-critic trained inside the world model's imagination.

The actor emits one categorical per vehicle over ``V + 2`` choices (idle,
from RSU, from vehicle j; the self entry is masked). Sampled choices are
projected onto a feasible schedule and fed to the latent dynamics as one-hot
codes with a straight-through gradient to the pre-projection probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from . import diffcore as dc
from ._accel import optional_njit
from .config import ActorCriticConfig, EnvConfig
from .diffcore import Tensor
from .env import ScheduleAction, encode_choices
from .worldmodel import LatentState, WorldModel

MASK_LOGIT = -1e9


# -------------------------------------------------------------- projection

@optional_njit(cache=True)
def _project_nb(choices, conf):
    N, V = choices.shape
    out = np.zeros((N, V), dtype=np.int64)
    used = np.zeros(V + 1, dtype=np.bool_)
    for n in range(N):
        used[:] = False
        order = np.argsort(-conf[n], kind="mergesort")
        for r in range(V):
            v = order[r]
            c = choices[n, v]
            if c == 1:
                if not used[v] and not used[V]:
                    used[v] = True
                    used[V] = True
                    out[n, v] = 1
            elif c >= 2 and c - 2 != v and c - 2 < V:
                s = c - 2
                if not used[v] and not used[s]:
                    used[v] = True
                    used[s] = True
                    out[n, v] = c
    return out


def _project_np(choices, conf):
    N, V = choices.shape
    rows = np.arange(N)
    out = np.zeros((N, V), dtype=np.int64)
    used = np.zeros((N, V + 1), dtype=bool)
    order = np.argsort(-conf, axis=1, kind="stable")
    for r in range(V):
        v = order[:, r]
        c = choices[rows, v]
        src = np.where(c == 1, V, np.clip(c - 2, 0, V))
        valid = (c == 1) | ((c >= 2) & (c - 2 != v) & (c - 2 < V))
        ok = valid & ~used[rows, v] & ~used[rows, src]
        out[rows[ok], v[ok]] = c[ok]
        used[rows[ok], v[ok]] = True
        used[rows[ok], src[ok]] = True
    return out


def project_choices(choices, conf, use_numba=None) -> np.ndarray:
    """Batched projection of per-vehicle choices onto feasible schedules.

    Vehicles are visited in descending confidence (ties: lower index first);
    a choice survives only if neither endpoint nor the RSU beam is taken.
    Works on (N, V) arrays; a single (V,) row is accepted too.
    """
    choices = np.asarray(choices, dtype=np.int64)
    conf = np.asarray(conf, dtype=np.float64)
    single = choices.ndim == 1
    if single:
        choices, conf = choices[None], conf[None]
    fn = _accel.select(_project_nb, _project_np, use_numba)
    out = fn(np.ascontiguousarray(choices), np.ascontiguousarray(conf))
    return out[0] if single else out


def project_to_feasible(choices, conf) -> ScheduleAction:
    return ScheduleAction.from_choices(project_choices(choices, conf))


# ---------------------------------------------------------------- λ-return

def lambda_return(rewards, values, gamma: float, lam: float):
    """Backward recursion ``V_t = r_t + g((1-l) v_{t+1} + l V_{t+1})``, ``V_H = v_H``.

    ``rewards`` has H entries, ``values`` H + 1 (the last is the bootstrap).
    Works on floats, arrays or Tensors. Returns the H targets.
    """
    H = len(rewards)
    if H < 1:
        raise ValueError("need at least one reward")
    if len(values) != H + 1:
        raise ValueError(f"need {H + 1} values for {H} rewards, got {len(values)}")
    if not 0 < gamma <= 1 or not 0 <= lam <= 1:
        raise ValueError("gamma in (0, 1], lambda in [0, 1]")
    out = [None] * H
    # the final step bootstraps on v_H alone, written so the blend cannot round
    nxt = rewards[H - 1] + gamma * values[H]
    out[H - 1] = nxt
    for t in reversed(range(H - 1)):
        nxt = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return out


# ------------------------------------------------------------------ agent

@dataclass
class Imagined:
    feats: list = field(default_factory=list)       # s~[0..H] features (Tensors)
    choices: list = field(default_factory=list)     # projected (N, V) per step
    rewards: list = field(default_factory=list)     # scaled r~[0..H-1] Tensors (N, 1)
    values: list = field(default_factory=list)      # target-critic v(s~[0..H]) Tensors (N, 1)
    entropy: list = field(default_factory=list)
    chosen_logp: list = field(default_factory=list)  # (N, 1) log-prob of the sampled choices
    targets: list = field(default_factory=list)


class Agent:
    def __init__(self, env_cfg: EnvConfig, feat_dim: int, cfg: ActorCriticConfig, seed: int = 0):
        self.env_cfg, self.cfg = env_cfg, cfg
        V, C = env_cfg.n_vehicles, env_cfg.n_choices
        self.V, self.C = V, C
        U = cfg.hidden
        rng = np.random.default_rng(seed)
        self.actor = dc.ParamStore(eps=cfg.adam_eps)
        self.actor_sizes = dc.init_mlp(self.actor, rng, "actor", (feat_dim, U, U, V * C), out_scale=0.1)
        self.critic = dc.ParamStore(eps=cfg.adam_eps)
        self.critic_sizes = dc.init_mlp(self.critic, rng, "critic", (feat_dim, U, U, 1), out_scale=0.0)
        self.target = self.critic.copy()
        mask = np.zeros((V, C))
        mask[np.arange(V), 2 + np.arange(V)] = MASK_LOGIT
        self.mask = mask
        self.value_scale = 1.0 / (1.0 - cfg.gamma) if cfg.gamma < 1 else float(env_cfg.period)
        self.return_range = 0.0

    # ------------------------------------------------------------ heads

    def log_probs(self, PA, feat) -> Tensor:
        """Masked per-vehicle log-probabilities, shape (N*V, V+2)."""
        logits = dc.mlp_forward(PA, "actor", self.actor_sizes, feat)
        n = logits.shape[0]
        logits = dc.reshape(logits, (n, self.V, self.C))
        return dc.reshape(dc.log_softmax(logits, self.mask), (n * self.V, self.C))

    def value(self, PC, feat) -> Tensor:
        return dc.mlp_forward(PC, "critic", self.critic_sizes, feat) * self.value_scale

    # ------------------------------------------------------ imagination

    def imagine(self, wm: WorldModel, PW, PA, PT, start_h, start_z, rng, fixed=None) -> Imagined:
        """Roll the latent dynamics H steps under the actor.

        ``fixed`` optionally supplies per-step (sampled, projected, anchor_probs)
        so the rollout becomes a deterministic function of the actor
        parameters (used for finite-difference checks).
        """
        N = start_h.shape[0]
        V, C = self.V, self.C
        state = LatentState(Tensor(start_h), Tensor(start_z))
        out = Imagined()
        rows = np.arange(N * V)
        for tau in range(self.cfg.horizon):
            feat = state.features()
            out.feats.append(feat)
            logp = self.log_probs(PA, feat)
            probs = dc.exp(logp)
            if fixed is None:
                p = probs.value
                u = rng.random((N * V, 1))
                picked = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), C - 1)
                picked = picked.reshape(N, V)
                conf = p[rows, picked.reshape(-1)].reshape(N, V)
                proj = project_choices(picked, conf)
                anchor = p
            else:
                picked, proj, anchor = fixed[tau]
            sel = np.zeros((N * V, C))
            sel[rows, np.asarray(picked).reshape(-1)] = 1.0
            out.chosen_logp.append(dc.reshape(dc.sum(logp * sel, axis=-1), (N, V)))
            onehot = np.zeros((N * V, C))
            onehot[rows, proj.reshape(-1)] = 1.0
            st = onehot + (probs - anchor)
            action = dc.reshape(st, (N, V * C))
            ent = dc.sum(probs * logp, axis=-1) * -1.0
            out.entropy.append(ent)
            out.choices.append((picked, proj, anchor))
            noise = rng.standard_normal((N, wm.Z))
            state = wm.imagine_step(PW, state, action, noise)
            out.rewards.append(wm.reward(PW, state.features()) * self.cfg.reward_scale)
        out.feats.append(state.features())
        out.values = [self.value(PT, f) for f in out.feats]
        out.targets = lambda_return(out.rewards, out.values, self.cfg.gamma, self.cfg.lam)
        return out

    def actor_loss(self, traj: Imagined) -> Tensor:
        """``-(1-rho) mean V_lambda - rho mean log pi * adv - eta H``.

        The first term backpropagates through the latent rollout
        (straight-through actions); the second is the likelihood-ratio form
        with advantage ``sg(V_lambda - v)``.
        """
        rho = self.cfg.reinforce_mix
        scale = 1.0 / max(1.0, self.return_range)
        ent = dc.mean(dc.concat(traj.entropy, axis=0))
        loss = ent * -self.cfg.entropy_coef
        if rho < 1.0:
            loss = loss - dc.mean(dc.concat(traj.targets, axis=0)) * ((1.0 - rho) * scale)
        if rho > 0.0:
            adv = np.concatenate([t.value - v.value for t, v in zip(traj.targets, traj.values[:-1])])
            logp = dc.sum(dc.concat(traj.chosen_logp, axis=0), axis=-1)
            loss = loss - dc.mean(logp * adv[:, 0]) * (rho * scale)
        return loss

    def _track_return_range(self, traj: Imagined) -> None:
        """Running 5-95 percentile spread of the targets; divides the actor objective."""
        ret = np.concatenate([t.value.ravel() for t in traj.targets])
        spread = float(np.percentile(ret, 95) - np.percentile(ret, 5))
        d = self.cfg.return_norm_decay
        self.return_range = spread if self.return_range == 0.0 else d * self.return_range + (1 - d) * spread

    def critic_loss(self, PC, traj: Imagined) -> Tensor:
        feats = dc.stop_gradient(dc.concat(traj.feats[:-1], axis=0))
        targets = dc.stop_gradient(dc.concat(traj.targets, axis=0))
        return dc.mean(dc.square(self.value(PC, feats) - targets)) * 0.5

    def update(self, wm: WorldModel, start_h, start_z, rng) -> dict:
        """One actor step and one critic step on a fresh imagined batch; world model frozen."""
        PW = wm.store.constants()
        PA = self.actor.leaves()
        PT = (self.target if self.cfg.use_target else self.critic).constants()
        traj = self.imagine(wm, PW, PA, PT, start_h, start_z, rng)
        self._track_return_range(traj)
        a_loss = self.actor_loss(traj)
        a_norm = dc.backward_and_step(self.actor, a_loss, PA, self.cfg.actor_lr, self.cfg.clip_norm)
        PC = self.critic.leaves()
        c_loss = self.critic_loss(PC, traj)
        c_norm = dc.backward_and_step(self.critic, c_loss, PC, self.cfg.critic_lr, self.cfg.clip_norm)
        if self.cfg.use_target:
            k = self.cfg.target_ema
            for name, arr in self.critic.params.items():
                self.target.params[name] = (1.0 - k) * self.target.params[name] + k * arr
        return {"actor_loss": a_loss.item(), "critic_loss": c_loss.item(),
                "actor_grad": a_norm, "critic_grad": c_norm,
                "imag_return": float(np.mean(traj.targets[0].value)),
                "entropy": float(np.mean(np.concatenate([e.value for e in traj.entropy])))}

    # ------------------------------------------------------------- acting

    def action_probs(self, feat) -> np.ndarray:
        """(N, V, V+2) action probabilities for numpy features."""
        feat = np.atleast_2d(feat)
        lp = self.log_probs(self.actor.constants(), feat).value
        return np.exp(lp).reshape(feat.shape[0], self.V, self.C)

    def choose(self, feat, explore: bool = False, rng=None, noise=None) -> np.ndarray:
        """Projected per-vehicle choices for a single latent feature vector."""
        probs = self.action_probs(feat)[0]
        return choose_from_probs(probs, explore, rng,
                                 self.cfg.explore_noise if noise is None else noise)

    def act(self, feat, explore: bool = False, rng=None) -> ScheduleAction:
        return ScheduleAction.from_choices(self.choose(feat, explore, rng))

    # -------------------------------------------------------- checkpoints

    def state_dict(self) -> dict:
        out = {}
        for prefix, store in (("actor", self.actor), ("critic", self.critic), ("target", self.target)):
            for k, v in store.state_dict().items():
                out[f"{prefix}:{k}"] = v
        return out

    def load_state_dict(self, state: dict) -> None:
        for prefix, store in (("actor", self.actor), ("critic", self.critic), ("target", self.target)):
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ":")}
            store.load_state_dict(sub)


def sample_choices(probs: np.ndarray, explore: bool, rng, noise: float) -> np.ndarray:
    """Per-vehicle argmax, each resampled uniformly over its non-self choices with prob ``noise``."""
    V, C = probs.shape
    picked = np.argmax(probs, axis=1)
    if explore:
        if rng is None:
            raise ValueError("exploration needs an rng")
        flip = rng.random(V) < noise
        draw = rng.integers(0, C - 1, size=V)
        # skip the masked self entry 2 + v
        draw = np.where(draw >= 2 + np.arange(V), draw + 1, draw)
        picked = np.where(flip, draw, picked)
    return picked


def choose_from_probs(probs: np.ndarray, explore: bool, rng, noise: float) -> np.ndarray:
    """Sampled choices projected onto a feasible schedule, confidence = their probability."""
    picked = sample_choices(probs, explore, rng, noise)
    conf = probs[np.arange(len(picked)), picked]
    return project_choices(picked, conf)


# --------------------------------------------------------- online acting

class LatentController:
    """Tracks the posterior latent along a real episode and acts on it."""

    def __init__(self, wm: WorldModel, agent: Agent):
        self.wm, self.agent = wm, agent
        self.reset()

    def reset(self):
        self.h = np.zeros((1, self.wm.H))
        self.z = np.zeros((1, self.wm.Z))
        self.prev_action = np.zeros(self.wm.action_dim)

    def observe(self, obs_norm, noise=None):
        self.h, self.z = self.wm.filter_step(self.h, self.z, self.prev_action, obs_norm, noise)

    def imagine(self, noise=None):
        self.h, self.z = self.wm.predict_step(self.h, self.z, self.prev_action, noise)

    def features(self) -> np.ndarray:
        return np.concatenate([self.h, self.z], axis=-1)

    def act(self, explore=False, rng=None) -> ScheduleAction:
        choices = self.agent.choose(self.features(), explore, rng)
        self.prev_action = encode_choices(choices, self.agent.V)
        return ScheduleAction.from_choices(choices)


@dataclass
class PredictionResult:
    actions: list              # ScheduleAction per imagined slot c .. T-1
    rewards: np.ndarray        # predicted rewards for those slots
    observations: np.ndarray   # decoded normalised observations


def predict_and_schedule(wm: WorldModel, agent: Agent, prefix_obs, prefix_actions,
                         horizon: int) -> PredictionResult:
    """Filter a real prefix, then schedule open-loop on imagined latents.

    ``prefix_obs[t]`` is the normalised o[t] seen before real action
    ``prefix_actions[t]`` (t < c). Returns the ``horizon`` actions for slots
    c .. c + horizon - 1 with the predicted rewards and observations.
    """
    if len(prefix_obs) == 0 or len(prefix_obs) != len(prefix_actions):
        raise ValueError("need a non-empty prefix of matching observations and actions")
    ctl = LatentController(wm, agent)
    V = agent.V
    for obs, act in zip(prefix_obs, prefix_actions):
        ctl.observe(obs)
        ctl.prev_action = act.encode(V)
    actions, rewards, recon = [], [], []
    for _ in range(horizon):
        ctl.imagine()
        rewards.append(float(wm.predict_reward(ctl.h, ctl.z)[0]))
        recon.append(wm.predict_obs(ctl.h, ctl.z)[0])
        actions.append(ctl.act())
    return PredictionResult(actions, np.array(rewards),
                            np.array(recon).reshape(horizon, wm.obs_dim))
