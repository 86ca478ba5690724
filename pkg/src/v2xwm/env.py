"""Discrete-time mmWave V2X world with completeness-aware age of information.

Ages are tracked through freshness timestamps: a vehicle whose freshest
information was generated in slot ``U`` has age ``A = t - U`` at slot ``t``.
A partial delivery of ``k`` out of ``C_u`` packets blends the delivered
generation's timestamp with the receiver's own, weighted ``k / C_u``.

Per-vehicle schedule choices use the code ``0 = idle``, ``1 = receive from
the RSU``, ``2 + j = receive from vehicle j``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import _accel, channel
from ._accel import optional_njit
from .config import EnvConfig

IDLE = 0
FROM_RSU = 1
RSU = -1


class InfeasibleActionError(ValueError):
    pass


# ----------------------------------------------------------------- actions

@dataclass(frozen=True)
class ScheduleAction:
    """Directed links for one slot: RSU->vehicle receivers and (src, dst) V2V pairs."""
    v2i: tuple = ()
    v2v: tuple = ()

    @classmethod
    def from_choices(cls, choices) -> "ScheduleAction":
        v2i, v2v = [], []
        for v, c in enumerate(np.asarray(choices, dtype=np.int64)):
            if c == FROM_RSU:
                v2i.append(v)
            elif c >= 2 and c - 2 != v:
                v2v.append((int(c - 2), v))
        return cls(tuple(v2i), tuple(v2v))

    def to_choices(self, n_vehicles: int) -> np.ndarray:
        if not feasible(self, n_vehicles):
            raise InfeasibleActionError(f"infeasible schedule {self}")
        ch = np.zeros(n_vehicles, dtype=np.int64)
        for v in self.v2i:
            ch[v] = FROM_RSU
        for s, d in self.v2v:
            ch[d] = 2 + s
        return ch

    def encode(self, n_vehicles: int) -> np.ndarray:
        return encode_choices(self.to_choices(n_vehicles), n_vehicles)

    def links(self):
        return [(RSU, v) for v in self.v2i] + [tuple(p) for p in self.v2v]

    def to_json(self) -> dict:
        return {"v2i": [int(v) for v in self.v2i],
                "v2v": [[int(s), int(d)] for s, d in self.v2v]}


def encode_choices(choices, n_vehicles: int) -> np.ndarray:
    """Flat one-hot (V * (V+2)) action encoding fed to the world model."""
    choices = np.asarray(choices, dtype=np.int64)
    out = np.zeros((n_vehicles, n_vehicles + 2))
    out[np.arange(n_vehicles), choices] = 1.0
    return out.reshape(-1)


def feasible(action: ScheduleAction, n_vehicles: int) -> bool:
    """Node-disjoint, half-duplex, self-link-free and in range."""
    used = set()
    for tx, rx in action.links():
        if tx == rx:
            return False
        for node in (tx, rx):
            if node != RSU and not 0 <= node < n_vehicles:
                return False
            if node in used:
                return False
        used.add(tx)
        used.add(rx)
    return True


# ------------------------------------------------------------------- state

@dataclass
class NetworkState:
    t: int
    lane: np.ndarray
    x: np.ndarray
    speed: np.ndarray
    height: np.ndarray
    age: np.ndarray
    inventory: np.ndarray
    stamp: np.ndarray
    los: np.ndarray
    rng: np.random.Generator = field(repr=False)

    @property
    def n_vehicles(self) -> int:
        return len(self.x)

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)


@dataclass
class Observation:
    ages: np.ndarray        # (V,)
    tracing: np.ndarray     # (V, V, 7)
    locations: np.ndarray   # (V, 3), RSU-centred

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.ages, self.tracing.reshape(-1), self.locations.reshape(-1)])


def positions(cfg: EnvConfig, state: NetworkState, x=None) -> np.ndarray:
    """(V+1, 3) node positions with the RSU in the last row."""
    x = state.x if x is None else x
    lanes = np.asarray(cfg.lane_offsets)[state.lane]
    pos = np.column_stack([x, lanes, state.height])
    return np.vstack([pos, np.asarray(cfg.rsu_position, dtype=np.float64)])


# -------------------------------------------------------------- CAoI update

@optional_njit(cache=True)
def _caoi_nb(age, stamp, inventory, choices, rates, t, c_u):
    V = age.shape[0]
    new_age = np.empty(V)
    new_stamp = stamp.copy()
    new_inv = inventory.copy()
    for v in range(V):
        c = choices[v]
        k = 0
        gen = 0.0
        if c == 1:
            k = min(int(np.floor(rates[V, v])), c_u)
            gen = float(t)
        elif c >= 2 and c - 2 != v:
            s = c - 2
            k = min(int(np.floor(rates[s, v])), inventory[s])
            gen = stamp[s]
        if k > 0 and gen > stamp[v]:
            w = k / c_u
            new_stamp[v] = w * gen + (1.0 - w) * stamp[v]
            new_inv[v] = k
            new_age[v] = t - new_stamp[v] + 1.0
        else:
            new_age[v] = age[v] + 1.0
    return new_age, new_stamp, new_inv


def _caoi_np(age, stamp, inventory, choices, rates, t, c_u):
    V = age.shape[0]
    idx = np.arange(V)
    src = np.where(choices == FROM_RSU, V, np.clip(choices - 2, 0, V))
    active = (choices == FROM_RSU) | ((choices >= 2) & (choices - 2 != idx))
    floor_r = np.floor(rates[src, idx]).astype(np.int64)
    cap = np.where(choices == FROM_RSU, c_u, inventory[np.minimum(src, V - 1)])
    k = np.where(active, np.minimum(floor_r, cap), 0)
    gen = np.where(choices == FROM_RSU, float(t), stamp[np.minimum(src, V - 1)])
    take = (k > 0) & (gen > stamp)
    w = k / c_u
    blended = w * gen + (1.0 - w) * stamp
    new_stamp = np.where(take, blended, stamp)
    new_inv = np.where(take, k, inventory)
    new_age = np.where(take, t - new_stamp + 1.0, age + 1.0)
    return new_age, new_stamp, new_inv.astype(inventory.dtype)


def caoi_update(age, stamp, inventory, choices, rates, t: int, c_u: int, use_numba=None):
    """One slot of CAoI bookkeeping.

    ``rates`` is the (V+1, V+1) realised packet-rate table [tx, rx] with the
    RSU last. A delivery is applied only when at least one packet arrives and
    the delivered generation is strictly fresher than the receiver's own.
    Returns new (age, stamp, inventory).
    """
    fn = _accel.select(_caoi_nb, _caoi_np, use_numba)
    return fn(np.asarray(age, dtype=np.float64), np.asarray(stamp, dtype=np.float64),
              np.asarray(inventory, dtype=np.int64), np.asarray(choices, dtype=np.int64),
              np.asarray(rates, dtype=np.float64), int(t), int(c_u))


def reward_from_ages(ages, age_max: float) -> float:
    ages = np.asarray(ages, dtype=np.float64)
    over = ages > age_max
    return float(-np.mean(ages - over * (age_max - ages)))


# --------------------------------------------------------------- dynamics

def _draw_los(cfg: EnvConfig, table, prev_los, rng) -> np.ndarray:
    n = table["p_los"].shape[0]
    u_fresh = rng.random((n, n))
    u_keep = rng.random((n, n))
    p = table["p_los"]
    if cfg.blockage_mode == "fixed":
        draw = p >= 0.5
    else:
        draw = u_fresh < p
        if cfg.blockage_mode == "markov" and prev_los is not None:
            draw = np.where(u_keep < cfg.blockage_stay, prev_los, draw)
    upper = np.triu(draw, 1)
    los = upper | upper.T
    los[n - 1, :] = draw[n - 1, :]
    los[:, n - 1] = False
    np.fill_diagonal(los, False)
    return los


def _observe(cfg: EnvConfig, state: NetworkState, table=None) -> Observation:
    pos = positions(cfg, state)
    if table is None:
        table = channel.link_table(pos, cfg.channel_params())
    gain = np.where(state.los, table["gain_los"], table["gain_nlos"])
    gain_db = 10.0 * np.log10(np.maximum(gain, 1e-300))
    tracing = channel.tracing_tensor(pos, gain_db)
    rsu = np.asarray(cfg.rsu_position, dtype=np.float64)
    loc = pos[:-1].copy()
    loc[:, 0] -= rsu[0]
    loc[:, 1] -= rsu[1]
    return Observation(state.age.copy(), tracing, loc)


def reset(cfg: EnvConfig, seed: int):
    """Fresh episode: vehicles on random lanes/positions, speeds U(min, max)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    V = cfg.n_vehicles
    lane = rng.integers(0, len(cfg.lane_offsets), size=V)
    x = rng.uniform(0.0, cfg.road_length, size=V)
    speed = rng.uniform(cfg.speed_min, cfg.speed_max, size=V)
    state = NetworkState(
        t=0, lane=lane, x=x, speed=speed,
        height=np.full(V, cfg.vehicle_height),
        age=np.ones(V),
        inventory=np.full(V, cfg.packets_per_slot, dtype=np.int64),
        stamp=np.full(V, -1.0),
        los=np.zeros((V + 1, V + 1), dtype=bool),
        rng=rng,
    )
    table = channel.link_table(positions(cfg, state), cfg.channel_params())
    state.los = _draw_los(cfg, table, None, rng)
    return state, _observe(cfg, state, table)


def realised_rates(table, los) -> np.ndarray:
    return np.where(los, table["rate_los"], table["rate_nlos"])


def step(cfg: EnvConfig, state: NetworkState, action: ScheduleAction):
    """Advance one slot. Returns (new_state, observation, reward, done); ``state`` is untouched."""
    V = cfg.n_vehicles
    if not feasible(action, V):
        raise InfeasibleActionError(f"infeasible schedule {action}")
    if state.t >= cfg.period:
        raise RuntimeError("episode already finished")
    choices = action.to_choices(V)
    new = state.copy()
    new.x = np.mod(state.x + state.speed * cfg.slot_s, cfg.road_length)
    table = channel.link_table(positions(cfg, new), cfg.channel_params())
    new.los = _draw_los(cfg, table, state.los, new.rng)
    rates = realised_rates(table, new.los)
    new.age, new.stamp, new.inventory = caoi_update(
        state.age, state.stamp, state.inventory, choices, rates, state.t, cfg.packets_per_slot)
    new.t = state.t + 1
    reward = reward_from_ages(new.age, cfg.age_max)
    return new, _observe(cfg, new, table), reward, new.t >= cfg.period


def expected_next(cfg: EnvConfig, state: NetworkState):
    """Link table for the positions of the next slot (used by oracle baselines)."""
    x = np.mod(state.x + state.speed * cfg.slot_s, cfg.road_length)
    return channel.link_table(positions(cfg, state, x), cfg.channel_params())


# ----------------------------------------------------------- normalisation

def _scales(cfg: EnvConfig):
    rsu = np.asarray(cfg.rsu_position, dtype=np.float64)
    width = float(cfg.lane_offsets[0] + cfg.lane_offsets[-1])
    max_d = cfg.road_length + width + rsu[2]
    return rsu, width, max_d / channel.SPEED_OF_LIGHT


def normalize_observation(obs: Observation, cfg: EnvConfig) -> np.ndarray:
    """Map an observation into [-1, 1] per feature family (clipping out-of-range values)."""
    rsu, width, t_scale = _scales(cfg)
    lo, hi = cfg.gain_window_db
    ages = np.clip(obs.ages / cfg.age_max, 0.0, 2.0) - 1.0
    tr = obs.tracing.copy()
    tr[..., 0] = tr[..., 0] / np.pi
    tr[..., 2] = tr[..., 2] / np.pi
    tr[..., 1] = tr[..., 1] * 2.0 / np.pi - 1.0
    tr[..., 3] = tr[..., 3] * 2.0 / np.pi - 1.0
    tr[..., 4:6] = 2.0 * tr[..., 4:6] / t_scale - 1.0
    tr[..., 6] = 2.0 * (tr[..., 6] - lo) / (hi - lo) - 1.0
    loc = obs.locations.copy()
    loc[:, 0] = loc[:, 0] / (0.5 * cfg.road_length)
    loc[:, 1] = 2.0 * loc[:, 1] / width - 1.0
    loc[:, 2] = loc[:, 2] / rsu[2]
    vec = np.concatenate([ages, tr.reshape(-1), loc.reshape(-1)])
    return np.clip(vec, -1.0, 1.0)


def denormalize_observation(vec: np.ndarray, cfg: EnvConfig) -> Observation:
    rsu, width, t_scale = _scales(cfg)
    lo, hi = cfg.gain_window_db
    V = cfg.n_vehicles
    vec = np.asarray(vec, dtype=np.float64)
    ages = (vec[:V] + 1.0) * cfg.age_max
    tr = vec[V:V + 7 * V * V].reshape(V, V, 7).copy()
    tr[..., 0] *= np.pi
    tr[..., 2] *= np.pi
    tr[..., 1] = (tr[..., 1] + 1.0) * np.pi / 2.0
    tr[..., 3] = (tr[..., 3] + 1.0) * np.pi / 2.0
    tr[..., 4:6] = (tr[..., 4:6] + 1.0) * t_scale / 2.0
    tr[..., 6] = (tr[..., 6] + 1.0) * (hi - lo) / 2.0 + lo
    loc = vec[V + 7 * V * V:].reshape(V, 3).copy()
    loc[:, 0] *= 0.5 * cfg.road_length
    loc[:, 1] = (loc[:, 1] + 1.0) * width / 2.0
    loc[:, 2] *= rsu[2]
    return Observation(ages, tr, loc)


# ----------------------------------------------------------------- wrapper

class V2XEnv:
    """Stateful convenience wrapper that also records an episode trace."""

    def __init__(self, cfg: EnvConfig):
        cfg.validate()
        self.cfg = cfg
        self.state = None
        self.trace = []

    def reset(self, seed: int) -> Observation:
        self.state, obs = reset(self.cfg, seed)
        self.trace = []
        return obs

    def step(self, action: ScheduleAction):
        self.state, obs, reward, done = step(self.cfg, self.state, action)
        self.trace.append({
            "slot": int(self.state.t),
            "ages": [float(a) for a in self.state.age],
            "action": action.to_json(),
            "reward": float(reward),
            "los": [[int(b) for b in row] for row in self.state.los],
        })
        return obs, reward, done

    def normalize(self, obs: Observation) -> np.ndarray:
        return normalize_observation(obs, self.cfg)


def write_trace(records, path) -> None:
    """Line-delimited JSON, one record per slot."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
