"""Experiment configuration.

Three sections mirror the hyperparameter table (environment, world model,
actor-critic) plus a ``run`` section for seeds and evaluation cadence. Two
presets ship: ``desk`` (default, one CPU core) and ``paper`` (full-scale
values, runnable but slow).

Config files are YAML with the same nesting; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import ChannelParams


@dataclass
class EnvConfig:
    n_vehicles: int = 4
    bandwidth_hz: float = 1e8
    packet_bits: float = 4e7          # 5 MB
    carrier_hz: float = 28e9
    tx_power_dbm: float = 23.0        # RSU and vehicles
    noise_psd_dbm_hz: float = -174.0
    slot_s: float = 0.1
    period: int = 100
    age_max: float = 8.0
    speed_min: float = 15.0
    speed_max: float = 20.0
    packets_per_slot: int = 4         # C_u
    road_length: float = 200.0
    lane_offsets: tuple = (3.5, 7.0, 10.5)
    rsu_position: tuple = (100.0, 0.0, 10.0)
    vehicle_height: float = 1.5
    blocker_mean_m: float = 1.6
    blocker_std_m: float = 0.3
    vehicle_density: float | None = None   # None -> n_vehicles / road_length
    los_decay: float = 0.0071
    beam_gain_db: float = 20.0
    nlos_excess_db: float = 20.0
    nlos_exponent: float = 3.19
    blockage_mode: str = "iid"        # iid | markov | fixed
    blockage_stay: float = 0.9
    gain_window_db: tuple = (-160.0, -40.0)

    def validate(self):
        if self.n_vehicles < 2:
            raise ValueError("need at least two vehicles")
        if self.road_length <= 0:
            raise ValueError("road length must be positive")
        if self.period < 1 or self.packets_per_slot < 1:
            raise ValueError("period and packets_per_slot must be >= 1")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("bad speed range")
        if self.age_max <= 0:
            raise ValueError("age_max must be positive")
        if self.blockage_mode not in ("iid", "markov", "fixed"):
            raise ValueError(f"unknown blockage_mode {self.blockage_mode!r}")
        if not 0.0 <= self.blockage_stay <= 1.0:
            raise ValueError("blockage_stay must be a probability")
        self.channel_params()

    def channel_params(self) -> ChannelParams:
        density = self.vehicle_density
        if density is None:
            density = self.n_vehicles / self.road_length
        return ChannelParams(
            carrier_hz=self.carrier_hz, bandwidth_hz=self.bandwidth_hz,
            noise_psd_dbm_hz=self.noise_psd_dbm_hz, rsu_power_dbm=self.tx_power_dbm,
            vehicle_power_dbm=self.tx_power_dbm, packet_bits=self.packet_bits,
            slot_s=self.slot_s, blocker_mean_m=self.blocker_mean_m,
            blocker_std_m=self.blocker_std_m, vehicle_density=density,
            los_decay=self.los_decay, beam_gain_db=self.beam_gain_db,
            nlos_excess_db=self.nlos_excess_db, nlos_exponent=self.nlos_exponent,
        )

    @property
    def obs_dim(self) -> int:
        V = self.n_vehicles
        return V + 7 * V * V + 3 * V

    @property
    def n_choices(self) -> int:
        """Per-vehicle categorical: idle, from RSU, from vehicle 0..V-1."""
        return self.n_vehicles + 2

    @property
    def action_dim(self) -> int:
        return self.n_vehicles * self.n_choices


@dataclass
class WorldModelConfig:
    seed_episodes: int = 5
    seq_len: int = 16
    train_episodes: int = 200
    max_episode_len: int = 100
    collect_interval: int = 100
    buffer_size: int = 1_000_000
    batch_size: int = 16
    det_size: int = 32
    stoch_size: int = 32
    hidden: int = 64
    dyn_weight: float = 1.0
    rep_weight: float = 1.0
    lr: float = 1e-3
    adam_eps: float = 1e-4
    clip_norm: float = 100.0
    std_floor: float = 1e-3
    obs_std: float = 1.0
    age_obs_std: float | None = None   # None -> obs_std for the age features too
    reward_std: float = 1.0

    def validate(self):
        for name in ("seq_len", "batch_size", "det_size", "stoch_size", "hidden",
                     "max_episode_len", "buffer_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed_episodes < 1:
            raise ValueError("need at least one seed episode")
        if self.lr <= 0 or self.std_floor <= 0 or self.obs_std <= 0 or self.reward_std <= 0:
            raise ValueError("learning rate, std floor and likelihood stds must be positive")
        if self.age_obs_std is not None and self.age_obs_std <= 0:
            raise ValueError("age_obs_std must be positive")


@dataclass
class ActorCriticConfig:
    horizon: int = 10
    explore_noise: float = 0.3
    lam: float = 0.95
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    adam_eps: float = 1e-4
    clip_norm: float = 100.0
    entropy_coef: float = 3e-4
    target_ema: float = 0.02
    use_target: bool = True
    hidden: int = 64
    reward_scale: float = 0.125
    reinforce_mix: float = 0.0        # 0: pure straight-through, 1: pure likelihood-ratio
    return_norm_decay: float = 0.99   # EMA of the 5-95 percentile range of lambda-returns

    def validate(self):
        if not 0.0 <= self.reinforce_mix <= 1.0:
            raise ValueError("reinforce_mix must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1:
            raise ValueError("gamma in (0,1], lambda in [0,1]")
        if not 0 <= self.explore_noise <= 1:
            raise ValueError("explore_noise is a probability")


@dataclass
class RunConfig:
    seed: int = 0
    eval_every: int = 25
    eval_episodes: int = 5
    eval_seed_base: int = 1_000_000
    keep_best: bool = True            # restore the best eval checkpoint after training


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    actor_critic: ActorCriticConfig = field(default_factory=ActorCriticConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        self.env.validate()
        self.world_model.validate()
        self.actor_critic.validate()
        if self.world_model.max_episode_len < self.env.period:
            raise ValueError("max_episode_len shorter than the period T")
        if self.world_model.seq_len > self.env.period + 1:
            raise ValueError("seq_len longer than an episode")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_preset() -> ExperimentConfig:
    """CPU-sized defaults with a tight age likelihood and a likelihood-ratio actor."""
    cfg = ExperimentConfig(
        world_model=WorldModelConfig(train_episodes=160, age_obs_std=0.05),
        actor_critic=ActorCriticConfig(reinforce_mix=1.0, actor_lr=1e-3),
        run=RunConfig(eval_every=10),
    )
    return cfg.validate()


def paper_preset() -> ExperimentConfig:
    cfg = ExperimentConfig(
        env=EnvConfig(n_vehicles=8),
        world_model=WorldModelConfig(
            seq_len=64, train_episodes=1000, batch_size=50,
            det_size=256, stoch_size=256, hidden=256),
        actor_critic=ActorCriticConfig(horizon=30, hidden=256),
    )
    return cfg.validate()


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def _merge(obj, updates: dict, path: str):
    valid = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in updates.items():
        if key not in valid:
            raise KeyError(f"unknown config key {path}{key!r}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise TypeError(f"{path}{key} must be a mapping")
            _merge(cur, val, f"{path}{key}.")
        else:
            if isinstance(cur, tuple) and isinstance(val, list):
                val = tuple(val)
            setattr(obj, key, val)


def from_dict(data: dict, preset: str = "desk") -> ExperimentConfig:
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    _merge(cfg, data or {}, "")
    return cfg.validate()


def load(path, preset: str = "desk") -> ExperimentConfig:
    with open(Path(path), encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise TypeError("config root must be a mapping")
    return from_dict(data, preset)


def dump(cfg: ExperimentConfig, path) -> None:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x
    with open(Path(path), "w", encoding="utf-8") as fh:
        yaml.safe_dump(plain(cfg.to_dict()), fh, sort_keys=False)
