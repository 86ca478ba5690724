"""Recurrent state-space world model.

    h[t]  = GRU(h[t-1], [z[t-1], a[t-1]])       deterministic state
    z[t]  ~ q(z | h[t], o[t])                    posterior (encoder)
    z~[t] ~ p(z | h[t])                          prior (dynamics)
    r~[t], o^[t] from [h[t], z[t]]               reward head, decoder

Trained with  L = L_pred + w_dyn KL[sg(q) || p] + w_rep KL[q || sg(p)].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import WorldModelConfig
from .diffcore import DiagGaussian, Tensor
from .replay import SequenceBatch

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LatentState:
    h: Tensor
    z: Tensor
    prior: DiagGaussian | None = None
    post: DiagGaussian | None = None

    def features(self) -> Tensor:
        return dc.concat([self.h, self.z], axis=-1)

    def detach(self) -> "LatentState":
        return LatentState(
            dc.stop_gradient(self.h), dc.stop_gradient(self.z),
            None if self.prior is None else self.prior.detach(),
            None if self.post is None else self.post.detach())


class WorldModel:
    def __init__(self, obs_dim: int, action_dim: int, cfg: WorldModelConfig, seed: int = 0,
                 n_ages: int = 0):
        self.obs_dim, self.action_dim, self.cfg = obs_dim, action_dim, cfg
        # per-dimension decoder scale; the leading n_ages entries are the age features
        self.obs_std = np.full(obs_dim, float(cfg.obs_std))
        if cfg.age_obs_std is not None:
            self.obs_std[:n_ages] = cfg.age_obs_std
        H, Z, U = cfg.det_size, cfg.stoch_size, cfg.hidden
        self.H, self.Z = H, Z
        rng = np.random.default_rng(seed)
        self.store = dc.ParamStore(eps=cfg.adam_eps)
        dc.init_gru(self.store, rng, "gru", Z + action_dim, H)
        self.enc_sizes = dc.init_mlp(self.store, rng, "enc", (H + obs_dim, U, 2 * Z))
        self.prior_sizes = dc.init_mlp(self.store, rng, "prior", (H, U, 2 * Z))
        self.dec_sizes = dc.init_mlp(self.store, rng, "dec", (H + Z, U, U, obs_dim))
        self.rew_sizes = dc.init_mlp(self.store, rng, "rew", (H + Z, U, 1))

    # parameter groups, used by routing checks and checkpoints
    GROUPS = ("gru", "enc", "prior", "dec", "rew")

    def group(self, name: str):
        return [k for k in self.store.names() if k.split(".")[0] == name]

    def params(self, trainable=False) -> dict:
        return self.store.leaves() if trainable else self.store.constants()

    def initial(self, batch: int) -> LatentState:
        return LatentState(Tensor(np.zeros((batch, self.H))), Tensor(np.zeros((batch, self.Z))))

    # ------------------------------------------------------------- steps

    def _recur(self, P, prev: LatentState, action) -> Tensor:
        return dc.recurrent_cell(P, "gru", prev.h, dc.concat([prev.z, action], axis=-1))

    def prior_dist(self, P, h) -> DiagGaussian:
        raw = dc.mlp_forward(P, "prior", self.prior_sizes, h)
        return DiagGaussian.from_raw(raw, self.Z, self.cfg.std_floor)

    def post_dist(self, P, h, obs) -> DiagGaussian:
        raw = dc.mlp_forward(P, "enc", self.enc_sizes, dc.concat([h, obs], axis=-1))
        return DiagGaussian.from_raw(raw, self.Z, self.cfg.std_floor)

    def observe_step(self, P, prev: LatentState, action, obs, noise) -> LatentState:
        """Consume an observation: recurrence, prior, posterior, posterior sample."""
        obs = dc.as_tensor(obs)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        h = self._recur(P, prev, action)
        prior = self.prior_dist(P, h)
        post = self.post_dist(P, h, obs)
        return LatentState(h, dc.gaussian_sample_reparam(post, noise), prior, post)

    def imagine_step(self, P, prev: LatentState, action, noise) -> LatentState:
        """Advance without an observation, sampling from the prior."""
        h = self._recur(P, prev, action)
        prior = self.prior_dist(P, h)
        return LatentState(h, dc.gaussian_sample_reparam(prior, noise), prior, None)

    def decode(self, P, feat) -> Tensor:
        return dc.mlp_forward(P, "dec", self.dec_sizes, feat)

    def reward(self, P, feat) -> Tensor:
        return dc.mlp_forward(P, "rew", self.rew_sizes, feat)

    # -------------------------------------------------------------- loss

    def unroll(self, P, batch: SequenceBatch, rng, sample=True, with_prior=True):
        """Posterior filtering over a batch of windows.

        The prior is not needed by the recurrence, so ``with_prior=False``
        skips it and leaves it for one batched call over all steps.
        """
        B, L, _ = batch.obs.shape
        state = self.initial(B)
        states = []
        for t in range(L):
            noise = rng.standard_normal((B, self.Z)) if sample else np.zeros((B, self.Z))
            if with_prior:
                state = self.observe_step(P, state, batch.actions[:, t], batch.obs[:, t], noise)
            else:
                h = self._recur(P, state, batch.actions[:, t])
                post = self.post_dist(P, h, batch.obs[:, t])
                state = LatentState(h, dc.gaussian_sample_reparam(post, noise), None, post)
            states.append(state)
        return states

    def loss_terms(self, P, batch: SequenceBatch, rng):
        """Per-term losses (means over batch and time) plus the posterior states.

        The time-major (L*B) posterior and prior are returned as ``post`` and ``prior``.
        """
        B, L, D = batch.obs.shape
        states = self.unroll(P, batch, rng, with_prior=False)
        feat = dc.concat([s.features() for s in states], axis=0)          # (L*B, H+Z)
        obs = np.concatenate([batch.obs[:, t] for t in range(L)], axis=0)
        rew = np.concatenate([batch.rewards[:, t] for t in range(L)])[:, None]
        so, sr = self.obs_std, self.cfg.reward_std
        recon = self.decode(P, feat)
        obs_err = dc.square((recon - obs) * (1.0 / so))
        rew_err = dc.square((self.reward(P, feat) - rew) * (1.0 / sr))
        const = 0.5 * (D * LOG_2PI + 2 * np.sum(np.log(so))) + 0.5 * (LOG_2PI + 2 * np.log(sr))
        pred = dc.mean(dc.sum(obs_err, axis=-1) + dc.sum(rew_err, axis=-1)) * 0.5 + const
        post = DiagGaussian(dc.concat([s.post.mean for s in states], axis=0),
                            dc.concat([s.post.std for s in states], axis=0))
        prior = self.prior_dist(P, dc.concat([s.h for s in states], axis=0))
        kl_dyn = dc.kl_diag_gaussian(post.detach(), prior)
        kl_rep = dc.kl_diag_gaussian(post, prior.detach())
        terms = {
            "pred": pred,
            "dyn": dc.mean(kl_dyn),
            "rep": dc.mean(kl_rep),
            "obs_mse": float(np.mean((recon.value - obs) ** 2)),
            "post": post,
            "prior": prior,
        }
        return terms, states

    def rssm_loss(self, P, batch: SequenceBatch, rng):
        terms, states = self.loss_terms(P, batch, rng)
        total = terms["pred"] + self.cfg.dyn_weight * terms["dyn"] + self.cfg.rep_weight * terms["rep"]
        if not np.isfinite(total.value):
            raise dc.NonFiniteError("world-model loss is not finite")
        diag = {"loss": total.item(), "pred": terms["pred"].item(), "kl_dyn": terms["dyn"].item(),
                "kl_rep": terms["rep"].item(), "obs_mse": terms["obs_mse"]}
        return total, diag, states

    def train_step(self, batch: SequenceBatch, rng):
        """One Adam step on the RSSM loss; returns diagnostics and detached posterior starts."""
        P = self.store.leaves()
        total, diag, states = self.rssm_loss(P, batch, rng)
        diag["grad_norm"] = dc.backward_and_step(self.store, total, P, self.cfg.lr, self.cfg.clip_norm)
        h = np.concatenate([s.h.value for s in states], axis=0)
        z = np.concatenate([s.z.value for s in states], axis=0)
        return diag, (h, z)

    # ------------------------------------------------------- inference api

    def filter_step(self, h, z, action, obs, noise=None):
        """Numpy-in/numpy-out posterior step for acting. ``noise=None`` uses the posterior mean."""
        P = self.store.constants()
        h, z = np.atleast_2d(h), np.atleast_2d(z)
        prev = LatentState(Tensor(h), Tensor(z))
        noise = np.zeros_like(z) if noise is None else noise
        s = self.observe_step(P, prev, np.atleast_2d(action), np.atleast_2d(obs), noise)
        return s.h.value, s.z.value

    def predict_step(self, h, z, action, noise=None):
        P = self.store.constants()
        h, z = np.atleast_2d(h), np.atleast_2d(z)
        noise = np.zeros_like(z) if noise is None else noise
        s = self.imagine_step(P, LatentState(Tensor(h), Tensor(z)), np.atleast_2d(action), noise)
        return s.h.value, s.z.value

    def predict_obs(self, h, z) -> np.ndarray:
        P = self.store.constants()
        return self.decode(P, np.concatenate([np.atleast_2d(h), np.atleast_2d(z)], axis=-1)).value

    def predict_reward(self, h, z) -> np.ndarray:
        P = self.store.constants()
        feat = np.concatenate([np.atleast_2d(h), np.atleast_2d(z)], axis=-1)
        return self.reward(P, feat).value[:, 0]
