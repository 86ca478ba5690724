"""Analytical mmWave V2X channel.

Fresnel-zone blockage by vehicles, Poisson blocker thinning for the LoS
probability, a free-space / excess-loss pathloss law, the Shannon packet
rate per slot and a geometric surrogate for the ray-tracing features.

Scalar functions are the reference; ``link_table`` and ``tracing_tensor``
evaluate every ordered link of a snapshot at once (numba or numpy).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import _accel
from ._accel import optional_njit

SPEED_OF_LIGHT = 299_792_458.0
N_TRACE = 7


@dataclass(frozen=True)
class ChannelParams:
    carrier_hz: float = 28e9
    bandwidth_hz: float = 1e8
    noise_psd_dbm_hz: float = -174.0
    rsu_power_dbm: float = 23.0
    vehicle_power_dbm: float = 23.0
    packet_bits: float = 4e7
    slot_s: float = 0.1
    blocker_mean_m: float = 1.6
    blocker_std_m: float = 0.3
    vehicle_density: float = 0.02
    los_decay: float = 0.0071
    beam_gain_db: float = 20.0
    nlos_excess_db: float = 20.0
    nlos_exponent: float = 3.19

    def __post_init__(self):
        for name in ("carrier_hz", "bandwidth_hz", "packet_bits", "slot_s",
                     "blocker_std_m", "vehicle_density", "los_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.nlos_exponent < 2.0 or self.nlos_excess_db < 0:
            raise ValueError("NLoS loss must not be below free space")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def noise_w(self) -> float:
        """Noise power N0*B in watts."""
        return dbm_to_w(self.noise_psd_dbm_hz) * self.bandwidth_hz

    @property
    def rsu_power_w(self) -> float:
        return dbm_to_w(self.rsu_power_dbm)

    @property
    def vehicle_power_w(self) -> float:
        return dbm_to_w(self.vehicle_power_dbm)

    @property
    def packets_per_bit_hz(self) -> float:
        return self.bandwidth_hz * self.slot_s / self.packet_bits

    def packed(self) -> np.ndarray:
        """Flat float64 vector consumed by the compiled kernels."""
        return np.array([
            self.wavelength, self.blocker_mean_m, self.blocker_std_m,
            self.vehicle_density, self.los_decay, self.beam_gain_db,
            self.nlos_excess_db, self.nlos_exponent, self.noise_w,
            self.packets_per_bit_hz, self.vehicle_power_w, self.rsu_power_w,
            fspl_1m_db(self.carrier_hz),
        ])


@dataclass(frozen=True)
class LinkGeometry:
    tx: tuple
    rx: tuple

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.rx, self.tx)))

    @property
    def tx_height(self) -> float:
        return float(self.tx[2])

    @property
    def rx_height(self) -> float:
        return float(self.rx[2])


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


def fspl_1m_db(carrier_hz: float) -> float:
    return 20.0 * math.log10(4.0 * math.pi * carrier_hz / SPEED_OF_LIGHT)


# ------------------------------------------------------------ scalar model

def fresnel_radius(d_kb: float, d_kr: float, wavelength: float) -> float:
    """First Fresnel zone radius at a blocker ``d_kb`` metres from the transmitter."""
    if not 0.0 < d_kb < d_kr:
        raise ValueError(f"blocker at {d_kb} m is not strictly inside a {d_kr} m link")
    d_br = d_kr - d_kb
    return math.sqrt(wavelength * d_kb * d_br / d_kr)


def fresnel_height(h_tx: float, h_rx: float, d_kb: float, d_kr: float,
                   wavelength: float) -> float:
    """Height a blocker must exceed to obstruct 60% of the first Fresnel zone."""
    r_f = fresnel_radius(d_kb, d_kr, wavelength)
    return h_tx + (h_rx - h_tx) * d_kb / d_kr - 0.6 * r_f


def q_function(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def blockage_probability(h_f: float, mu_b: float, sigma_b: float) -> float:
    if sigma_b <= 0:
        raise ValueError("blocker height spread must be positive")
    return q_function((h_f - mu_b) / sigma_b)


def los_probability(geom: LinkGeometry, params: ChannelParams, kind: str) -> float:
    """LoS probability of a V2V or V2I link, blocker evaluated at the link midpoint."""
    d = geom.distance
    if kind not in ("V2V", "V2I"):
        raise ValueError(f"unknown link kind {kind!r}")
    if d <= 0:
        raise ValueError("link distance must be positive")
    h_f = fresnel_height(geom.tx_height, geom.rx_height, 0.5 * d, d, params.wavelength)
    p_block = blockage_probability(h_f, params.blocker_mean_m, params.blocker_std_m)
    p = math.exp(-params.vehicle_density * d * p_block)
    if kind == "V2I":
        p *= math.exp(-params.los_decay * d)
    return p


def pathloss_db(d: float, params: ChannelParams, los: bool) -> float:
    d = max(d, 1.0)
    fspl = fspl_1m_db(params.carrier_hz)
    if los:
        return fspl + 20.0 * math.log10(d)
    return fspl + 10.0 * params.nlos_exponent * math.log10(d) + params.nlos_excess_db


def link_gain(geom: LinkGeometry, params: ChannelParams, los: bool) -> float:
    """Linear power gain including the beamforming gain."""
    return 10.0 ** ((params.beam_gain_db - pathloss_db(geom.distance, params, los)) / 10.0)


def packet_rate(gain: float, params: ChannelParams, tx_power_w: float) -> float:
    """Packets per slot, ``(B xi / S) log2(1 + P g / (N0 B))``."""
    if gain < 0:
        raise ValueError("gain must be non-negative")
    return params.packets_per_bit_hz * math.log2(1.0 + tx_power_w * gain / params.noise_w)


# --------------------------------------------------------- batched kernels
#
# Node layout for every (V+1)x(V+1) table: rows are transmitters, columns are
# receivers, index V is the RSU. Entries with the RSU as receiver or on the
# diagonal are unused and left at zero.

@optional_njit(cache=True)
def _link_table_nb(pos, cp):
    n = pos.shape[0]
    wl, mu, sig, dens, beta = cp[0], cp[1], cp[2], cp[3], cp[4]
    beam, excess, expo, noise = cp[5], cp[6], cp[7], cp[8]
    scale, p_veh, p_rsu, fspl0 = cp[9], cp[10], cp[11], cp[12]
    dist = np.zeros((n, n))
    plos = np.zeros((n, n))
    rate_los = np.zeros((n, n))
    rate_nlos = np.zeros((n, n))
    gain_los = np.zeros((n, n))
    gain_nlos = np.zeros((n, n))
    rsu = n - 1
    for i in range(n):
        for j in range(n):
            if i == j or j == rsu:
                continue
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            dist[i, j] = d
            half = 0.5 * d
            r_f = math.sqrt(wl * half * half / d)
            h_f = pos[i, 2] + (pos[j, 2] - pos[i, 2]) * 0.5 - 0.6 * r_f
            p_block = 0.5 * math.erfc((h_f - mu) / sig / math.sqrt(2.0))
            p = math.exp(-dens * d * p_block)
            if i == rsu:
                p *= math.exp(-beta * d)
            plos[i, j] = p
            dl = max(d, 1.0)
            gl = 10.0 ** ((beam - fspl0 - 20.0 * math.log10(dl)) / 10.0)
            gn = 10.0 ** ((beam - fspl0 - 10.0 * expo * math.log10(dl) - excess) / 10.0)
            gain_los[i, j] = gl
            gain_nlos[i, j] = gn
            pw = p_rsu if i == rsu else p_veh
            rate_los[i, j] = scale * math.log2(1.0 + pw * gl / noise)
            rate_nlos[i, j] = scale * math.log2(1.0 + pw * gn / noise)
    return dist, plos, gain_los, gain_nlos, rate_los, rate_nlos


def _link_table_np(pos, cp):
    n = pos.shape[0]
    wl, mu, sig, dens, beta = cp[0], cp[1], cp[2], cp[3], cp[4]
    beam, excess, expo, noise = cp[5], cp[6], cp[7], cp[8]
    scale, p_veh, p_rsu, fspl0 = cp[9], cp[10], cp[11], cp[12]
    valid = ~np.eye(n, dtype=bool)
    valid[:, n - 1] = False
    diff = pos[None, :, :] - pos[:, None, :]
    d = np.sqrt((diff * diff).sum(-1))
    dsafe = np.where(valid, d, 1.0)
    r_f = np.sqrt(wl * (0.5 * dsafe) ** 2 / dsafe)
    h_f = pos[:, None, 2] + (pos[None, :, 2] - pos[:, None, 2]) * 0.5 - 0.6 * r_f
    p_block = 0.5 * erfc((h_f - mu) / sig / np.sqrt(2.0))
    p = np.exp(-dens * dsafe * p_block)
    p[n - 1, :] *= np.exp(-beta * dsafe[n - 1, :])
    dl = np.maximum(dsafe, 1.0)
    gl = 10.0 ** ((beam - fspl0 - 20.0 * np.log10(dl)) / 10.0)
    gn = 10.0 ** ((beam - fspl0 - 10.0 * expo * np.log10(dl) - excess) / 10.0)
    pw = np.full((n, 1), p_veh)
    pw[n - 1] = p_rsu
    rl = scale * np.log2(1.0 + pw * gl / noise)
    rn = scale * np.log2(1.0 + pw * gn / noise)
    out = []
    for arr in (d, p, gl, gn, rl, rn):
        out.append(np.where(valid, arr, 0.0))
    return tuple(out)


def link_table(pos: np.ndarray, params: ChannelParams, use_numba=None):
    """Distances, LoS probabilities, gains and rates for every ordered link.

    ``pos`` is (V+1, 3) with the RSU in the last row. Returns a dict of
    (V+1, V+1) arrays indexed [transmitter, receiver].
    """
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    fn = _accel.select(_link_table_nb, _link_table_np, use_numba)
    d, p, gl, gn, rl, rn = fn(pos, params.packed())
    return {"distance": d, "p_los": p, "gain_los": gl, "gain_nlos": gn,
            "rate_los": rl, "rate_nlos": rn}


@optional_njit(cache=True)
def _tracing_nb(pos, gain_db):
    n = pos.shape[0]
    V = n - 1
    out = np.zeros((V, V, 7))
    for v in range(V):
        col = 0
        for k in range(n):
            if k == v:
                continue
            # link k -> v; column V-1 is the RSU
            dx = pos[v, 0] - pos[k, 0]
            dy = pos[v, 1] - pos[k, 1]
            dz = pos[v, 2] - pos[k, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            aod_az = math.atan2(dy, dx)
            aod_zen = math.acos(min(1.0, max(-1.0, dz / d)))
            aoa_az = math.atan2(-dy, -dx)
            aoa_zen = math.acos(min(1.0, max(-1.0, -dz / d)))
            toa = d / 299792458.0
            out[v, col, 0] = aoa_az
            out[v, col, 1] = aoa_zen
            out[v, col, 2] = aod_az
            out[v, col, 3] = aod_zen
            out[v, col, 4] = toa
            out[v, col, 5] = toa
            out[v, col, 6] = gain_db[k, v]
            col += 1
    return out


def _tracing_np(pos, gain_db):
    n = pos.shape[0]
    V = n - 1
    out = np.zeros((V, V, 7))
    for v in range(V):
        src = np.array([k for k in range(n) if k != v])
        diff = pos[v] - pos[src]
        d = np.sqrt((diff * diff).sum(-1))
        cz = np.clip(diff[:, 2] / d, -1.0, 1.0)
        out[v, :, 0] = np.arctan2(-diff[:, 1], -diff[:, 0])
        out[v, :, 1] = np.arccos(-cz)
        out[v, :, 2] = np.arctan2(diff[:, 1], diff[:, 0])
        out[v, :, 3] = np.arccos(cz)
        out[v, :, 4] = d / SPEED_OF_LIGHT
        out[v, :, 5] = d / SPEED_OF_LIGHT
        out[v, :, 6] = gain_db[src, v]
    return out


def tracing_tensor(pos: np.ndarray, gain_db: np.ndarray, use_numba=None) -> np.ndarray:
    """Dominant-path features R (V, V, 7) indexed [receiver, source, feature].

    Columns 0..V-2 hold the V2V links from the other vehicles in increasing
    index order; column V-1 holds the V2I link. Features are AoA azimuth,
    AoA zenith, AoD azimuth, AoD zenith, time of arrival, path delay (s) and
    realised gain (dB).
    """
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    gain_db = np.ascontiguousarray(gain_db, dtype=np.float64)
    fn = _accel.select(_tracing_nb, _tracing_np, use_numba)
    return fn(pos, gain_db)


def source_column(v: int, source: int, n_vehicles: int) -> int:
    """Column of ``tracing_tensor`` holding link ``source -> v`` (RSU = n_vehicles)."""
    if source == n_vehicles:
        return n_vehicles - 1
    if source == v:
        raise ValueError("no self links")
    return source if source < v else source - 1
