"""Compare the numba kernels against their numpy fallbacks.

Usage: ``python benchmarks/bench_kernels.py [--repeat N] [--vehicles 4,8]``

Each kernel is called once to trigger compilation, then timed with
``timeit``; the table reports microseconds per call and the speed-up.
Outputs of the two paths are checked to agree before timing.
"""
import argparse
import timeit

import numpy as np

from v2xwm import channel
from v2xwm.agent import project_choices
from v2xwm.config import EnvConfig
from v2xwm.env import caoi_update, positions, reset


def cases(V, rng):
    cfg = EnvConfig(n_vehicles=V)
    state, _ = reset(cfg, 0)
    pos = positions(cfg, state)
    params = cfg.channel_params()
    table = channel.link_table(pos, params)
    gain_db = 10 * np.log10(table["gain_los"] + 1e-300)
    rates = rng.uniform(0, 6, (V + 1, V + 1))
    age = rng.uniform(1, 10, V)
    stamp = 5 - age
    inv = rng.integers(0, 5, V)
    ch = rng.integers(0, V + 2, V)
    batch = rng.integers(0, V + 2, (256, V))
    conf = rng.random((256, V))
    return {
        "link_table": lambda nb: channel.link_table(pos, params, use_numba=nb)["rate_los"],
        "tracing_tensor": lambda nb: channel.tracing_tensor(pos, gain_db, use_numba=nb),
        "caoi_update": lambda nb: caoi_update(age, stamp, inv, ch, rates, 5, 4, use_numba=nb)[0],
        "project_choices[256]": lambda nb: project_choices(batch, conf, use_numba=nb),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--vehicles", default="4,8")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'V':>3}{'numba us':>12}{'numpy us':>12}{'speed-up':>10}")
    for V in (int(v) for v in args.vehicles.split(",")):
        for name, fn in cases(V, rng).items():
            np.testing.assert_allclose(fn(True), fn(False), rtol=1e-12)
            t_nb = min(timeit.repeat(lambda: fn(True), number=args.repeat, repeat=3)) / args.repeat
            t_np = min(timeit.repeat(lambda: fn(False), number=args.repeat, repeat=3)) / args.repeat
            print(f"{name:<22}{V:>3}{t_nb * 1e6:>12.2f}{t_np * 1e6:>12.2f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
