"""Command line entry point: ``v2xwm <subcommand> [flags]``."""
import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from . import harness
from .baselines import KINDS, modelfree_ac_train
from .env import write_trace

POLICIES = ("agent",) + tuple(KINDS)


def _config(args):
    if args.config:
        cfg = config_mod.load(args.config, args.preset)
    else:
        cfg = config_mod.PRESETS[args.preset]()
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg.validate()


def _checkpoint(args):
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.npz"
    if not path.exists():
        raise SystemExit(f"checkpoint not found: {path}")
    return path


def _emit(obj, out_dir, name):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _strip(result: dict) -> dict:
    """Drop per-episode lists, keeping the summary statistics."""
    return {k: ({kk: vv for kk, vv in v.items() if not isinstance(vv, list)}
                if isinstance(v, dict) else v)
            for k, v in result.items()}


def _vehicle_counts(text):
    return [int(v) for v in text.split(",")] if text else []


def cmd_train(args):
    cfg = _config(args)
    out = Path(args.out)

    def progress(row):
        if row["eval_caoi"] != "":
            print(f"episode {row['episode']}  env_steps {row['env_steps']}  "
                  f"eval_caoi {row['eval_caoi']:.3f}", flush=True)

    trainer = harness.train(cfg, out, args.episodes, None if args.quiet else progress)
    print(f"wrote {out / 'metrics.csv'} ({trainer.env_steps} env steps)")


def cmd_evaluate(args):
    path = _checkpoint(args)
    before = harness.file_hash(path)
    cfg, wm, agent = harness.load_checkpoint(path)
    kinds = POLICIES if args.policy == "all" else ("agent", args.policy)
    kinds = tuple(dict.fromkeys(k for k in kinds if k != "model-free-ac"))
    base = args.seed if args.seed is not None else 10_000
    fac = harness.policy_factories(cfg, kinds, wm, agent, seed=base)
    res = harness.evaluate(cfg, fac, args.episodes, base)
    summary = _strip(res)
    summary["n_vehicles"] = cfg.env.n_vehicles
    if "random" in res and "agent" in res:
        summary["agent_vs_random"] = harness.paired_test(res["agent"]["caoi"], res["random"]["caoi"])
    if harness.file_hash(path) != before:
        raise RuntimeError("checkpoint changed during evaluation")
    _emit(summary, args.out, "eval_summary.json")


def cmd_predict_mode(args):
    path = _checkpoint(args)
    cfg, wm, agent = harness.load_checkpoint(path)
    prefix = args.prefix_len if args.prefix_len is not None else cfg.env.period // 2
    base = args.seed if args.seed is not None else 10_000
    res = harness.predict_mode_eval(cfg, wm, agent, prefix, args.episodes, base)
    _emit(_strip(res), args.out, "predict_summary.json")


def cmd_baseline(args):
    cfg = _config(args)
    counts = _vehicle_counts(args.vehicles) or [cfg.env.n_vehicles]
    kinds = KINDS if args.policy == "all" else (args.policy,)
    base = args.seed if args.seed is not None else 10_000
    rows = []
    for V in counts:
        cfg.env.n_vehicles = V
        cfg.validate()
        mf = None
        if "model-free-ac" in kinds:
            mf = modelfree_ac_train(cfg.env, cfg.world_model.train_episodes, seed=cfg.run.seed)
        fac = harness.policy_factories(cfg, kinds, mf_policy=mf, seed=base)
        res = harness.evaluate(cfg, fac, args.episodes, base)
        for kind in kinds:
            r = res[kind]
            rows.append({"n_vehicles": V, "policy": kind, "caoi_mean": r["caoi_mean"],
                         "caoi_std": r["caoi_std"], "reward_mean": r["reward_mean"]})
    _emit(rows, args.out, "baseline_summary.json")


def cmd_trace_export(args):
    base = args.seed if args.seed is not None else 0
    if args.policy == "agent":
        cfg, wm, agent = harness.load_checkpoint(_checkpoint(args))
        factory = harness.policy_factories(cfg, ["agent"], wm, agent)["agent"]
    else:
        cfg = _config(args)
        factory = harness.policy_factories(cfg, [args.policy], seed=base)[args.policy]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in harness.episode_seeds(args.episodes, base):
        res = harness.run_episode(cfg, seed, factory())
        write_trace(res.trace, out / f"trace_{args.policy}_{seed}.jsonl")
        print(f"seed {seed}: avg CAoI {res.avg_caoi:.3f}")


def build_parser():
    p = argparse.ArgumentParser(prog="v2xwm", description="World-model link scheduling for V2X networks")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, episodes):
        sp.add_argument("--config", help="YAML config file (overrides the preset)")
        sp.add_argument("--preset", choices=sorted(config_mod.PRESETS), default="desk")
        sp.add_argument("--seed", type=int, help="run seed (train) or first evaluation seed")
        sp.add_argument("--out", default="runs/default", help="output directory")
        sp.add_argument("--episodes", type=int, default=episodes)
        sp.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.npz)")

    sp = sub.add_parser("train", help="train world model and agent")
    common(sp, None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint against baselines")
    common(sp, 100)
    sp.add_argument("--policy", choices=POLICIES + ("all",), default="random")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict-mode", help="open-loop prediction mode evaluation")
    common(sp, 100)
    sp.add_argument("--prefix-len", type=int)
    sp.set_defaults(func=cmd_predict_mode)

    sp = sub.add_parser("baseline", help="evaluate baseline schedulers, optionally over a vehicle sweep")
    common(sp, 100)
    sp.add_argument("--policy", choices=tuple(KINDS) + ("all",), default="all")
    sp.add_argument("--vehicles", help="comma-separated vehicle counts, e.g. 4,6,8")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("trace-export", help="write per-slot JSON-lines episode traces")
    common(sp, 1)
    sp.add_argument("--policy", choices=tuple(k for k in POLICIES if k != "model-free-ac"),
                    default="random")
    sp.set_defaults(func=cmd_trace_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
