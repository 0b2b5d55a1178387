"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import threading
from pathlib import Path

from .config import DESK_SCALE, PAPER_SCALE, Config, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _levels(text: str) -> list[int]:
    try:
        levels = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}")
    if not levels or any(l not in (0, 1, 2) for l in levels):
        raise argparse.ArgumentTypeError("levels must be drawn from 0,1,2")
    return levels


def _level(text: str) -> int:
    levels = _levels(text)
    if len(levels) != 1:
        raise argparse.ArgumentTypeError("expected a single level")
    return levels[0]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tubenav", description="Vision/LiDAR drone navigation in procedural tubes")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-tubes", help="export curriculum tubes as OBJ files")
    g.add_argument("--level", type=_level, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--config", type=Path)

    t = sub.add_parser("train", help="train a PPO policy with the curriculum")
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    scale = t.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true")
    scale.add_argument("--paper-scale", action="store_true")
    t.add_argument("--iterations", type=int)
    t.add_argument("--time-budget", type=float, help="seconds")
    t.add_argument("--seed", type=int)
    t.add_argument("--stop-at-level", type=int)
    t.add_argument("--parallel", action="store_true", help="one process per rollout worker")

    e = sub.add_parser("eval", help="evaluate a controller on fresh tubes")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--controller", choices=("ppo", "pp"), default="ppo")
    e.add_argument("--level", type=_level, required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", type=Path)
    e.add_argument("--continuous", action="store_true", help="PP without action snapping")
    e.add_argument("--log", type=Path, help="per-step episode log (jsonl)")

    c = sub.add_parser("compare", help="paired PPO vs Pure Pursuit comparison")
    c.add_argument("--checkpoint", type=Path, nargs="+", required=True,
                   help="checkpoint file(s) or directories; several candidates are "
                        "ranked on the tuning tubes and the best one is compared")
    c.add_argument("--levels", type=_levels, default=[0, 1, 2])
    c.add_argument("--episodes", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--pp-lookahead-sweep", action="store_true")
    c.add_argument("--tuning-episodes", type=int, default=20)
    c.add_argument("--config", type=Path)
    c.add_argument("--log-dir", type=Path)

    b = sub.add_parser("bridge", help="run the lockstep physics bridge")
    b.add_argument("--checkpoint", type=Path, required=True)
    b.add_argument("--tube", type=Path, required=True, help="tube mesh OBJ")
    b.add_argument("--centerline", type=Path, required=True, help="centerline OBJ")
    b.add_argument("--transport", choices=("inproc", "shm"))
    b.add_argument("--shm-name")
    b.add_argument("--dt", type=float)
    b.add_argument("--delta-t", type=float)
    b.add_argument("--config", type=Path)

    m = sub.add_parser("emit-plots", help="write training-curve CSV series")
    m.add_argument("--metrics", type=Path, required=True)
    m.add_argument("--out", type=Path, required=True)
    return p


def _config(path: Path | None) -> Config:
    if path is not None and not path.is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def cmd_gen_tubes(args) -> int:
    from .geometry import export_obj, sample_curriculum_tube

    cfg = _config(args.config)
    if args.count < 1:
        raise UsageError("--count must be positive")
    args.out.mkdir(parents=True, exist_ok=True)
    g = cfg.geometry
    for i in range(args.count):
        seed = args.seed + i
        tube = sample_curriculum_tube(args.level, seed, radius=g.radius, length=g.length,
                                      n_samples=g.n_samples)
        mesh, line = export_obj(tube, g.circle_segments)
        (args.out / f"tube_{seed}.obj").write_bytes(mesh)
        (args.out / f"centerline_{seed}.obj").write_bytes(line)
    print(f"wrote {args.count} tubes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .ppo.train import train

    cfg = _config(args.config)
    overrides = {}
    if args.desk_scale:
        overrides.update(DESK_SCALE)
    if args.paper_scale:
        overrides.update(PAPER_SCALE)
    for key, val in (("iterations", args.iterations), ("time_budget_s", args.time_budget),
                     ("seed", args.seed), ("stop_at_level", args.stop_at_level)):
        if val is not None:
            overrides[key] = val
    if args.parallel:
        overrides["parallel"] = True
    cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, **overrides))
    result = train(cfg, args.out)
    print(f"stopped after {result.iterations} iterations ({result.stop_reason}); "
          f"level {result.level}; checkpoint {result.checkpoint_path}; best {result.best_path}")
    return EXIT_OK


def _policy(path: Path):
    from .evaluation import PolicyController
    from .ppo.checkpoint import load_checkpoint

    if path is None or not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    params, _ = load_checkpoint(path)
    return PolicyController(params)


def cmd_eval(args) -> int:
    from .evaluation import aggregate, episode_seeds, evaluate, pp_controller

    cfg = _config(args.config)
    if args.controller == "ppo":
        ctrl = _policy(args.checkpoint)
    else:
        if args.continuous:
            cfg = dataclasses.replace(cfg, pure_pursuit=dataclasses.replace(cfg.pure_pursuit,
                                                                             continuous=True))
        ctrl = pp_controller(cfg)
    records = evaluate(ctrl, args.level, episode_seeds(args.seed, args.episodes), cfg)
    row = aggregate(records, ctrl.name, args.level)
    if args.log:
        with open(args.log, "w") as fh:
            for r in records:
                fh.write(r.to_jsonl())
    print(json.dumps(dataclasses.asdict(row) | {"seeds": f"{args.seed}..{args.seed + args.episodes - 1}"}))
    return EXIT_OK


def _candidates(paths: list[Path]) -> list[Path]:
    out = []
    for p in paths:
        if p.is_dir():
            found = sorted(p.glob("*.npz"))
            if not found:
                raise UsageError(f"no checkpoints in {p}")
            out.extend(found)
        elif p.is_file():
            out.append(p)
        else:
            raise UsageError(f"checkpoint not found: {p}")
    return out


def cmd_compare(args) -> int:
    from .evaluation import compare, pp_controller, select_checkpoint, sweep_pp_lookahead

    cfg = _config(args.config)
    candidates = _candidates(args.checkpoint)
    selection = None
    ckpt = candidates[0]
    if len(candidates) > 1:
        ckpt, selection = select_checkpoint(candidates, cfg, args.levels, args.tuning_episodes,
                                            args.seed)
        print(f"checkpoint selection over {len(candidates)} candidates -> {ckpt}")
    policy = _policy(ckpt)
    sweep = None
    L = cfg.pure_pursuit.lookahead_radii
    if args.pp_lookahead_sweep:
        L, sweep = sweep_pp_lookahead(cfg, args.levels, args.tuning_episodes, args.seed)
        print(f"pure pursuit lookahead sweep -> {L} R")
    table = compare({"ppo": policy, "pp": pp_controller(cfg, L)}, args.levels, args.episodes,
                    args.seed, cfg, args.log_dir)
    table.meta.update({"pp_lookahead_radii": L, "pp_sweep": sweep,
                       "checkpoint": str(ckpt), "checkpoint_selection": selection,
                       "tuning_episodes": args.tuning_episodes})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table.to_csv())
    args.out.with_suffix(".json").write_text(table.to_json())
    print(table.summary())
    return EXIT_OK


def cmd_bridge(args) -> int:
    from .bridge import (InProcChannel, ShmChannel, gains_from_config, inference_driver,
                         load_tube_assets, plant_loop, start_body)

    cfg = _config(args.config)
    b = cfg.bridge
    transport = args.transport or b.transport
    dt = args.dt or b.dt
    delta_t = args.delta_t or b.delta_t
    cfg = dataclasses.replace(cfg, dynamics=dataclasses.replace(cfg.dynamics, dt=dt))
    tube = load_tube_assets(args.tube, args.centerline)
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    body = start_body(tube, cfg)
    if transport == "inproc":
        driver_ch = plant_ch = InProcChannel()
    else:
        driver_ch = ShmChannel(args.shm_name or None, create=True)
        plant_ch = ShmChannel(driver_ch.name, create=False)
    report = {}

    def serve():
        report["plant"] = plant_loop(body, plant_ch, dt, delta_t, gains_from_config(cfg))

    th = threading.Thread(target=serve, daemon=True)
    th.start()
    try:
        res = inference_driver(args.checkpoint, args.tube, args.centerline, driver_ch, cfg)
    finally:
        th.join(timeout=10)
        if transport == "shm":
            plant_ch.close()
            driver_ch.close()
    from .evaluation import quality_index
    print(json.dumps({
        "terminal": res.record.terminal.value,
        "steps": res.loop_steps,
        "frames_answered": res.frames_answered,
        "quality": quality_index(res.record) if res.record.steps else None,
    }))
    return EXIT_OK if res.record.terminal.value == "success" else EXIT_RUNTIME


def cmd_emit_plots(args) -> int:
    from .evaluation import emit_plots

    if not args.metrics.is_file():
        raise UsageError(f"metrics file not found: {args.metrics}")
    paths = emit_plots(args.metrics, args.out)
    print("\n".join(str(p) for p in paths.values()))
    return EXIT_OK


COMMANDS = {
    "gen-tubes": cmd_gen_tubes,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "bridge": cmd_bridge,
    "emit-plots": cmd_emit_plots,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tubenav: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"tubenav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
