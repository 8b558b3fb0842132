"""Command line entry point: run, gradcheck, render, compare."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .checks import adjoint_check, cnn_network_check, layer_checks
from .config import ExperimentConfig, comparison_variants, load_config, parse_config
from .mesh import ConfigError, GridSpec
from .optimize import Pipeline, finish, run_loop, start_state
from .physics import ideal_cell_oracle

log = logging.getLogger("frontgrid")


def _pipeline(cfg: ExperimentConfig):
    problem = cfg.build_problem()
    arch = cfg.build_arch() if cfg.run.pipeline == "solarnet" else None
    return Pipeline(problem, cfg.run, arch)


def expected_shapes(pipe: Pipeline) -> dict:
    if pipe.cfg.pipeline == "direct":
        return {"logits": (pipe.problem.mesh.n_elements,)}
    return pipe.arch.param_shapes()


def write_images(out: Path, stem: str, pipe: Pipeline, xt: np.ndarray) -> None:
    mesh = pipe.problem.mesh
    img = mesh.to_image(xt, fill=0.0)
    io.write_density_pgm(out / f"{stem}.pgm", img)
    io.write_overlay_ppm(out / f"{stem}_overlay.ppm", img, io.busbar_pixels(mesh))


def execute_run(cfg: ExperimentConfig, out: Path, resume: Path | None = None) -> dict:
    """Run one pipeline, writing log.csv, snapshots, final images and checkpoint into ``out``."""
    with io.output_lock(out):
        pipe = _pipeline(cfg)
        config_tree = cfg.to_dict()
        log_path = out / "log.csv"
        if resume is not None:
            state, _ = io.checkpoint_load(resume, expected_shapes(pipe))
            if state.pipeline != cfg.run.pipeline:
                raise ConfigError(f"checkpoint pipeline {state.pipeline!r} differs from config")
        else:
            state = start_state(pipe)
            log_path.unlink(missing_ok=True)
        (out / "config.json").write_text(json.dumps(config_tree, indent=1) + "\n")
        every = cfg.run.snapshot_every

        def on_iter(row, st, xt):
            io.append_log(log_path, row)
            if every and (row.iteration + 1) % every == 0:
                write_images(out, f"density_{row.iteration:05d}", pipe, xt)
                io.checkpoint_save(out / "checkpoint.json", st, config_tree)

        logs = run_loop(pipe, state, on_iter=on_iter)
        io.checkpoint_save(out / "checkpoint.json", state, config_tree)
        result = finish(pipe, state, logs)
        write_images(out, "density", pipe, result.density)
        ceiling, vt = ideal_cell_oracle(cfg.physics)
        summary = {"pipeline": cfg.run.pipeline, "best_iteration": result.iteration,
                   "efficiency_pct": result.efficiency, "power_w": result.power,
                   "ideal_ceiling_pct": ceiling, "v_thermal": vt, "iterations": state.iteration}
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
        return summary


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    run = cfg.run
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.max_iters is not None:
        run = dataclasses.replace(run, max_iters=args.max_iters)
    if args.pipeline is not None:
        run = dataclasses.replace(run, pipeline=args.pipeline)
    cfg = dataclasses.replace(cfg, run=run, output=args.out or cfg.output)
    t0 = time.perf_counter()
    s = execute_run(cfg, Path(cfg.output), Path(args.resume) if args.resume else None)
    print(f"{s['pipeline']}: best efficiency {s['efficiency_pct']:.4f}% at iteration {s['best_iteration']} "
          f"(P = {s['power_w']:.6e} W, ceiling {s['ideal_ceiling_pct']:.2f}%) in {time.perf_counter() - t0:.1f}s "
          f"-> {cfg.output}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    results = []
    for n in (args.grid, 2 * args.grid):
        g = GridSpec(n, n, cfg.grid.lx, cfg.grid.ly)
        variant = dataclasses.replace(cfg, grid=g)
        results.append(adjoint_check(variant.build_problem()))
    results.append(cnn_network_check())
    results.extend(layer_checks())
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'GRADIENT CHECK FAILED'} ({time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def cmd_render(args) -> int:
    state, tree = io.checkpoint_load(args.checkpoint)
    cfg = parse_config(tree, str(args.checkpoint))
    pipe = _pipeline(cfg)
    io.checkpoint_load(args.checkpoint, expected_shapes(pipe))
    theta = state.best_params if state.best_params is not None else state.params
    _, xt, _ = pipe.densities(theta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    img = pipe.problem.mesh.to_image(xt, fill=0.0)
    io.write_density_pgm(out, img)
    overlay = out.with_name(out.stem + "_overlay.ppm")
    io.write_overlay_ppm(overlay, img, io.busbar_pixels(pipe.problem.mesh))
    print(f"wrote {out} and {overlay}")
    return 0


def comparison_table(cfg: ExperimentConfig, seeds, out: Path | None = None) -> list[dict]:
    """Best-of-seeds efficiency for both pipelines on the four square layouts and the triangle.

    The direct pipeline starts from x = 0.5 and is seed independent, so it runs once per layout.
    """
    rows = []
    for name, variant in comparison_variants(cfg).items():
        direct = dataclasses.replace(variant, run=dataclasses.replace(variant.run, pipeline="direct", lr=None))
        pipe = _pipeline(direct)
        st = start_state(pipe)
        rd = finish(pipe, st, run_loop(pipe, st))
        if out is not None:
            write_images(out, f"{name.replace('/', '_')}_direct", pipe, rd.density)
        s_eff = []
        best_sn = None
        for seed in seeds:
            sn = dataclasses.replace(variant, run=dataclasses.replace(variant.run, pipeline="solarnet", seed=seed,
                                                                      lr=None))
            pipe_s = _pipeline(sn)
            st = start_state(pipe_s, p_ref=rd.state.p_ref)
            rs = finish(pipe_s, st, run_loop(pipe_s, st))
            s_eff.append(rs.efficiency)
            if best_sn is None or rs.efficiency > best_sn[0]:
                best_sn = (rs.efficiency, pipe_s, rs.density)
            log.info("%s seed %d: direct %.4f%%  solarnet %.4f%%", name, seed, rd.efficiency, rs.efficiency)
        if out is not None:
            write_images(out, f"{name.replace('/', '_')}_solarnet", best_sn[1], best_sn[2])
        rows.append({"config": name, "direct_best_pct": rd.efficiency, "solarnet_best_pct": max(s_eff),
                     "delta_pct": max(s_eff) - rd.efficiency, "solarnet_seeds_pct": s_eff})
    return rows


def format_table(rows) -> str:
    lines = ["config,direct_best_pct,solarnet_best_pct,delta_pct,solarnet_seeds_pct"]
    for r in rows:
        seeds = ";".join(f"{v:.6f}" for v in r["solarnet_seeds_pct"])
        lines.append(f"{r['config']},{r['direct_best_pct']:.6f},{r['solarnet_best_pct']:.6f},"
                     f"{r['delta_pct']:.6f},{seeds}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if args.max_iters is not None:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, max_iters=args.max_iters))
    out = Path(args.out or cfg.output)
    with io.output_lock(out):
        rows = comparison_table(cfg, range(args.seeds), out)
        text = format_table(rows)
        (out / "compare.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="frontgrid", description="Solar-cell front metallization topology optimisation")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimise one design")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--pipeline", choices=("direct", "solarnet"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="adjoint and CNN gradients against finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="re-emit images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", help="direct vs CNN pipelines over busbar layouts and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out")
    p.add_argument("--max-iters", type=int)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.CheckpointError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
