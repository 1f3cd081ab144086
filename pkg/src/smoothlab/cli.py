"""smoothlab command line.

Exit codes: 0 ok, 2 bad flags or configuration, 3 I/O, 4 solver or training failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import apps
from .config import ConfigError, RunConfig, load_config
from .energy import EnergyProblem
from .guidance import load_mask, save_mask
from .imagecore import ImageIOError, atomic_write_bytes, load_image, save_image
from .network import ModelFormatError, build_network, forward_smooth, load_model, save_model
from .solvers import SolverError, solve_gd, solve_irls
from .trainer import (PrecomputeError, TrainingError, evaluate, evaluation_csv, list_images,
                      precompute_targets, train, train_log_csv)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SOLVER = 0, 2, 3, 4

COMPARE_MODES = ("all_large", "all_small", "half_half", "dynamic")
COMPARE_SOLVERS = ("gd", "irls", "cnn-overfit")

# presets whose distinguishing setting lives in the dynamic p selection, which IRLS does not run
IRLS_INCOMPATIBLE = {
    "detail": "preset 'detail' releases the p-selection thresholds (c1=inf, c2=0) and relies on the "
              "dynamic p-map and edge term; solver irls uses a fixed p-map without the edge term",
    "abstract": "preset 'abstract' dilates the dynamically selected LARGE set; solver irls uses a "
                "fixed p-map without the edge term",
}

log = logging.getLogger("smoothlab")


class UsageError(Exception):
    pass


def _threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("SMOOTHLAB_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError as exc:
                raise UsageError(f"SMOOTHLAB_THREADS must be an integer, got {env!r}") from exc
    value = 1 if value is None else value
    if value < 1:
        raise UsageError("--threads must be >= 1")
    return value


def _map(fn, items, threads: int):
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", None))
    print(cfg.dumps(), file=sys.stderr)
    return cfg


# -- smooth -------------------------------------------------------------------------

def cmd_smooth(args) -> int:
    cfg = _run_config(args)
    img = load_image(args.input)
    if args.solver == "cnn":
        if not args.model:
            raise UsageError("--solver cnn requires --model")
        net = load_model(args.model)
        out = forward_smooth(net, img)
        save_image(out, args.output)
        return EXIT_OK

    params = cfg.energy_params()
    _, pipe = apps.resolve_preset(cfg.preset)
    saliency = None
    if pipe.needs_saliency:
        if not args.mask:
            raise UsageError(f"preset {cfg.preset} needs --mask (saliency mask)")
        saliency = load_mask(args.mask)
    targets = apps.apply_pipeline(pipe, img, saliency, params.neighborhood)

    if args.solver == "gd":
        T, trace = solve_gd(img, targets.B, targets.guide, params, cfg.gd, targets.weight_map)
    else:
        if cfg.preset in IRLS_INCOMPATIBLE:
            raise UsageError(IRLS_INCOMPATIBLE[cfg.preset])
        T, trace = solve_irls(img, None, targets.guide, params, cfg.irls, targets.weight_map)

    out = T
    if args.detail_k is not None:
        out = apps.detail_magnify(img, T, args.detail_k).data
    save_image(np.clip(out, 0.0, 1.0), args.output)
    if args.trace:
        atomic_write_bytes(args.trace, trace.to_csv().encode())
    if args.export_mask:
        save_mask(targets.B, args.export_mask)
    print(f"final energy {trace.final.total!r}")
    return EXIT_OK


# -- training -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _run_config(args)
    tcfg = cfg.train_config(corpus_dir=args.corpus, epochs=args.epochs, crop=args.crop,
                            learning_rate=args.lr, seed=args.seed, network=args.network,
                            checkpoint_every=args.checkpoint_every, checkpoint_dir=args.out,
                            overfit_single=args.overfit)
    if not tcfg.corpus_dir and not tcfg.overfit_single:
        raise UsageError("train needs --corpus or --overfit")
    if args.init_model:
        net = load_model(args.init_model)
    else:
        net = build_network(tcfg.network, seed=tcfg.seed, width=args.width)
    params = cfg.energy_params()
    if tcfg.overfit_single:
        index = precompute_targets(os.path.dirname(tcfg.overfit_single) or ".", tcfg.preset,
                                   params=params, paths=[tcfg.overfit_single])
    else:
        index = precompute_targets(tcfg.corpus_dir, tcfg.preset, params=params)
    index.params = params
    print(f"targets: {index.hits} cache hits, {index.misses} computed", file=sys.stderr)
    trained, history = train(net, tcfg, index=index)
    os.makedirs(args.out, exist_ok=True)
    save_model(trained, os.path.join(args.out, "final.usis"))
    sys.stdout.write(train_log_csv(history))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    net = load_model(args.model)
    index = precompute_targets(args.images, cfg.preset, params=cfg.energy_params())
    index.params = cfg.energy_params()
    rows = evaluate(net, index=index)
    table = evaluation_csv(rows)
    if args.out:
        atomic_write_bytes(args.out, table.encode())
    sys.stdout.write(table)
    return EXIT_OK


def cmd_precompute(args) -> int:
    cfg = _run_config(args)
    index = precompute_targets(args.corpus, cfg.preset, cache_dir=args.cache_dir,
                               params=cfg.energy_params())
    print(f"{len(index)} images: {index.hits} cache hits, {index.misses} computed")
    return EXIT_OK


# -- solver comparison --------------------------------------------------------------

def _curve_csv(values) -> str:
    lines = ["step,total,data,flatten,edge"]
    for k, bd in values:
        lines.append(f"{k},{bd.total!r},{bd.data!r},{bd.flatten!r},{bd.edge!r}")
    return "\n".join(lines) + "\n"


def compare_cell(entry, mode: str, solver: str, cfg: RunConfig, params, overfit_steps: int, seed: int,
                 network: str):
    """Returns (loss-curve csv text, final total energy) for one image in one cell."""
    from dataclasses import replace

    t = entry.targets
    img = entry.image
    # fixed-Lp cells compare the pure flattening objective: no edge term
    B = t.B if mode == "dynamic" else None
    if solver == "gd":
        _, trace = solve_gd(img, B, t.guide, params, replace(cfg.gd, p_mode=mode), t.weight_map)
        return trace.to_csv(), trace.final.total
    if solver == "irls":
        _, trace = solve_irls(img, None, t.guide, params, replace(cfg.irls, p_mode=mode), t.weight_map)
        return trace.to_csv(), trace.final.total
    from .trainer import CorpusIndex, TrainConfig

    size = min(img.height, img.width)
    tcfg = TrainConfig(epochs=overfit_steps, crop=size, seed=seed, preset=cfg.preset, network=network,
                       p_mode=mode, learning_rate=cfg.train.get("learning_rate", 0.01))
    index = CorpusIndex([entry], cfg.preset, params=params)
    curve = []
    net = build_network(network, seed=seed)
    trained, _ = train(net, tcfg, index=index, step_callback=lambda s, bd: curve.append((s, bd)))
    T = forward_smooth(trained, img).data
    prob = EnergyProblem(img, B, t.guide, params, t.weight_map)
    pmap = None
    if mode != "dynamic":
        from .solvers import fixed_pmap

        pmap = fixed_pmap(mode, img.height, img.width)
    final = prob.breakdown(T, pmap)
    curve.append(("final", final))
    return _curve_csv(curve), final.total


def cmd_compare_solvers(args) -> int:
    cfg = _run_config(args)
    params = cfg.energy_params()
    paths = list_images(args.images)
    if not paths:
        raise UsageError(f"no images found in {args.images}")
    index = precompute_targets(args.images, cfg.preset, params=params, paths=paths)
    os.makedirs(args.out, exist_ok=True)
    threads = _threads(args)
    summary = ["mode,solver,images,mean_final_total"]
    skipped = []
    for mode in COMPARE_MODES:
        for solver in COMPARE_SOLVERS:
            if solver == "irls" and mode == "dynamic":
                skipped.append((mode, solver, "irls needs a fixed p-map"))
                continue

            def run(entry):
                return entry.name, compare_cell(entry, mode, solver, cfg, params, args.overfit_steps,
                                                args.seed, args.network)

            results = _map(run, index.entries, threads)
            finals = []
            for name, (text, final) in results:
                atomic_write_bytes(os.path.join(args.out, f"{mode}_{solver}_{name}.csv"), text.encode())
                finals.append(final)
            summary.append(f"{mode},{solver},{len(finals)},{float(np.mean(finals))!r}")
            print(f"{mode:10s} {solver:12s} mean final energy {np.mean(finals):.6g}", file=sys.stderr)
    atomic_write_bytes(os.path.join(args.out, "summary.csv"), ("\n".join(summary) + "\n").encode())
    skip_lines = ["mode,solver,reason"] + [",".join(s) for s in skipped]
    atomic_write_bytes(os.path.join(args.out, "skipped.csv"), ("\n".join(skip_lines) + "\n").encode())
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoothlab", description="Unsupervised energy-based image smoothing.")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for per-image work (env SMOOTHLAB_THREADS; default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", default=None, choices=apps.PRESET_IDS)
        p.add_argument("--config", default=None, help="JSON configuration file")

    p = sub.add_parser("smooth", help="smooth one image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--solver", choices=("gd", "irls", "cnn"), default="gd")
    common(p)
    p.add_argument("--model", help="model file (cnn solver)")
    p.add_argument("--mask", help="saliency mask for content presets")
    p.add_argument("--trace", help="write the per-iteration energy CSV here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--detail-k", type=float, default=None, help="write T + k*(I - T) instead of T")
    p.add_argument("--export-mask", help="write the important-edge mask B here")
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("train", help="train a network on a corpus without labels")
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", required=True, help="checkpoint directory")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--network", choices=("TOY8", "PAPER26"), default=None)
    p.add_argument("--width", type=int, default=None, help="override channel width")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--overfit", default=None, help="train on this single image")
    p.add_argument("--init-model", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score one forward pass per image")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", default=None, help="CSV path")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("precompute", help="cache guidance maps and masks for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--cache-dir", default=None)
    common(p)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("compare-solvers", help="loss curves for fixed and dynamic p-maps")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.add_argument("--overfit-steps", type=int, default=100)
    p.add_argument("--network", choices=("TOY8", "PAPER26"), default="TOY8")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare_solvers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads(args)
        return args.func(args)
    except (UsageError, ConfigError, PrecomputeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageIOError, ModelFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, TrainingError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
