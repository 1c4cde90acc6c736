"""Command-line entry point: ``csgos <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CheckpointError, CSGError, EmptyCorpus, LabelMismatch, MissingTarget, NoCategoryFound,
                     ParseError, UnknownTarget, ValidationError)
from .generator import GeneratorConfig, generate_corpus, load_corpus
from .graph import D_THRE, attach_target, build_csg, target_query_for
from .io_utils import atomic_write_text
from .knowledge import ProviderConfig, TargetQuery, get_provider
from .model import (BATCH_GRAPHS, DEFAULT_CHECKPOINT, LINK_THRESHOLD, CSGTLClassifier, TrainConfig,
                    evaluate_accuracy, forward, statistical_baseline)
from .planner import (PRESETS, PlannerConfig, astar_distance, candidates_csv, overlay_pgm, partition_regions,
                      project_likelihood, rank_candidates)
from .scene import DEFAULT_RESOLUTION, load_scene, rasterize_occupancy
from .sim import (SINGLE_ROOMS, DetectorConfig, EpisodeConfig, make_episodes, metrics, run_episode, sample_start,
                  trace_jsonl)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
PAPER = "[paper-default]"
DATA_ERRORS = (CheckpointError, ParseError, ValidationError, EmptyCorpus, LabelMismatch, MissingTarget,
               UnknownTarget, NoCategoryFound, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    """Bad or inconsistent flags, detected before any work starts."""


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {', '.join(missing)}")


def _categories(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(c.strip() for c in text.split(",") if c.strip())


def _provider(args):
    cfg = ProviderConfig.from_env(backend=args.backend, cache_dir=args.cache_dir, lexicon_path=args.lexicon)
    return get_provider(cfg)


def _planner(args) -> PlannerConfig:
    base = dict(PRESETS[args.scenario])
    for key in ("w", "alpha", "beta"):
        value = getattr(args, key)
        if value is not None:
            base[key] = value
    if abs(base["alpha"] + base["beta"] - 1.0) > 1e-9:
        raise UsageError(f"--alpha and --beta must sum to 1 (got {base['alpha']} + {base['beta']})")
    try:
        return PlannerConfig(r=args.r, link_threshold=args.threshold, **base)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path):
    path = Path(path) if path else DEFAULT_CHECKPOINT
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return CSGTLClassifier.load(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- subcommands -----------------------------------------------------------

def cmd_generate(args) -> int:
    _require(args, "out", "n")
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    if not 0 < args.split < 1:
        raise UsageError("--split must lie in (0, 1)")
    cfg = GeneratorConfig.load(args.config) if args.config else GeneratorConfig()
    try:
        cfg = replace(cfg, seed=args.seed, d_thre=args.d_thre, heldout_categories=_categories(args.heldout))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_corpus(cfg, args.n, args.split, args.out, jobs=args.jobs)
    n_train = sum(e["split"] == "train" for e in manifest["scenes"])
    print(f"wrote {args.n} scenes ({n_train} train, {args.n - n_train} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "corpus", "out")
    if not args.lr > 0:
        raise UsageError("--lr must be > 0")
    try:
        TrainConfig(batch_graphs=args.batch, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                    link_threshold=args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    warm, start_epoch = None, 0
    if args.resume:
        prev = CSGTLClassifier.load(args.resume)
        warm, start_epoch = prev.params_, prev.epochs_completed_
    prov = _provider(args)
    corpus = load_corpus(args.corpus, "train", prov, args.d_thre, exclude=_categories(args.heldout))
    est = CSGTLClassifier(batch_graphs=args.batch, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                          link_threshold=args.threshold)
    if warm is not None:
        dims = warm.dims
        est.set_params(d_hid=dims["d_hid"], d_k=dims["d_k"], d_mlp=dims["d_mlp"])
    est.fit(corpus, warm_start_params=warm, start_epoch=start_epoch)
    est.save(args.out, {"corpus": str(args.corpus), "heldout": list(_categories(args.heldout)),
                        "d_thre": args.d_thre, "resumed_from": args.resume})
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    previous = log_path.read_text() if args.resume and log_path.exists() else ""
    atomic_write_text(log_path, previous + "".join(json.dumps(r, sort_keys=True) + "\n" for r in est.loss_curve_))
    last = est.loss_curve_[-1] if est.loss_curve_ else {}
    print(f"trained epochs {start_epoch + 1}..{est.epochs_completed_} on {len(corpus)} graphs; "
          f"final mean_loss {last.get('mean_loss', float('nan')):.4f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval_link(args) -> int:
    _require(args, "corpus")
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    prov = _provider(args)
    est = _load_model(args.checkpoint)
    heldout = _categories(args.heldout)
    train = load_corpus(args.corpus, "train", prov, args.d_thre, exclude=heldout)
    test = load_corpus(args.corpus, args.split, prov, args.d_thre)
    base = statistical_baseline(train)
    report = {
        "checkpoint": str(args.checkpoint or DEFAULT_CHECKPOINT.name),
        "split": args.split,
        "threshold": args.threshold,
        "n_samples": len(test),
        "n_scenes": len({s.scene_id for s in test}),
        "csgtl_acc": evaluate_accuracy(test, est.params_, args.threshold),
        "statistical_acc": evaluate_accuracy(test, base),
    }
    if heldout:
        held = [s for s in test if s.meta.get("category") in heldout]
        report["heldout_categories"] = list(heldout)
        if held:
            report["heldout_csgtl_acc"] = evaluate_accuracy(held, est.params_, args.threshold)
            report["heldout_statistical_acc"] = evaluate_accuracy(held, base)
    text = _dump(report)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def _scene_target(scene, text: str, provider) -> tuple[str, TargetQuery]:
    ids = {o.id for o in scene.movable}
    if text in ids:
        return text, target_query_for(scene.get(text))
    q = provider.parse_target_query(text)
    for obj in scene.movable:
        if obj.category == q.category:
            return obj.id, q
    raise UnknownTarget(f"scene {scene.name!r} holds no {q.category!r}")


def _episodes_for(args, planner, detector, provider) -> list[EpisodeConfig]:
    if args.scene:
        scene = load_scene(args.scene)
        target_text = args.target or (scene.movable[0].id if scene.movable else None)
        if target_text is None:
            raise UnknownTarget(f"scene {scene.name!r} has no movable object to search for")
        target_id, query = _scene_target(scene, target_text, provider)
        grid = rasterize_occupancy(scene, DEFAULT_RESOLUTION)
        rng = np.random.default_rng(args.seed)
        out = []
        for k in range(args.episodes):
            start = sample_start(scene, grid, scene.get(target_id), detector, rng)
            out.append(EpisodeConfig(scene, target_id, start, args.max_steps, planner, detector,
                                     seed=args.seed + k, query=query, d_thre=args.d_thre))
        return out
    kinds = ("multi",) if args.scenario == "multi-room" else SINGLE_ROOMS
    eps = make_episodes(args.episodes, args.seed, room_kinds=kinds, max_steps=args.max_steps,
                        planner=planner, detector=detector)
    return [replace(e, d_thre=args.d_thre) for e in eps]


def cmd_search(args) -> int:
    _require(args, "out")
    planner = _planner(args)
    if args.episodes < 1 or args.max_steps < 1:
        raise UsageError("--episodes and --max-steps must be >= 1")
    detector = DetectorConfig(success_radius=args.success_radius)
    prov = _provider(args)
    model = _load_model(args.checkpoint) if args.policy == "csgos" else None
    episodes = _episodes_for(args, planner, detector, prov)

    def run(ep):
        return run_episode(ep, model, prov, policy=args.policy)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, episodes))
    else:
        results = [run(e) for e in episodes]
    out = Path(args.out)
    for k, r in enumerate(results):
        atomic_write_text(out / "traces" / f"episode_{k:04d}.jsonl", trace_jsonl(r.trace))
    report = metrics(results)
    report["policy"] = args.policy
    report["planner"] = asdict(planner)
    report["results"] = [r.summary() for r in results]
    atomic_write_text(out / "metrics.json", _dump(report))
    print(f"{len(results)} episodes: SR {report['SR']:.3f}  SPL {report['SPL']:.3f}  -> {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    _require(args, "scene", "out")
    planner = _planner(args)
    prov = _provider(args)
    scene = load_scene(args.scene)
    grid = rasterize_occupancy(scene, DEFAULT_RESOLUTION)
    if args.target:
        target_id, query = _scene_target(scene, args.target, prov)
    elif scene.movable:
        target_id = scene.movable[0].id
        query = target_query_for(scene.get(target_id))
    else:
        raise UnknownTarget(f"scene {scene.name!r} has no movable object to search for")
    est = _load_model(args.checkpoint)
    g = attach_target(build_csg(scene, args.d_thre, prov), query, prov, target_id=target_id)
    pred = forward(g, est.params_)
    by_id = {n.node_id: n for n in g.nodes}
    correlated = [(by_id[node].pose.xy, float(p)) for (_, node), p in zip(pred.pairs, pred.p)]
    m = project_likelihood(correlated, grid, planner)
    regions = partition_regions(m, planner)
    rng = np.random.default_rng(args.seed)
    start = sample_start(scene, grid, scene.get(target_id), DetectorConfig(), rng)
    cands, path = [], []
    if any(r.weight > 0 for r in regions):
        cands = rank_candidates(regions, (start.x, start.y), grid, planner)
        _, path = astar_distance(grid, start.cell(grid), cands[0].center_cell)
    out = Path(args.out)
    atomic_write_text(out / "heatmap.pgm", m.to_pgm())
    atomic_write_text(out / "heatmap.csv", m.to_csv())
    atomic_write_text(out / "overlay.pgm", overlay_pgm(m, cands[:3], path))
    atomic_write_text(out / "candidates.csv", candidates_csv(cands))
    print(f"target {target_id}: {len(cands)} candidate regions; plots in {out}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(_dump({
        "d_thre": {"value": D_THRE, "source": "paper"},
        "batch": {"value": BATCH_GRAPHS, "source": "paper"},
        "threshold": {"value": LINK_THRESHOLD, "source": "paper"},
        "success_radius": {"value": 1.0, "source": "paper"},
        "move_step_m": {"value": DEFAULT_RESOLUTION, "source": "paper"},
        "turn_deg": {"value": 45, "source": "paper"},
        "scenarios": {"value": PRESETS, "source": "paper"},
        "r": {"value": 1.0, "source": "chosen"},
        "epochs": {"value": TrainConfig().epochs, "source": "chosen"},
        "lr": {"value": TrainConfig().learning_rate, "source": "chosen"},
        "max_steps": {"value": 250, "source": "chosen"},
    }))
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = functools.partial(argparse.HelpFormatter, max_help_position=32, width=140)
    p = argparse.ArgumentParser(prog="csgos", description="Commonsense scene graph object search toolkit.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"csgos {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    add = functools.partial(sub.add_parser, formatter_class=fmt)

    def common(sp, seed=0):
        sp.add_argument("--seed", type=int, default=seed, help=f"random seed (default {seed})")
        sp.add_argument("--d-thre", type=float, default=D_THRE,
                        help=f"edge distance threshold in meters (default {D_THRE}) {PAPER}")
        sp.add_argument("--backend", choices=("offline", "external"), default="offline",
                        help="knowledge backend (default offline)")
        sp.add_argument("--cache-dir", help="response cache for the external backend")
        sp.add_argument("--lexicon", help="lexicon JSON overriding the bundled category phrases")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")

    def planner_flags(sp):
        sp.add_argument("--scenario", choices=sorted(PRESETS), default="single-room",
                        help=f"preset for w/alpha/beta (default single-room) {PAPER}")
        sp.add_argument("--r", type=float, default=1.0, help="likelihood spread radius in meters (default 1.0)")
        sp.add_argument("--w", type=float, help=f"per-object award weight (single-room 0.05) {PAPER}")
        sp.add_argument("--alpha", type=float, help=f"likelihood cost weight (single-room 0.4) {PAPER}")
        sp.add_argument("--beta", type=float, help=f"distance cost weight (single-room 0.6) {PAPER}")
        sp.add_argument("--threshold", type=float, default=LINK_THRESHOLD,
                        help=f"link threshold (default {LINK_THRESHOLD}) {PAPER}")
        sp.add_argument("--checkpoint", help="model checkpoint (default: bundled)")

    sp = add("generate", help="write a synthetic scene corpus")
    sp.add_argument("--n", type=int, help="number of scenes")
    sp.add_argument("--split", type=float, default=0.8, help="train fraction (default 0.8)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--config", help="generator config JSON (schema csg-gen/1)")
    sp.add_argument("--heldout", help="comma-separated movable categories recorded as held out")
    common(sp, seed=7)
    sp.set_defaults(func=cmd_generate)

    sp = add("train", help="train the link predictor")
    sp.add_argument("--corpus", help="corpus directory or manifest")
    sp.add_argument("--out", help="checkpoint path to write")
    sp.add_argument("--resume", help="checkpoint to continue from; epoch numbering continues")
    sp.add_argument("--log", help="JSONL training log (default <out>.log.jsonl)")
    sp.add_argument("--epochs", type=int, default=TrainConfig().epochs, help="epochs (default 40)")
    sp.add_argument("--lr", type=float, default=TrainConfig().learning_rate, help="Adam learning rate (default 1e-3)")
    sp.add_argument("--batch", type=int, default=BATCH_GRAPHS, help=f"graphs per batch (default 32) {PAPER}")
    sp.add_argument("--threshold", type=float, default=LINK_THRESHOLD,
                    help=f"link threshold for accuracy (default {LINK_THRESHOLD}) {PAPER}")
    sp.add_argument("--heldout", help="comma-separated movable categories excluded from training")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = add("eval-link", help="link accuracy of the model and the statistical baseline")
    sp.add_argument("--corpus", help="corpus directory or manifest")
    sp.add_argument("--checkpoint", help="model checkpoint (default: bundled)")
    sp.add_argument("--split", choices=("train", "test"), default="test", help="split to score (default test)")
    sp.add_argument("--threshold", type=float, default=LINK_THRESHOLD,
                    help=f"link threshold (default {LINK_THRESHOLD}) {PAPER}")
    sp.add_argument("--heldout", help="comma-separated categories held out of the baseline; reported separately")
    sp.add_argument("--out", help="write the JSON report here as well as to stdout")
    common(sp)
    sp.set_defaults(func=cmd_eval_link)

    sp = add("search", help="run object-search episodes")
    sp.add_argument("--scene", help="scene JSON; without it, scenes are generated")
    sp.add_argument("--target", help="target object id or free-text query (with --scene)")
    sp.add_argument("--episodes", type=int, default=1, help="number of episodes (default 1)")
    sp.add_argument("--max-steps", type=int, default=250,
                    help=f"action budget per episode (default 250); MoveAhead {DEFAULT_RESOLUTION} m and "
                         f"45 degree turns {PAPER}")
    sp.add_argument("--success-radius", type=float, default=1.0, help=f"success radius in meters (default 1.0) {PAPER}")
    sp.add_argument("--policy", choices=("csgos", "random"), default="csgos", help="search policy (default csgos)")
    sp.add_argument("--out", help="output directory for traces and metrics")
    planner_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_search)

    sp = add("plot", help="export likelihood heatmap, candidates and path overlay")
    sp.add_argument("--scene", help="scene JSON")
    sp.add_argument("--target", help="target object id or free-text query")
    sp.add_argument("--out", help="output directory")
    planner_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_plot)

    sp = add("defaults", help="print default hyperparameters and their provenance")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage or help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"csgos: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"csgos: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CSGError, OSError) as exc:
        print(f"csgos: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
