"""Command-line front end.

Subcommands:
  gen-corpus   write a synthetic labeled face corpus and its manifest
  simulate     add blurred twins of every still to a manifest (two-stream data)
  train        run the staged schedule on a manifest, writing checkpoints,
               a TSV loss log, and a loss-curve figure
  eval         match probes against a gallery with trained weights, writing
               the report, an ROC table, and an ROC figure
  gradcheck    finite-difference validation of all differentiable ops
  costs        static mult-add model of a network preset

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Every
command that draws random numbers requires an explicit --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import yaml

from . import blur, checkpoint, corpus, evaluate, gradcheck, imageio, model, trainer
from .errors import CheckpointError, ConfigError, VideofaceError

PROTOCOL_CHOICES = tuple(evaluate.PROTOCOLS)
STAGE_CHOICES = ("A", "B", "C", "D", "all")


def _load_yaml(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: bad YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = _load_yaml(path)
    unknown = set(cfg) - {"model", "plan"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    return cfg


def _resolve_graph(args, cfg: dict) -> model.LayerGraph:
    if "model" in cfg:
        if args.preset is not None:
            raise ConfigError("give either --preset or a config with a model section, not both")
        return model.graph_from_dict(cfg["model"])
    return model.load_preset(args.preset or "mini_tbe")


def _resolve_plan(args, cfg: dict) -> trainer.TrainPlan:
    plan = trainer.plan_from_dict(cfg.get("plan", {}))
    overrides = {}
    for field in ("mining", "alpha", "beta", "loss_d", "stream_mix"):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    return dataclasses.replace(plan, **overrides) if overrides else plan


def _load_weights(net: model.Network, path: str) -> None:
    arrays = checkpoint.load_arrays(path)
    for name, t in net.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name!r} missing from checkpoint")
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, "
                f"model wants {t.data.shape}"
            )
        t.data[...] = arrays[name]
    # optimizer slots and temporary training heads in the file are fine to skip


# ------------------------------------------------------------------- commands


def cmd_gen_corpus(args, parser) -> int:
    if args.n_subjects <= 0:
        parser.error("--n-subjects must be positive")
    if args.frames <= 0:
        parser.error("--frames must be positive")
    manifest = corpus.generate_corpus(
        args.out,
        args.n_subjects,
        args.frames,
        args.seed,
        stills_per_subject=args.stills_per_subject,
        videos_per_subject=args.videos_per_subject,
        blur_probes=not args.no_blur_probes,
        size=args.size,
    )
    records = imageio.read_manifest(manifest)
    n_still = sum(1 for r in records if r.stream == "still")
    n_videos = len({(r.subject_id, r.video_id) for r in records if r.video_id is not None})
    print(f"wrote {manifest}: {n_still} stills, {n_videos} videos, {len(records)} records")
    return 0


def cmd_simulate(args, parser) -> int:
    out_manifest, errors = blur.build_two_stream(args.manifest, args.out, args.seed)
    records = imageio.read_manifest(out_manifest)
    n_sim = sum(1 for r in records if r.stream == "sim_video")
    print(f"wrote {out_manifest}: {n_sim} simulated frames, {len(errors)} errors")
    if errors:
        print(f"error details: {out_manifest}.errors.txt", file=sys.stderr)
        return 1
    return 0


def cmd_train(args, parser) -> int:
    cfg = _load_config(args.config)
    graph = _resolve_graph(args, cfg)
    plan = _resolve_plan(args, cfg)
    data = trainer.TrainData(args.manifest)
    net = model.Network(graph)
    tr = trainer.Trainer(net, plan, data, args.out, args.seed)
    result = tr.train(stages=args.stage, resume=args.resume)
    for st in result.history:
        if st.epoch == plan.stages[st.stage].epochs - 1:
            extra = ""
            if st.mean_n is not None:
                extra = f"  N={st.mean_n:.2f} P={st.mean_p:.2f}"
            print(f"stage {st.stage}: final mean loss {st.mean_loss:.6f}{extra}")
    from . import report

    curve = report.save_loss_png(result.log_path, os.path.join(args.out, "loss_curve.png"))
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"log: {result.log_path}")
    print(f"figure: {curve}")
    return 0


def cmd_eval(args, parser) -> int:
    if args.occlude and args.seed is None:
        parser.error("--occlude needs --seed")
    if not os.path.exists(args.weights):
        print(f"error: missing checkpoint: {args.weights}", file=sys.stderr)
        return 1
    cfg = _load_config(args.config)
    graph = _resolve_graph(args, cfg)
    net = model.Network(graph)
    _load_weights(net, args.weights)
    target_fars = tuple(args.target_far) if args.target_far else (0.01,)
    rep = evaluate.run_protocol(
        net,
        args.manifest,
        args.protocol,
        target_fars=target_fars,
        occlude_fraction=args.occlude,
        seed=args.seed,
    )
    report_path, roc_path = evaluate.write_report(rep, args.out)
    from . import report

    fig_path = report.save_roc_png(rep.roc, os.path.join(args.out, "roc.png"), title=rep.protocol)
    print(f"protocol {rep.protocol}: {len(rep.scores)} scores")
    for far in sorted(rep.vr_at_far):
        print(f"VR@{far:g}FAR = {rep.vr_at_far[far]:.4f}")
    if rep.rank1 is not None:
        print(f"rank-1 = {rep.rank1:.4f}")
    print(f"report: {report_path}")
    print(f"roc: {roc_path}")
    print(f"figure: {fig_path}")
    return 0


def cmd_gradcheck(args, parser) -> int:
    seeds = tuple(range(args.seed, args.seed + args.n_seeds))
    dtype = np.float32 if args.dtype == "float32" else np.float64
    results = gradcheck.run_suite(
        names=args.ops or None, seeds=seeds, dtype=dtype, h=args.step, tol=args.tol
    )
    failed = [r for r in results if not r.ok]
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:<22s} max_rel_err {r.max_rel_err:.3e}  tol {r.tol:.1e}  {status}")
    if failed:
        print(f"FAIL ({len(failed)} of {len(results)} ops exceeded tolerance)")
        return 1
    print(f"PASS ({len(results)} ops within tolerance)")
    return 0


def cmd_costs(args, parser) -> int:
    cfg = _load_config(args.config)
    graph = _resolve_graph(args, cfg)
    rep = model.count_costs(graph)
    name = args.preset or ("config model" if "model" in cfg else "mini_tbe")
    print(f"network: {name}")
    if args.per_layer:
        for lname, cost, shape in rep.per_layer:
            print(f"  {lname:<28s} {cost:>14,d}  {shape}")
    print(f"trunk mult-adds:      {rep.trunk_mult_adds:,d}")
    print(f"full mult-adds:       {rep.full_mult_adds:,d}")
    print(f"no-sharing mult-adds: {rep.nosharing_mult_adds:,d}")
    print(f"full/trunk ratio: {rep.ratio_full:.3f}")
    print(f"no-sharing/trunk ratio: {rep.ratio_nosharing:.3f}")
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videoface",
        description="blur-robust video face matching: corpus, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-subjects", type=int, default=50)
    p.add_argument("--frames", type=int, default=8, help="frames per video")
    p.add_argument("--stills-per-subject", type=int, default=1)
    p.add_argument("--videos-per-subject", type=int, default=1)
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--no-blur-probes", action="store_true", help="keep probe frames sharp")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("simulate", help="write blurred twins for every still")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--preset", choices=model.PRESETS)
    p.add_argument("--config", help="YAML with optional model/plan sections")
    p.add_argument("--stage", choices=STAGE_CHOICES, default="all")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--mining", choices=("semi_hard", "hard", "hardest"))
    p.add_argument("--alpha", type=float, help="mean-distance margin")
    p.add_argument("--beta", type=float, help="triplet margin")
    p.add_argument("--loss-d", dest="loss_d", choices=trainer.LOSS_D_CHOICES)
    p.add_argument("--stream-mix", dest="stream_mix", choices=trainer.STREAM_MIXES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="match probes against a gallery")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=model.PRESETS)
    p.add_argument("--config", help="YAML with a model section")
    p.add_argument("--protocol", choices=PROTOCOL_CHOICES, default="s2v")
    p.add_argument("--target-far", type=float, action="append", default=None)
    p.add_argument("--occlude", type=float, default=0.0, help="occlusion area fraction")
    p.add_argument("--seed", type=int, help="needed when --occlude is set")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, required=True, help="first seed of the sweep")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--step", type=float, default=1e-2)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--ops", nargs="*", help="subset of checks to run")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("costs", help="static compute model of a network")
    p.add_argument("--preset", choices=model.PRESETS)
    p.add_argument("--config", help="YAML with a model section")
    p.add_argument("--per-layer", action="store_true")
    p.set_defaults(func=cmd_costs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VideofaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
