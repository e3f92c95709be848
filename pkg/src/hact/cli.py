"""Command line front end: one subcommand per pipeline stage.

Every command reads an experiment config (defaults when ``--config`` is
omitted), optionally reseeds all rng-bearing knobs from ``--seed``, runs one
pipeline, and writes its delimited metrics plus the matching figures into
``--out``.  All outputs are reproducible from (config, seed); nothing embeds
timestamps or machine state.

Exit codes: 0 success, 1 usage or configuration error, 2 bad or missing
data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import (
    checkpoint_meta,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .config import ExperimentConfig, load_config, parse_config, with_seed
from .dataio import read_dataset, write_crop_rects, write_dataset
from .errors import DataError, HactError, UsageError
from .hierarchy import build_hierarchy, edge_costs, greedy_partition, parse_hierarchy_text
from .model import build_model, gradient_attribution
from .pipeline import make_bundle
from .preprocess import augment, crop_rect, crop_resize, fit_projection, project, sample_frames
from .pruning import pruning_loop
from .synthetic import generate_synthetic
from .training import PruneTrainer, evaluate, train_first_pass, train_hierarchical


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports bad invocations through the exit-code map."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
        cfg.validate()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def _with_dataset_spec(cfg: ExperimentConfig, dataset) -> ExperimentConfig:
    """Mirror the loaded dataset's generator fields into the config.

    Checkpoints snapshot the config, and rebuilding a model needs the class
    count the data actually has, not whatever the config file claimed.
    """
    s = dataset.spec
    data = replace(
        cfg.data,
        n_classes=s.n_classes,
        n_families=s.n_families,
        clips_per_class=s.clips_per_class,
        frame_h=s.frame_h,
        frame_w=s.frame_w,
        clip_len=s.clip_len,
        n_joints=s.n_joints,
        clutter=s.clutter,
        offset_range=s.offset_range,
        test_fraction=s.test_fraction,
        seed=s.seed,
    )
    return replace(cfg, data=data)


def _load_data(cfg: ExperimentConfig):
    """The dataset named by the config: read from disk, or generated."""
    if cfg.data.path:
        dataset = read_dataset(cfg.data.path)
        return dataset, _with_dataset_spec(cfg, dataset)
    return generate_synthetic(cfg.data.spec()), cfg


def _bundle(cfg: ExperimentConfig, dataset):
    p = cfg.preprocess
    return make_bundle(
        dataset,
        crop=p.crop,
        out_size=p.out_size,
        margin=p.margin,
        val_fraction=p.val_fraction,
        val_seed=p.val_seed,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_matrix_csv(path, matrix) -> None:
    m = np.asarray(matrix)
    _write_lines(path, (",".join(_num(v) for v in row) for row in m))


def _num(v) -> str:
    f = float(v)
    return str(int(f)) if f == int(f) else repr(f)


def _read_matrix_csv(path) -> np.ndarray:
    p = Path(path)
    try:
        text = p.read_text(encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot read matrix {p}: {exc.strerror}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            rows.append([float(tok) for tok in s.split(",")])
        except ValueError:
            raise DataError(f"{p}:{lineno}: expected comma-separated numbers") from None
    if not rows:
        raise DataError(f"{p}: no matrix rows")
    n = len(rows[0])
    if any(len(r) != n for r in rows) or len(rows) != n:
        raise DataError(f"{p}: expected a square matrix, got rows of varying width "
                        f"or {len(rows)} rows of {n} columns")
    return np.array(rows, dtype=np.float64)


def _checkpoint_setup(args):
    """Model plus effective config for commands that start from a checkpoint.

    Without ``--config`` the snapshot inside the checkpoint is used, so these
    commands run from the checkpoint file alone.
    """
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, path=str(args.checkpoint))
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config(ckpt.meta["config"], source=f"{args.checkpoint}:config")
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return ckpt, model, cfg


def _eval_batch(clip_set, indices, cfg) -> np.ndarray:
    """Deterministic eval-protocol inputs: midpoint frames, center crop."""
    xs = []
    for i in indices:
        frames = np.asarray(clip_set.clips[i], dtype=np.float64)
        fidx = sample_frames(len(frames), cfg.frames_per_clip, "test")
        sub = frames[fidx][:, None]
        xs.append(augment(sub, "test", cfg.crop_size).transpose(1, 0, 2, 3))
    return np.stack(xs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _experiment(args)
    dataset = generate_synthetic(cfg.data.spec())
    out = _out_dir(args)
    write_dataset(dataset, out, frame_format=args.format)
    samples = {}
    for clip in dataset.clips:
        key = f"class {clip.label}"
        if key not in samples:
            samples[key] = clip.frames[len(clip.frames) // 2]
    report.save_sample_frames(samples, out / "samples.png")
    print(f"wrote {len(dataset.clips)} clips across {cfg.data.n_classes} classes to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _experiment(args)
    dataset, cfg = _load_data(cfg)
    out = _out_dir(args)
    rects = {}
    for clip in dataset.clips:
        h, w = clip.frames.shape[1], clip.frames.shape[2]
        rects[clip.clip_id] = crop_rect(clip.skeleton2d, w, h, cfg.preprocess.margin)
    write_crop_rects(out / "crop_rects.csv", rects)
    first = dataset.clips[0]
    rect = rects[first.clip_id]
    cropped = crop_resize(
        np.asarray(first.frames, dtype=np.float64)[:, None],
        rect,
        cfg.preprocess.out_size,
        cfg.preprocess.out_size,
    )[:, 0]
    report.save_crop_preview(first.frames, rect, cropped, out / "crop_preview.png")
    print(f"wrote crop rectangles for {len(rects)} clips to {out / 'crop_rects.csv'}")
    return 0


def cmd_fit_projection(args) -> int:
    cfg = _experiment(args)
    dataset, cfg = _load_data(cfg)
    pts = np.concatenate([c.skeleton3d.reshape(-1, 3) for c in dataset.clips])
    pix = np.concatenate([c.skeleton2d.reshape(-1, 2) for c in dataset.clips])
    b_x, b_y = dataset.params.b_x, dataset.params.b_y
    params = fit_projection(pts, pix, b_x=b_x, b_y=b_y)
    out = _out_dir(args)
    _write_lines(
        out / "projection.csv",
        [
            "c_x,c_y,b_x,b_y",
            ",".join(repr(v) for v in (params.c_x, params.c_y, params.b_x, params.b_y)),
        ],
    )
    report.save_projection_scatter(pix, project(pts[None], params)[0], out / "projection.png")
    print(f"fitted focal coefficients c_x={params.c_x!r} c_y={params.c_y!r} "
          f"from {pts.shape[0]} samples")
    return 0


def cmd_partition(args) -> int:
    cfg = _experiment(args)
    m = _read_matrix_csv(args.confusion)
    if np.allclose(m, m.T) and not np.diagonal(m).any():
        costs = m  # already symmetric zero-diagonal edge costs
    else:
        costs = edge_costs(m)
    restarts = cfg.hierarchy.restarts if args.restarts is None else args.restarts
    assignment, cost = greedy_partition(costs, args.k, restarts=restarts, seed=cfg.hierarchy.seed)
    if args.out:
        out = _out_dir(args)
        _write_lines(
            out / "partition.csv",
            ["class,superclass"] + [f"{c},{g}" for c, g in enumerate(assignment)],
        )
    for g in range(args.k):
        members = " ".join(str(c) for c in np.nonzero(assignment == g)[0])
        print(f"superclass {g}: {members}")
    print(f"cost {_num(cost)}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    dataset, cfg = _load_data(cfg)
    bundle = _bundle(cfg, dataset)
    stack = cfg.stack_config()
    out = _out_dir(args)

    model = build_model(stack, seed=cfg.model.seed)
    first = train_first_pass(model, bundle, cfg.train)
    _write_lines(out / "first_pass.csv", first.metrics.csv_lines())
    report.save_training_curves(first.metrics.rows, out / "first_pass.png", title="first pass")
    _write_matrix_csv(out / "first_confusion.csv", first.confusion)
    report.save_confusion_matrix(
        first.confusion, out / "first_confusion.png", title="first pass confusion"
    )
    first_acc = float(np.trace(first.confusion)) / float(first.confusion.sum())
    print(f"first pass: val accuracy {first_acc:.6f}")

    costs = edge_costs(first.confusion)
    hierarchy = build_hierarchy(
        costs, cfg.hierarchy.k_list, restarts=cfg.hierarchy.restarts, seed=cfg.hierarchy.seed
    )
    with open(out / "hierarchy.txt", "w", encoding="ascii") as fh:
        fh.write(hierarchy.to_text())

    if cfg.train.warm_start:
        second_model = model
    else:
        second_model = build_model(stack, seed=cfg.model.seed)
    second = train_hierarchical(second_model, bundle, hierarchy, cfg.train)
    _write_lines(out / "second_pass.csv", second.metrics.csv_lines())
    report.save_training_curves(second.metrics.rows, out / "second_pass.png", title="second pass")

    scored = evaluate(second_model, bundle.val, cfg.train)
    _write_matrix_csv(out / "confusion.csv", scored.confusion)
    report.save_confusion_matrix(scored.confusion, out / "confusion.png", title="validation confusion")
    print(f"second pass: val accuracy {scored.accuracy:.6f}")

    meta = checkpoint_meta(
        cfg,
        hierarchy,
        extra={
            "first_pass_val_accuracy": f"{first_acc:.6f}",
            "val_accuracy": f"{scored.accuracy:.6f}",
        },
    )
    save_checkpoint(second_model, meta, out / "checkpoint.ckpt")
    _write_lines(
        out / "summary.txt",
        [
            f"first_pass_val_accuracy {first_acc:.6f}",
            f"second_pass_val_accuracy {scored.accuracy:.6f}",
            f"checkpoint checkpoint.ckpt",
        ],
    )
    return 0


def cmd_prune(args) -> int:
    ckpt, model, cfg = _checkpoint_setup(args)
    if not ckpt.meta.get("hierarchy"):
        raise DataError(
            f"{args.checkpoint}: checkpoint has no hierarchy; prune needs one from train"
        )
    hierarchy = parse_hierarchy_text(ckpt.meta["hierarchy"])
    dataset, cfg = _load_data(cfg)
    bundle = _bundle(cfg, dataset)
    out = _out_dir(args)

    trainer = PruneTrainer(bundle, hierarchy, cfg.train, epochs=cfg.prune.retrain_epochs)
    result = pruning_loop(
        model,
        trainer,
        p=cfg.prune.fraction,
        variant=cfg.prune.variant,
        max_passes=cfg.prune.max_passes,
    )
    _write_lines(out / "prune_metrics.csv", result.csv_lines())
    report.save_prune_curve(result.records, result.best_pass, out / "prune_curve.png")

    best = result.records[result.best_pass]
    meta = checkpoint_meta(
        cfg,
        hierarchy,
        extra={
            "best_pass": best.index,
            "pruned_total": best.pruned_total,
            "val_accuracy": f"{best.val_accuracy:.6f}",
        },
    )
    save_checkpoint(model, meta, out / "pruned.ckpt")
    print(f"kept pass {best.index}: {best.pruned_total} filters pruned, "
          f"val accuracy {best.val_accuracy:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt, model, cfg = _checkpoint_setup(args)
    dataset, cfg = _load_data(cfg)
    bundle = _bundle(cfg, dataset)
    out = _out_dir(args)

    val = evaluate(model, bundle.val, cfg.train)
    test = evaluate(model, bundle.test, cfg.train)
    _write_lines(
        out / "eval_metrics.csv",
        [
            "split,clips,accuracy",
            f"val,{len(bundle.val)},{val.accuracy:.6f}",
            f"test,{len(bundle.test)},{test.accuracy:.6f}",
        ],
    )
    _write_matrix_csv(out / "confusion.csv", val.confusion)
    report.save_confusion_matrix(val.confusion, out / "confusion.png", title="validation confusion")
    print(f"val accuracy {val.accuracy:.6f}")
    print(f"test accuracy {test.accuracy:.6f}")
    return 0


def cmd_attribution(args) -> int:
    ckpt, model, cfg = _checkpoint_setup(args)
    dataset, cfg = _load_data(cfg)
    bundle = _bundle(cfg, dataset)
    n = min(args.clips, len(bundle.val))
    if n < 1:
        raise DataError("validation split has no clips to attribute")
    batch = _eval_batch(bundle.val, range(n), cfg.train)
    out = _out_dir(args)

    maps = {}
    rows = ["head,frame,mean,max"]
    for head in range(1, 5):
        full = gradient_attribution(model, batch, head_index=head)
        m = full.mean(axis=0)
        peak = m.max()
        if peak > 0.0:
            m = m / peak
        maps[f"head {head}"] = m
        for t in range(m.shape[0]):
            rows.append(f"{head},{t},{m[t].mean():.6f},{m[t].max():.6f}")
    _write_lines(out / "attribution.csv", rows)
    report.save_attribution_grid(maps, out / "attribution.png")
    print(f"wrote attribution maps over {n} validation clips to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="experiment config file")
    common.add_argument("--seed", type=int, default=None,
                        help="reseed every rng-bearing knob from one integer")

    parser = _Parser(prog="hact", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="render a synthetic dataset to disk")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--format", choices=("hfrm", "pgm"), default="hfrm",
                   help="frame container format")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common],
                       help="compute skeleton crop rectangles")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit-projection", parents=[common],
                       help="fit focal coefficients from 3D/2D skeleton pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit_projection)

    p = sub.add_parser("partition", parents=[common],
                       help="group classes by confusion cost")
    p.add_argument("--confusion", required=True,
                   help="square matrix CSV: confusion counts, or symmetric "
                        "zero-diagonal edge costs used as-is")
    p.add_argument("--k", type=int, required=True, help="number of superclasses")
    p.add_argument("--restarts", type=int, default=None,
                   help="override hierarchy.restarts")
    p.add_argument("--out", default=None, help="optional directory for partition.csv")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", parents=[common],
                       help="two-pass training: flat, then hierarchy-weighted")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", parents=[common],
                       help="iterative filter pruning with retraining")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("evaluate", parents=[common],
                       help="averaged-softmax scoring of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribution", parents=[common],
                       help="per-head gradient heat maps on validation clips")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--clips", type=int, default=4,
                   help="validation clips in the probe batch")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attribution)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except HactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
