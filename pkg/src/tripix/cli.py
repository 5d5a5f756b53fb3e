"""Command line entry point: data generation, training, inference, reports.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .config import (
    ConfigError,
    build_loss_config,
    build_pipeline_config,
    build_scene_specs,
    config_help,
    parse_config_file,
)
from .flops import aggregate
from .gating import POLICY_COMPUTE, POLICY_REUSE, POLICY_SKIP
from .pipeline import (
    DivergenceError,
    TRAIN_LOG_HEADER,
    load_model,
    restore_weights,
    save_model,
    segment_video,
    train,
)
from .sparseconv import mask_to_pgm_values
from .synthdata import (
    contour_accuracy_f,
    generate,
    list_sequence_dirs,
    load_sequence,
    region_similarity_j,
    save_sequence,
)
from .tensorio import write_pgm


def _ensure_out_dir(path, force: bool) -> Path:
    d = Path(path)
    if d.exists() and any(d.iterdir()) and not force:
        raise ConfigError(f"output directory {d} is not empty (use --force)")
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth_data(args) -> int:
    cfg = parse_config_file(args.config)
    scenes = build_scene_specs(cfg)
    out = _ensure_out_dir(args.out, args.force)
    for i, scene in enumerate(scenes):
        seq = generate(scene, seed=cfg["seed"] + i)
        save_sequence(out / f"seq_{i:03d}", seq, force=args.force)
    print(f"wrote {len(scenes)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    pipe_cfg = build_pipeline_config(cfg)
    loss_cfg = build_loss_config(cfg)
    sequences = [load_sequence(d) for d in list_sequence_dirs(args.data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    try:
        model, log_rows = train(sequences, pipe_cfg, loss_cfg)
    except DivergenceError as exc:
        # keep the last good checkpoint around for post-mortems
        from .nets import Model

        model = Model(pipe_cfg.arch(), np.random.default_rng(pipe_cfg.seed))
        restore_weights(model, exc.weights)
        save_model(out, model, pipe_cfg)
        _write_log(log_path, exc.log_rows)
        print(f"training diverged at iteration {exc.iteration}; "
              f"last good checkpoint written to {out}", file=sys.stderr)
        return 2
    save_model(out, model, pipe_cfg)
    _write_log(log_path, log_rows)
    print(f"trained {pipe_cfg.variant}/{pipe_cfg.strategy} for "
          f"{pipe_cfg.iterations} iterations; weights in {out}")
    return 0


def _write_log(path, rows) -> None:
    with open(path, "w") as f:
        f.write(TRAIN_LOG_HEADER + "\n")
        for row in rows:
            f.write(row.csv() + "\n")


class DumpCollector:
    """Accumulates per-layer policy dumps for one sequence."""

    def __init__(self, directory: Path):
        self.dir = directory
        self.dir.mkdir(parents=True, exist_ok=True)
        self.histogram = {}  # layer_id -> [skip, reuse, compute]
        self.compute_maps = {}  # layer_id -> accumulated policy-2 count map

    def __call__(self, layer_id: str, frame_index: int, mask: np.ndarray) -> None:
        write_pgm(
            self.dir / f"{layer_id}_frame{frame_index:03d}.pgm",
            mask_to_pgm_values(mask),
        )
        h = self.histogram.setdefault(layer_id, [0, 0, 0])
        h[0] += int(np.count_nonzero(mask == POLICY_SKIP))
        h[1] += int(np.count_nonzero(mask == POLICY_REUSE))
        h[2] += int(np.count_nonzero(mask == POLICY_COMPUTE))
        acc = self.compute_maps.get(layer_id)
        hit = (mask == POLICY_COMPUTE).astype(np.int64)
        self.compute_maps[layer_id] = hit if acc is None else acc + hit

    def finish(self, resolution) -> None:
        with open(self.dir / "policy_histogram.csv", "w") as f:
            f.write("layer_id,skip_count,reuse_count,compute_count\n")
            for layer_id in sorted(self.histogram):
                s, r, c = self.histogram[layer_id]
                f.write(f"{layer_id},{s},{r},{c}\n")
        if not self.compute_maps:
            return
        h, w = resolution
        total = np.zeros((h, w), dtype=np.float64)
        for m in self.compute_maps.values():
            reps = (h // m.shape[0], w // m.shape[1])
            total += np.kron(m, np.ones(reps))
        peak = total.max()
        if peak > 0:
            total = total / peak * 255.0
        write_pgm(self.dir / "compute_map.pgm", np.round(total).astype(np.uint8))


def _apply_infer_overrides(cfg, args):
    from dataclasses import replace

    from .config import _parse_policy

    updates = {}
    if getattr(args, "strategy", None):
        if args.strategy == "dense":
            updates["variant"] = "dense"  # disable gating for the whole run
        else:
            updates["strategy"] = args.strategy
    if getattr(args, "force_policy", None) is not None:
        updates["force_policy"] = _parse_policy(args.force_policy)
    if getattr(args, "corrupt_memory_at", None):
        updates["corrupt_memory_at"] = args.corrupt_memory_at
    if getattr(args, "memory_interval", None):
        updates["memory_interval"] = args.memory_interval
    return replace(cfg, **updates) if updates else cfg


def _run_inference(args, write_outputs: bool):
    model, cfg = load_model(args.weights)
    cfg = _apply_infer_overrides(cfg, args)
    seq_dirs = list_sequence_dirs(args.sequence)
    reports = []
    out = Path(args.out) if getattr(args, "out", None) else None
    for seq_dir in seq_dirs:
        seq = load_sequence(seq_dir)
        dump = None
        seq_out = None
        if out is not None:
            seq_out = out / seq_dir.name if len(seq_dirs) > 1 else out
            seq_out.mkdir(parents=True, exist_ok=True)
        if write_outputs and getattr(args, "dump_masks_per_layer", False):
            dump = DumpCollector(seq_out / "masks")
        masks, report = segment_video(model, seq, cfg, dump_sink=dump)
        reports.append(report)
        if dump is not None:
            dump.finish(seq.resolution)
        if write_outputs and seq_out is not None:
            for i, m in enumerate(masks):
                write_pgm(seq_out / f"pred_{i:03d}.pgm", m.astype(np.uint8) * 255)
            with open(seq_out / "metrics.csv", "w") as f:
                f.write("frame,J,F\n")
                for i, m in enumerate(masks):
                    gt = seq.gt_masks[i]
                    if gt is None:
                        continue
                    j = region_similarity_j(m, gt)
                    fb = contour_accuracy_f(m, gt)
                    f.write(f"{i},{j:.6f},{fb:.6f}\n")
            (seq_out / "report.csv").write_text(report.to_csv())
            (seq_out / "summary.txt").write_text(report.summary() + "\n")
    combined = aggregate(reports)
    return combined, out


def cmd_infer(args) -> int:
    combined, out = _run_inference(args, write_outputs=True)
    if out is not None and len(list_sequence_dirs(args.sequence)) > 1:
        (out / "report.csv").write_text(combined.to_csv())
        (out / "summary.txt").write_text(combined.summary() + "\n")
    print(combined.summary())
    return 0


def cmd_flops_report(args) -> int:
    combined, _ = _run_inference(args, write_outputs=False)
    print(combined.summary())
    if args.csv:
        Path(args.csv).write_text(combined.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tripix",
        description="Gated sparse convolution for video object segmentation.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic sequences")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="directory of sequence directories")
    p.add_argument("--out", required=True, help="weights output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment sequences with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-masks-per-layer", action="store_true")
    p.add_argument("--strategy", default=None, choices=("fully", "semi-mixed", "mixed", "dense"))
    p.add_argument("--force-policy", default=None,
                   help="force every gate: skip | reuse | compute")
    p.add_argument("--corrupt-memory-at", type=int, default=0)
    p.add_argument("--memory-interval", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("flops-report", help="print the FLOPs decomposition")
    p.add_argument("--weights", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--csv", default=None, help="also write the report CSV here")
    p.add_argument("--strategy", default=None, choices=("fully", "semi-mixed", "mixed", "dense"))
    p.add_argument("--force-policy", default=None)
    p.add_argument("--corrupt-memory-at", type=int, default=0)
    p.add_argument("--memory-interval", type=int, default=0)
    p.set_defaults(func=cmd_flops_report)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
