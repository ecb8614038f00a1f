"""Command-line entry point.

Exit codes: 0 ok, 1 I/O error, 2 config or input error, 3 training failure,
4 checkpoint error, 5 metric precondition violated.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import data as data_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DEFAULTS, ConfigError, RunConfig, load_config
from .data import Dataset, ManifestError
from .diffusion import sample
from .metrics import DegenerateCloudError, SizeMismatchError, cov, distance_matrix, jsd, mmd, normalize_bbox
from .train import TrainingError, finetune, pretrain

log = logging.getLogger("rgdm")

EXIT_IO, EXIT_CONFIG, EXIT_TRAIN, EXIT_CKPT, EXIT_METRIC = 1, 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_data(path) -> Dataset:
    try:
        return data_mod.load_dataset(path)
    except ManifestError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CommandError(EXIT_CKPT, f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise CommandError(EXIT_CKPT, str(exc)) from exc


def cmd_make_data(cfg: RunConfig) -> int:
    d = cfg.section("data")
    if d["kind"] == "mixture2d":
        try:
            ds = data_mod.gen_mixture2d(
                d["n_samples"], d["points_per_cloud"], d["centers"], d["sigma"], cfg.seed, d["balanced"]
            )
        except ValueError as exc:
            raise CommandError(EXIT_CONFIG, f"config key 'data.centers': {exc}") from exc
    else:
        try:
            ds = data_mod.gen_template_shapes(d["n_samples"], d["points_per_cloud"], d["templates"], d["jitter"], cfg.seed)
        except ValueError as exc:
            raise CommandError(EXIT_CONFIG, f"config key 'data.templates': {exc}") from exc
    data_mod.save_dataset(ds, cfg.dataset)
    print(f"wrote {len(ds)} clouds to {cfg.dataset}")
    for label, count in ds.counts().items():
        print(f"label {label}: {count}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    ds = _load_data(cfg.dataset)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "pretrain_log.tsv", "w") as logf:
        ckpt = pretrain(cfg.train, ds, log_stream=logf)
    save_checkpoint(ckpt, cfg.out / "pretrained.ckpt")
    print(f"wrote {cfg.out / 'pretrained.ckpt'}")
    return 0


def cmd_finetune(cfg: RunConfig, checkpoint) -> int:
    ckpt = _load_ckpt(checkpoint)
    t = cfg.train
    if list(ckpt.layer_dims) != list(t.layer_dims) or ckpt.context != t.context or ckpt.schedule != t.schedule:
        raise CommandError(
            EXIT_CKPT,
            f"checkpoint topology {ckpt.layer_dims} ({ckpt.context}) / schedule {ckpt.schedule} "
            "does not match the config",
        )
    ds = _load_data(cfg.dataset)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "finetune_log.tsv", "w") as logf:
        out = finetune(ckpt, cfg.train, ds, log_stream=logf)
    save_checkpoint(out, cfg.out / "finetuned.ckpt")
    print(f"wrote {cfg.out / 'finetuned.ckpt'}")
    return 0


def cmd_sample(checkpoint, n_samples: int, n_points: int, seed: int, out_dir) -> int:
    ckpt = _load_ckpt(checkpoint)
    est, sched = ckpt.estimator(), ckpt.noise_schedule()
    if n_samples > 0:
        clouds = list(sample(est, sched, n_points, est.dim, seed, n_clouds=n_samples))
    else:
        clouds = []
    meta = {"kind": "generated", "seed": seed, "checkpoint": str(checkpoint)}
    data_mod.save_dataset(Dataset(clouds, [-1] * len(clouds), est.dim, meta), out_dir)
    print(f"wrote {len(clouds)} samples to {out_dir}")
    return 0


def evaluate(gen: Dataset, ref: Dataset, distances=("CD", "EMD"), grid_res: int | None = None):
    """Normalize both sets and compute the metric report.

    Returns ``(report, matches)``: an ordered list of ``(metric, value)`` and
    per generated cloud the nearest reference index for each distance.
    """
    if len(gen) == 0 or len(ref) == 0:
        raise CommandError(EXIT_CONFIG, "generated and reference sets must be nonempty")
    if gen.dim != ref.dim:
        raise CommandError(EXIT_CONFIG, f"dimension mismatch: {gen.dim} vs {ref.dim}")
    if grid_res is None:
        grid_res = 32 if gen.dim == 2 else 28
    try:
        G = [normalize_bbox(c) for c in gen.clouds]
        R = [normalize_bbox(c) for c in ref.clouds]
        report, matches = [], {}
        for dist in distances:
            D = distance_matrix(G, R, dist)
            report.append((f"MMD-{dist}", mmd(G, R, D=D)))
            report.append((f"COV-{dist}", cov(G, R, D=D)))
            matches[dist] = (D.argmin(axis=1), D.min(axis=1))
        report.append(("JSD", jsd(G, R, grid_res)))
    except SizeMismatchError as exc:
        raise CommandError(EXIT_METRIC, str(exc)) from exc
    except DegenerateCloudError as exc:
        raise CommandError(EXIT_METRIC, str(exc)) from exc
    return report, matches


def cmd_eval(gen_dir, ref_dir, distances, grid_res: int, out_dir, ref_label=None) -> int:
    gen, ref = _load_data(gen_dir), _load_data(ref_dir)
    if ref_label is not None:
        ref = ref.with_label(ref_label)
    report, matches = evaluate(gen, ref, distances, grid_res)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["metric\tvalue"] + [f"{name}\t{value!r}" for name, value in report]
    (out_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")
    rows = ["gen_index," + ",".join(f"ref_{d},dist_{d}" for d in distances)]
    for i in range(len(gen)):
        rows.append(f"{i}," + ",".join(f"{matches[d][0][i]},{matches[d][1][i]!r}" for d in distances))
    (out_dir / "matches.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgdm",
        description="Reward-guided diffusion training on synthetic point clouds.",
        epilog="Config defaults (JSON):\n" + _defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides config 'out')")
    parser.add_argument("--threads", type=int, help="BLAS threads (default: $RGDM_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", help="generate a synthetic dataset")
    sub.add_parser("pretrain", help="maximum-likelihood pretraining")
    ft = sub.add_parser("finetune", help="reward-guided fine-tuning")
    ft.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("sample", help="generate clouds from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--n-points", type=int)
    ev = sub.add_parser("eval", help="MMD/COV/JSD of generated clouds against a reference set")
    ev.add_argument("--gen", required=True, help="generated dataset directory")
    ev.add_argument("--ref", required=True, help="reference dataset directory")
    ev.add_argument("--ref-label", type=int, help="keep only reference clouds with this label")
    ev.add_argument("--distances", help="comma-separated subset of CD,EMD")
    ev.add_argument("--grid-res", type=int)
    return parser


def _defaults_text() -> str:
    import json

    return json.dumps(DEFAULTS, indent=1)


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("RGDM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CommandError(EXIT_CONFIG, f"RGDM_THREADS must be an integer, got {env!r}")
    return None


def _dispatch(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.command == "make-data":
        return cmd_make_data(cfg)
    if args.command in ("pretrain", "finetune") and not (cfg.dataset / "manifest.json").is_file():
        raise CommandError(EXIT_CONFIG, f"config key 'dataset': no dataset at {cfg.dataset}")
    if args.command == "pretrain":
        return cmd_pretrain(cfg)
    if args.command == "finetune":
        return cmd_finetune(cfg, args.checkpoint)
    if args.command == "sample":
        s = cfg.section("sample")
        n = s["n_samples"] if args.n_samples is None else args.n_samples
        npts = s["n_points"] if args.n_points is None else args.n_points
        if n < 0 or npts < 1:
            raise CommandError(EXIT_CONFIG, "--n-samples must be >= 0 and --n-points >= 1")
        return cmd_sample(args.checkpoint, n, npts, cfg.seed, cfg.out)
    if args.command == "eval":
        e = cfg.section("eval")
        dists = e["distances"] if args.distances is None else args.distances.split(",")
        if not dists or not set(dists) <= {"CD", "EMD"}:
            raise CommandError(EXIT_CONFIG, f"--distances must be a subset of CD,EMD, got {args.distances!r}")
        grid = e["grid_res"] if args.grid_res is None else args.grid_res
        if grid is not None and grid < 2:
            raise CommandError(EXIT_CONFIG, "--grid-res must be >= 2")
        out = args.out if args.out is not None else args.gen
        label = cfg.raw["target_label"] if args.ref_label is None else args.ref_label
        return cmd_eval(args.gen, args.ref, dists, grid, out, label)
    raise CommandError(EXIT_CONFIG, f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        threads = _threads(args)
        limit = contextlib.nullcontext()
        if threads is not None:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=threads)
        with limit:
            return _dispatch(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
