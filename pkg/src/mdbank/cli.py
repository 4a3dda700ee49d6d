"""Command-line entry point: generate / train / eval / plot / ablate / sweep.

Config precedence for `train`: built-in defaults < --config file < explicit
flags. Every run directory gets a run_manifest.json recording the command,
the resolved config, a content hash of the dataset, the package version,
and start/end timestamps. The MDBANK_RUN_ROOT environment variable sets the
default parent directory for outputs.

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .synthdata import StyleParams, generate_dataset
from .trainer import VARIANTS, TrainConfig, fit, validate_config


class CliError(RuntimeError):
    """A runtime failure (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _run_root() -> Path:
    return Path(os.environ.get("MDBANK_RUN_ROOT", "runs"))


def dataset_fingerprint(root: str | Path) -> str:
    """SHA-256 over every file's relative path and bytes, sorted by path."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_run_manifest(run_dir: Path, command: list[str], config: dict, dataset_root=None, extra=None) -> None:
    manifest = {
        "command": command,
        "resolved_config": config,
        "dataset_fingerprint": dataset_fingerprint(dataset_root) if dataset_root else None,
        "code_version": __version__,
        "started_at": None,  # callers provide the real start via `extra`
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "run_manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def resolve_train_config(args) -> TrainConfig:
    values = TrainConfig().to_dict()
    if args.config:
        with open(args.config) as f:
            file_values = json.load(f)
        unknown = set(file_values) - set(values)
        if unknown:
            raise CliError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        values.update(file_values)
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    config = TrainConfig(**values)
    validate_config(config)
    return config


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k-top-target", dest="k_top_target", type=int)
    p.add_argument("--gate", choices=["auto", "G1", "G2"])
    p.add_argument("--burnin-steps", dest="burnin_steps", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--grl-coeff", dest="grl_coeff", type=float)
    p.add_argument("--grl-ramp", dest="grl_ramp", action="store_const", const=True)


def cmd_generate(args) -> int:
    style = StyleParams(
        fog_strength=args.fog,
        hue_shift=args.hue_shift,
        noise_sigma=args.noise,
    )
    start = time.strftime("%Y-%m-%dT%H:%M:%S")
    root = generate_dataset(
        args.out,
        n_source=args.num_source,
        n_target=args.num_target,
        n_eval=args.num_eval,
        seed=args.seed,
        image_size=args.image_size,
        style=style,
        overwrite=args.overwrite,
    )
    write_run_manifest(
        Path(root),
        command=sys.argv[1:],
        config={
            "num_source": args.num_source, "num_target": args.num_target,
            "num_eval": args.num_eval, "seed": args.seed,
            "image_size": args.image_size, "style": style.to_dict(),
        },
        dataset_root=root,
        extra={"started_at": start},
    )
    print(f"dataset written to {root}")
    return 0


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    run_dir = Path(args.out) if args.out else _run_root() / f"{config.variant}_seed{config.seed}"
    start = time.strftime("%Y-%m-%dT%H:%M:%S")

    def log_fn(m):
        acc = "-" if m.domain_acc is None else f"{m.domain_acc:.2f}"
        print(
            f"step {m.step:6d}  l_det {m.l_det:7.4f}  l_mt {m.l_mt:7.4f}  "
            f"l_adv {m.l_adv:7.4f}  l_total {m.l_total:8.4f}  dom_acc {acc}"
        )

    fit(config, args.data, run_dir, log_fn=None if args.quiet else log_fn)
    write_run_manifest(
        run_dir,
        command=sys.argv[1:],
        config=config.to_dict(),
        dataset_root=args.data,
        extra={"started_at": start, "dataset_root": str(args.data)},
    )
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_checkpoint

    start = time.strftime("%Y-%m-%dT%H:%M:%S")
    report = evaluate_checkpoint(
        args.checkpoint, args.data, split=args.split,
        score_thresh=args.score_thresh, nms_iou=args.nms_iou,
    )
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    write_run_manifest(
        out_dir,
        command=sys.argv[1:],
        config={"checkpoint": str(args.checkpoint), "split": args.split,
                "score_thresh": args.score_thresh, "nms_iou": args.nms_iou},
        dataset_root=args.data,
        extra={"started_at": start},
    )
    per_class = "  ".join(f"c{k}:{v:.3f}" for k, v in sorted(report.per_class_ap.items()))
    print(f"mAP {report.map:.4f}  ({per_class})")
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_plot(args) -> int:
    from . import plots

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "training":
        plots.plot_training_curves(Path(args.input), out)
    elif args.kind == "pr":
        with open(args.input) as f:
            plots.plot_pr_curves(json.load(f), out)
    elif args.kind == "sweep":
        with open(args.input) as f:
            plots.plot_sweep(json.load(f), out)
    elif args.kind == "embeddings":
        with open(args.input) as f:
            plots.plot_embeddings(json.load(f)["rows"], out)
    print(f"wrote {out}")
    return 0


def cmd_embed(args) -> int:
    from .evaluation import dump_embeddings

    rows, stats = dump_embeddings(
        args.checkpoint, args.data,
        regions_per_image=args.regions_per_image,
        max_images_per_split=args.max_images,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump({"rows": rows, "stats": stats}, f)
    print(f"{len(rows)} rows, alignment {stats['alignment']:.4f} -> {out}")
    return 0


def _train_subprocess(data, out_dir: Path, extra_flags: list[str], quiet=True) -> tuple[bool, str]:
    """One isolated training run; returns (ok, error message)."""
    cmd = [sys.executable, "-m", "mdbank", "train", "--data", str(data), "--out", str(out_dir)]
    cmd += extra_flags
    if quiet:
        cmd.append("--quiet")
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout).strip().splitlines()[-3:]
        return False, " | ".join(tail)
    return True, ""


def _eval_run(run_dir: Path, data, split="target_eval"):
    from .evaluation import evaluate_checkpoint

    return evaluate_checkpoint(run_dir / "checkpoints" / "teacher_final.npz", data, split=split)


def cmd_ablate(args) -> int:
    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(variants) < 2 or not seeds:
        raise CliError("ablate needs >= 2 variants and >= 1 seed")
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}")
    start = time.strftime("%Y-%m-%dT%H:%M:%S")
    out_dir = Path(args.out) if args.out else _run_root() / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)

    cells: dict[str, dict[int, dict]] = {v: {} for v in variants}
    failures = 0
    for variant in variants:
        for seed in seeds:
            run_dir = out_dir / f"{variant}_seed{seed}"
            flags = ["--variant", variant, "--seed", str(seed)]
            if args.steps:
                flags += ["--steps", str(args.steps)]
            if args.burnin_steps is not None:
                flags += ["--burnin-steps", str(args.burnin_steps)]
            ok, err = _train_subprocess(args.data, run_dir, flags)
            if ok:
                try:
                    report = _eval_run(run_dir, args.data)
                    cells[variant][seed] = {"map": report.map,
                                            "per_class_ap": {str(k): v for k, v in report.per_class_ap.items()}}
                except Exception as e:  # noqa: BLE001 - cell error must not kill the table
                    cells[variant][seed] = {"error": str(e)}
                    failures += 1
            else:
                cells[variant][seed] = {"error": err}
                failures += 1
            status = cells[variant][seed].get("map")
            print(f"[{variant} seed={seed}] " + (f"mAP {status:.4f}" if status is not None else f"FAILED: {cells[variant][seed]['error']}"))

    table = {"variants": {}, "seeds": seeds}
    class_ids: set[str] = set()
    for variant in variants:
        maps = [c["map"] for c in cells[variant].values() if "map" in c]
        per_class: dict[str, list[float]] = {}
        for c in cells[variant].values():
            for k, v in c.get("per_class_ap", {}).items():
                per_class.setdefault(k, []).append(v)
                class_ids.add(k)
        table["variants"][variant] = {
            "mean_map": float(np.mean(maps)) if maps else None,
            "std_map": float(np.std(maps)) if maps else None,
            "per_class_mean_ap": {k: float(np.mean(v)) for k, v in sorted(per_class.items())},
            "runs": {str(s): cells[variant][s] for s in seeds},
        }
    with open(out_dir / "table.json", "w") as f:
        json.dump(table, f, indent=1)
    write_run_manifest(
        out_dir, command=sys.argv[1:],
        config={"variants": variants, "seeds": seeds, "steps": args.steps,
                "burnin_steps": args.burnin_steps},
        dataset_root=args.data, extra={"started_at": start},
    )

    cols = sorted(class_ids)
    header = f"{'variant':<12} {'mAP mean±std':>16} " + " ".join(f"{'AP c'+k:>9}" for k in cols)
    lines = [header, "-" * len(header)]
    for variant in variants:
        row = table["variants"][variant]
        if row["mean_map"] is None:
            lines.append(f"{variant:<12} {'(all runs failed)':>16}")
            continue
        cells_txt = " ".join(f"{row['per_class_mean_ap'].get(k, float('nan')):>9.4f}" for k in cols)
        lines.append(f"{variant:<12} {row['mean_map']:>8.4f}±{row['std_map']:<7.4f} {cells_txt}")
    text = "\n".join(lines)
    (out_dir / "table.md").write_text(text + "\n")
    print(text)
    return 2 if failures else 0


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",")]
    if not values:
        raise CliError("sweep needs at least one value")
    start = time.strftime("%Y-%m-%dT%H:%M:%S")
    out_dir = Path(args.out) if args.out else _run_root() / f"sweep_{args.param}"
    out_dir.mkdir(parents=True, exist_ok=True)

    points = []
    failures = 0
    flag = {"eta": "--eta", "lambda": "--lambda"}[args.param]
    for value in values:
        run_dir = out_dir / f"{args.param}_{value:g}"
        flags = ["--variant", args.variant, "--seed", str(args.seed), flag, str(value)]
        if args.steps:
            flags += ["--steps", str(args.steps)]
        if args.burnin_steps is not None:
            flags += ["--burnin-steps", str(args.burnin_steps)]
        ok, err = _train_subprocess(args.data, run_dir, flags)
        if ok:
            try:
                report = _eval_run(run_dir, args.data)
                points.append({"value": value, "map": report.map})
            except Exception as e:  # noqa: BLE001
                points.append({"value": value, "error": str(e)})
                failures += 1
        else:
            points.append({"value": value, "error": err})
            failures += 1
        last = points[-1]
        print(f"[{args.param}={value:g}] " + (f"mAP {last['map']:.4f}" if "map" in last else f"FAILED: {last['error']}"))

    curve = {"param": args.param, "variant": args.variant, "seed": args.seed, "points": points}
    with open(out_dir / "curve.json", "w") as f:
        json.dump(curve, f, indent=1)
    write_run_manifest(
        out_dir, command=sys.argv[1:],
        config={"param": args.param, "values": values, "variant": args.variant,
                "seed": args.seed, "steps": args.steps, "burnin_steps": args.burnin_steps},
        dataset_root=args.data, extra={"started_at": start},
    )
    print(f"curve: {out_dir / 'curve.json'}")
    return 2 if failures else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="mdbank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic two-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-source", type=int, default=500)
    p.add_argument("--num-target", type=int, default=500)
    p.add_argument("--num-eval", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--fog", type=float, default=StyleParams.fog_strength)
    p.add_argument("--hue-shift", type=float, default=StyleParams.hue_shift)
    p.add_argument("--noise", type=float, default=StyleParams.noise_sigma)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one variant on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory (default under run root)")
    p.add_argument("--quiet", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="target_eval")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="dump 2D region-feature embeddings for both domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regions-per-image", type=int, default=8)
    p.add_argument("--max-images", type=int, default=100)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("plot", help="render a figure from run artifacts")
    p.add_argument("--kind", required=True, choices=["training", "pr", "sweep", "embeddings"])
    p.add_argument("--input", required=True, help="metrics.jsonl / report.json / curve.json / embeddings.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="train+eval a variant/seed grid, emit a table")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="faster_only,mt_ins,mdbank")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--burnin-steps", dest="burnin_steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train across eta or lambda values, emit curve data")
    p.add_argument("--data", required=True)
    p.add_argument("--param", required=True, choices=["eta", "lambda"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--variant", default="mdbank")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--burnin-steps", dest="burnin_steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (CliError, FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"mdbank: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - last-resort failure reporting
        print(f"mdbank: unexpected failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
