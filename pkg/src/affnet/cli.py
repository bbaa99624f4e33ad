"""Command-line interface: ``affnet {train,eval,ablate,gradcheck,synth,report}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import AffNetError

DEFAULT_CONFIG = Path(__file__).parent / "configs" / "full.json"


class CliError(Exception):
    pass


def load_config(path) -> dict:
    """Read a run config: ``{"model": ..., "schedule": ..., "synth": ...}``, every section optional.

    ``model`` holds ModelConfig fields plus two shortcuts: ``"tiny": true``
    selects the tiny clone and ``"width_divisor": k`` divides conv widths.
    """
    from .data import SynthConfig
    from .model import ModelConfig, tiny_config, width_scaled
    from .train import Schedule

    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})") from exc
    unknown = set(raw) - {"model", "schedule", "synth"}
    if unknown:
        raise CliError(f"{p}: unknown config section(s): {', '.join(sorted(unknown))}")
    model = dict(raw.get("model", {}))
    divisor = model.pop("width_divisor", 1)
    if model.pop("tiny", False):
        cfg = tiny_config(model.pop("variant", "Full"))
        if model:
            raise CliError(f"{p}: tiny model accepts only 'variant' and 'width_divisor'")
    else:
        cfg = ModelConfig.from_dict(model)
    if divisor != 1:
        cfg = width_scaled(cfg, divisor)
    return {"model": cfg, "schedule": Schedule.from_dict(raw.get("schedule", {})),
            "synth": SynthConfig.from_dict(raw.get("synth", {}))}


def _dataset(path):
    from .data import Dataset

    p = Path(path)
    if not p.is_file():
        raise CliError(f"data manifest not found: {p}")
    return Dataset.from_manifest(p)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import train

    cfg = load_config(args.config)
    ds = _dataset(args.data)
    out = _out_dir(args.out)

    def progress(e):
        print(f"epoch {e['epoch']:4d}  loss {e['mean_loss']:.4f}  train {e['train_error_cm']:.3f} cm", flush=True)

    params, log = train(cfg["model"], ds, cfg["schedule"], args.seed, progress=None if args.quiet else progress)
    save_checkpoint(params, out / "checkpoint.bin")
    log.save(out / "train_log.jsonl")
    # wall time changes run to run, so it lives outside the log
    (out / "timing.json").write_text(json.dumps({"epoch_wall_time_s": log.wall_time_s}) + "\n")
    print(f"wrote {out / 'checkpoint.bin'} ({params.count()} parameters)")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    report = evaluate(params, _dataset(args.data))
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    report.save(args.report)
    s = report.summary()
    print(f"n={s['n']}  mean {s['mean_error_cm']:.4f} cm  median {s['median_error_cm']:.4f} cm  "
          f"per-subject mean {s['mean_of_subject_means_cm']:.4f} cm")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablation_csv, ablation_suite

    cfg = load_config(args.config)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    rows, logs = ablation_suite(ds, cfg["schedule"], args.seed, cfg["model"])
    for variant, log in logs.items():
        log.save(out / f"train_log_{variant}.jsonl")
    table = ablation_csv(rows)
    (out / "ablation.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITE_MODULES, gradient_suite

    modules = [args.module] if args.module else list(SUITE_MODULES)
    if args.module and args.module not in SUITE_MODULES:
        raise CliError(f"unknown module {args.module!r}; choose from {', '.join(SUITE_MODULES)}")
    results = gradient_suite(args.instances, modules, seed=args.seed)
    ok = True
    print(f"{'module':<18} max_rel_error")
    for name, err in results.items():
        flag = "" if err < args.tol else "  FAIL"
        ok &= err < args.tol
        print(f"{name:<18} {err:.3e}{flag}")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    from .data import generate_synthetic, linear_probe_error

    cfg = load_config(args.config)["synth"]
    path, truth = generate_synthetic(cfg, args.out)
    print(f"wrote {cfg.n_samples} samples to {path}; linear probe error {linear_probe_error(truth):.2e} cm")
    return 0


def cmd_report(args) -> int:
    from .report import facewidth_curve, heatmap
    from .train import EvalReport

    src = Path(args.report)
    if not src.is_file():
        raise CliError(f"report not found: {src}")
    report = EvalReport.load(src)
    if args.kind == "heatmap":
        text = heatmap(report, args.cell).to_csv()
    else:
        curve = facewidth_curve(report, args.bins)
        text = curve.to_csv()
        if curve.n_skipped:
            print(f"skipped {curve.n_skipped} samples with zero face width", file=sys.stderr)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affnet", description="Adaptive feature fusion gaze tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint into a JSONL report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train Full, NoST, NoSE and NoAdaGN and tabulate")
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--module", default=None)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--config", default=str(DEFAULT_CONFIG))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="heat map or face-width curve CSV from an eval report")
    p.add_argument("kind", choices=["heatmap", "curve"])
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=float, default=1.0, help="heat-map cell size in cm")
    p.add_argument("--bins", type=int, default=10, help="number of curve bins")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (CliError, AffNetError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"affnet: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
