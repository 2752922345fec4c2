"""``apct`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruption import KINDS, SEVERITIES, build_suite, load_suite, parse_cell
from .errors import ApctError, ConfigError, TrainingDiverged
from .geometry import MIN_POINTS, generate_dataset, load_cloud, load_cloud_text, load_manifest
from .gradcheck import run_gradcheck
from .metrics import accuracy_grid_from_dir, build_report, save_report
from .model import ModelConfig, forward, load_model, prepare_batch, save_model
from .tensor import Tensor
from .training import (
    GroupedSplit,
    TrainConfig,
    evaluate,
    effective_config,
    evaluate_suite,
    save_log,
    train,
    write_predictions,
)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(ModelConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {})))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict()}


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _load_any_cloud(path: Path):
    if path.suffix == ".pcb":
        return load_cloud(path)
    return load_cloud_text(path)


# commands --------------------------------------------------------------------


def cmd_gen_dataset(args) -> int:
    if args.points < MIN_POINTS:
        raise ConfigError(f"--points must be at least {MIN_POINTS}")
    out = Path(args.out)
    _ensure_empty(out, args.force)
    m = generate_dataset(out, args.seed, args.train_per_class, args.test_per_class, args.points)
    print(out / "manifest.json")
    print(f"train={len(m.splits['train'])} test={len(m.splits['test'])}", file=sys.stderr)
    return 0


def cmd_corrupt(args) -> int:
    if (args.kind is None) != (args.severity is None):
        raise ConfigError("--kind and --severity go together")
    cells = None
    if args.kind is not None:
        kind, sev = parse_cell(f"{args.kind}_{args.severity}")
        cells = [(kind, sev)]
    out = Path(args.out)
    _ensure_empty(out, args.force)
    suite = build_suite(load_manifest(args.data), args.seed, out, split=args.split, cells=cells)
    print(out / "manifest.json")
    print(f"cells={len(suite.cells)}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    tdoc = rc.train.to_dict()
    for key in ("seed", "epochs", "batch_size", "lr"):
        val = getattr(args, key)
        if val is not None:
            tdoc[key] = val
    if args.no_drop:
        tdoc["drop"] = False
    if args.no_aux:
        tdoc["aux"] = False
    tcfg = TrainConfig.from_dict(tdoc)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = rc.model
    train_split = GroupedSplit.from_clouds(manifest.load_split("train"), cfg)
    test_split = GroupedSplit.from_clouds(manifest.load_split("test"), cfg)

    def show(rec):
        print(
            f"epoch {rec.epoch:3d} loss {rec.train_loss:.4f} train_acc {rec.train_acc:.4f} "
            f"test_acc {rec.eval_acc:.4f} lr {rec.lr:.2e}",
            file=sys.stderr,
        )

    try:
        cfg, params, log = train(cfg, tcfg, train_split, test_split, on_epoch=None if args.quiet else show)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            good = {k: Tensor(v) for k, v in exc.last_good.items()}
            save_model(out / "last_good.apct", effective_config(cfg, tcfg), good)
            print(f"last good parameters saved to {out / 'last_good.apct'}", file=sys.stderr)
        raise
    save_model(out / "model.apct", cfg, params)
    save_log(out / "trainlog.json", log)
    (out / "config.json").write_text(json.dumps({"model": cfg.to_dict(), "train": tcfg.to_dict()}, indent=1) + "\n")
    print(out / "model.apct")
    return 0


def cmd_eval(args) -> int:
    cfg, params = load_model(args.model)
    if args.suite:
        if not args.data:
            raise ConfigError("--suite also needs --data for the clean split")
        clean = load_manifest(args.data).load_split(args.split)
        clean_acc, grid = evaluate_suite(cfg, params, load_suite(args.suite), clean, args.pred_out)
        print(f"clean_oa={clean_acc:.4f}")
        for kind in KINDS:
            print(f"{kind} " + " ".join(f"{v:.4f}" for v in grid[kind]))
        return 0
    if args.suite_cell:
        files = sorted(Path(args.suite_cell).glob("*.pcb"))
        if not files:
            raise ConfigError(f"no .pcb files in {args.suite_cell}")
        clouds = [load_cloud(f) for f in files]
    elif args.data:
        clouds = load_manifest(args.data).load_split(args.split)
    else:
        raise ConfigError("one of --data, --suite-cell or --suite is required")
    split = GroupedSplit.from_clouds(clouds, cfg)
    preds, acc = evaluate(cfg, params, split)
    if args.pred_out:
        write_predictions(args.pred_out, split.ids, preds, split.labels)
    print(f"oa={acc:.4f} n={len(split)}")
    return 0


def cmd_report(args) -> int:
    clean, grid = accuracy_grid_from_dir(args.model_preds_dir)
    clean_ref, grid_ref = accuracy_grid_from_dir(args.ref_preds_dir)
    table, suite_id = {}, ""
    if args.suite:
        suite = load_suite(args.suite)
        table, suite_id = suite.severity_table, str(Path(args.suite))
    report = build_report(
        clean, grid, clean_ref, grid_ref,
        model_id=str(args.model_preds_dir), reference_id=str(args.ref_preds_dir),
        suite_id=suite_id, severity_table=table,
    )
    save_report(args.out, report)
    print(f"mCE={100 * report.mce:.1f} RmCE={100 * report.rmce:.1f} mOA={100 * report.moa:.1f}")
    return 0


def significance_dump(cfg, params, pc, stage: int | None = None) -> dict:
    out = forward(pc, cfg, params, train=False)
    centers = out_centers(pc, cfg)
    stages = []
    for rec in out.records:
        if stage is not None and rec.stage != stage - 1:
            continue
        stages.append({
            "stage": rec.stage + 1,
            "k": rec.k,
            "gamma": rec.gamma,
            "count_total": int(rec.counts[0].sum()),
            "tokens": [
                {"token": j, "center": [float(c) for c in centers[j]], "count": int(rec.counts[0, j]), "rate": float(rec.rates[0, j])}
                for j in range(len(centers))
            ],
        })
    return {"format": "apct-significance/1", "cloud": pc.id, "label": pc.label,
            "prediction": int(out.logits.data[0].argmax()), "stages": stages}


def out_centers(pc, cfg) -> np.ndarray:
    return prepare_batch([pc], cfg)[0][0]


def render_svg(dump: dict, size: int = 320) -> str:
    """Top-down scatter of patch centers per stage, darker = more significant."""
    panels = dump["stages"]
    width = size * max(1, len(panels))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size}" viewBox="0 0 {width} {size}">',
             f'<rect width="{width}" height="{size}" fill="white"/>']
    for i, st in enumerate(panels):
        top = max((t["count"] for t in st["tokens"]), default=1) or 1
        ox = i * size
        parts.append(f'<text x="{ox + 8}" y="16" font-size="12">stage {st["stage"]}</text>')
        for t in st["tokens"]:
            x = ox + size / 2 + t["center"][0] * size * 0.42
            y = size / 2 - t["center"][1] * size * 0.42
            shade = int(220 - 200 * t["count"] / top)
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="6" fill="rgb({shade},{shade},255)" stroke="black" stroke-width="0.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_inspect_significance(args) -> int:
    cfg, params = load_model(args.model)
    dump = significance_dump(cfg, params, _load_any_cloud(Path(args.cloud)), args.stage)
    Path(args.out).write_text(json.dumps(dump, indent=1) + "\n")
    if args.svg:
        Path(args.svg).write_text(render_svg(dump))
    print(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(n_entries=args.entries, step=args.step, seed=args.seed)
    print(res.summary())
    for name, flat, a, n, err in res.worst[:3]:
        print(f"  {name}[{flat}] analytic={a:.6e} numeric={n:.6e} rel={err:.2e}")
    return 0 if res.passed else 1


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apct", description="Significance-targeted key dropout for point-cloud transformers.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="write the procedural shape dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--train-per-class", type=int, default=100, help="training samples per class")
    g.add_argument("--test-per-class", type=int, default=20, help="test samples per class")
    g.add_argument("--points", type=int, default=256, help=f"points per cloud (>= {MIN_POINTS})")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_dataset)

    c = sub.add_parser("corrupt", help="build the corruption suite from a dataset split")
    c.add_argument("--data", required=True, help="dataset directory or manifest")
    c.add_argument("--out", required=True, help="suite output directory")
    c.add_argument("--seed", type=int, default=0, help="base seed for per-sample corruption streams")
    c.add_argument("--kind", help=f"single corruption kind: {', '.join(KINDS)}")
    c.add_argument("--severity", type=int, help="single severity 1..5 (with --kind)")
    c.add_argument("--split", default="test", help="dataset split to corrupt")
    c.add_argument("--force", action="store_true", help="write into a non-empty directory")
    c.set_defaults(func=cmd_corrupt)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON config with 'model' and 'train' sections")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True, help="run directory (model.apct, trainlog.json, config.json)")
    t.add_argument("--no-drop", action="store_true", help="disable targeted key dropout")
    t.add_argument("--no-aux", action="store_true", help="disable the auxiliary-head loss")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--batch-size", type=int, dest="batch_size", help="override train.batch_size")
    t.add_argument("--lr", type=float, help="override train.lr")
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="predict a split, a suite cell, or a whole suite")
    e.add_argument("--model", required=True, help="model file")
    e.add_argument("--data", help="dataset directory or manifest")
    e.add_argument("--split", default="test", help="split of --data to evaluate")
    e.add_argument("--suite-cell", help="directory of .pcb files (one suite cell)")
    e.add_argument("--suite", help="suite directory; --pred-out is then a directory")
    e.add_argument("--pred-out", help="prediction file (or directory with --suite)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="robustness metrics from prediction directories")
    r.add_argument("--model-preds-dir", required=True, help="model predictions (clean.csv + 35 cell files)")
    r.add_argument("--ref-preds-dir", required=True, help="reference model predictions, same layout")
    r.add_argument("--suite", help="suite directory, for the severity table")
    r.add_argument("--out", required=True, help="report file")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("inspect-significance", help="per-token significance counts and drop rates")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--cloud", required=True, help=".pcb or 'x y z' text cloud")
    s.add_argument("--out", required=True, help="JSON output")
    s.add_argument("--stage", type=int, choices=[1, 2, 3], help="only this stage")
    s.add_argument("--svg", help="also write a top-down scatter rendering")
    s.set_defaults(func=cmd_inspect_significance)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full training loss")
    gc.add_argument("--entries", type=int, default=200, help="number of parameter entries to probe")
    gc.add_argument("--step", type=float, default=1e-4, help="central-difference step")
    gc.add_argument("--seed", type=int, default=0, help="seed for model, data and entry selection")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ApctError as exc:
        print(f"apct: error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"apct: error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
