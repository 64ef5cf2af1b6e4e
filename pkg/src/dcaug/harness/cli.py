"""Command line entry point: ``dcaug <command> [flags]``.

Flags given on the command line override the matching config fields;
everything lands under ``--out``. The worker count for ``run`` and
``sweep`` comes from the DCAUG_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from dcaug.augment import SearchSpace
from dcaug.harness import plotting, runner
from dcaug.harness.config import ConfigError, ExperimentConfig
from dcaug.harness.data import DomainDataset
from dcaug.harness.report import build_report


def _common(p: argparse.ArgumentParser, *, variant=True, lam=True) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, help="run a single seed (replaces the config's seed list)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--space", choices=["default", "wide", "wider"])
    p.add_argument("--holdout", action="append", help="held-out domain, by name or index (repeatable)")
    if variant:
        p.add_argument("--variant", action="append", help="method variant (repeatable)")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float, action="append", help="lambda value (repeatable)")
    p.add_argument("--steps", type=int, help="training steps per run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcaug", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic dataset to an .npz file")
    g.add_argument("--config", type=Path)
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--out", type=Path, default=Path("data"))

    _common(sub.add_parser("run", help="leave-one-domain-out training and evaluation"))
    _common(sub.add_parser("sweep", help="run a lambda grid and select per held-out domain"))

    r = sub.add_parser("report", help="figure tables and PNGs from a result directory")
    r.add_argument("results", type=Path, help="directory written by run or sweep")
    r.add_argument("--out", type=Path, help="defaults to <results>/report")
    r.add_argument("--windows", type=int, default=10, help="training windows in the rejection series")

    b = sub.add_parser("bench", help="median time per training step for each variant")
    _common(b, lam=False)
    b.add_argument("--repeats", type=int, default=40, help="timed steps per variant")

    d = sub.add_parser("dump-grid", help="every op across its magnitude range, Wide vs Wider")
    d.add_argument("--config", type=Path)
    d.add_argument("--seed", type=int, default=0, help="index of the dataset image to render")
    d.add_argument("--out", type=Path, default=Path("grid"))
    return ap


def load_config(args) -> tuple[ExperimentConfig, DomainDataset | None]:
    raw = {}
    if getattr(args, "config", None) is not None:
        raw = yaml.safe_load(args.config.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError("", "config file must hold a mapping")
    raw = copy.deepcopy(raw)
    method = raw.setdefault("method", {})
    if getattr(args, "variant", None):
        method["variants"] = [v for item in args.variant for v in item.split(",")]
    if getattr(args, "lam", None):
        method["lambdas"] = args.lam
    if getattr(args, "space", None):
        raw["space"] = args.space
    if getattr(args, "steps", None) is not None:
        raw["steps"] = args.steps
    if getattr(args, "out", None) is not None:
        raw["out"] = str(args.out)
    if args.command in ("run", "sweep", "bench") and args.seed is not None:
        raw["seeds"] = [args.seed]
    if args.command == "generate" and args.seed is not None:
        raw.setdefault("dataset", {})["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(raw)

    ds = None
    if getattr(args, "holdout", None):
        ds = runner.load_dataset(cfg)
        cfg.holdouts = [_domain_index(ds, h) for h in args.holdout]
    return cfg, ds


def _domain_index(ds: DomainDataset, key: str) -> int:
    if key in ds.domain_names:
        return ds.domain_names.index(key)
    try:
        idx = int(key)
    except ValueError:
        raise ConfigError("holdouts", f"unknown domain {key!r}; have {list(ds.domain_names)}") from None
    if not 0 <= idx < ds.num_domains:
        raise ConfigError("holdouts", f"domain index {idx} out of range")
    return idx


def cmd_generate(args) -> int:
    cfg, _ = load_config(args)
    ds = runner.load_dataset(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "dataset.npz")
    (out / "dataset.json").write_text(json.dumps({
        "digest": ds.digest(), "domains": list(ds.domain_names), "classes": ds.num_classes,
        "samples": len(ds), "dataset": cfg.to_dict()["dataset"],
    }, indent=2, sort_keys=True) + "\n")
    cells = []
    for d in range(ds.num_domains):
        idx = np.flatnonzero(ds.domains == d)
        cells.append([ds.images[idx[np.flatnonzero(ds.labels[idx] == y)[0]]] for y in range(ds.num_classes)])
    plotting.image_grid(cells, out / "preview.png", list(ds.domain_names))
    print(f"wrote {len(ds)} images to {out / 'dataset.npz'} (digest {ds.digest()[:16]})")
    return 0


def _print_summary(summary: dict) -> None:
    for m in summary["methods"]:
        lam = "" if m["lambda"] is None else f" lam={m['lambda']:g}"
        avg = m["average"]
        print(f"{m['method']}{lam}: held-out {avg['mean']:.4f} +- {avg['std']:.4f}  (source val {m['in_domain']['mean']:.4f})")


def cmd_run(args) -> int:
    cfg, ds = load_config(args)
    res = runner.run(cfg, cfg.out, dataset=ds)
    _print_summary(res.summary)
    print(f"results in {res.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg, ds = load_config(args)
    lambdas = args.lam if args.lam else list(runner.DEFAULT_LAMBDA_GRID)
    cfg.method.lambdas = sorted(lambdas)
    if ds is not None:
        res = runner.run(cfg, cfg.out, dataset=ds)
        table = runner.sweep_table(res.rows)
        runner.write_csv(Path(cfg.out) / "sweep.csv", table, runner.SWEEP_FIELDS)
    else:
        table = runner.sweep_lambda(cfg, lambdas, cfg.out)
    for t in table:
        if t["selected"]:
            lam = "-" if t["lambda"] is None else f"{t['lambda']:g}"
            print(f"{t['method']} holdout={t['holdout_name']}: lambda {lam}, val {t['val_accuracy']:.4f}, held-out {t['ood_accuracy']:.4f}")
    return 0


def cmd_report(args) -> int:
    written = build_report(args.results, args.out, args.windows)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_bench(args) -> int:
    cfg, ds = load_config(args)
    rows = runner.bench_step(cfg, steps=args.repeats, variants=args.variant and cfg.variants, out=cfg.out, dataset=ds)
    for r in rows:
        print(f"{r['method']:24s} {1e3 * r['median_step_s']:8.2f} ms  x{r['ratio_vs_erm']:.2f}")
    return 0


def cmd_dump_grid(args) -> int:
    cfg, _ = load_config(args)
    ds = runner.load_dataset(cfg)
    if not 0 <= args.seed < len(ds):
        raise ConfigError("seed", f"image index {args.seed} out of range")
    img = ds.images[args.seed]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    side = img.shape[0]
    spaces = [SearchSpace.named("wide", side), SearchSpace.named("wider", side)]
    path = plotting.transform_grid(img, spaces, out / "transform_grid.png")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "bench": cmd_bench,
    "dump-grid": cmd_dump_grid,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
