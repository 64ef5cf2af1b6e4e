"""Figure data and PNGs from a finished result directory.

Reads ``results.csv`` (required), plus ``selections/*.jsonl``,
``affinity_diversity.csv`` and ``config.json`` when present, and writes
everything under ``<dir>/report``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from dcaug import augment
from dcaug.augment import AppliedTransform, TransformOp
from dcaug.harness import plotting
from dcaug.harness.config import ExperimentConfig
from dcaug.harness.data import DEFAULT_STYLES
from dcaug.harness.runner import load_dataset, summarize_rows, write_csv
from dcaug.metrics import rejection_series

_LOG_NAME = re.compile(r"^(?P<tag>.+)_h(?P<holdout>\d+)_s(?P<seed>-?\d+)\.jsonl$")

_INT = {"holdout", "seed", "best_step", "epoch", "domain", "wider", "weak", "selected", "steps"}
_FLOAT = {"lambda", "ood_accuracy", "val_accuracy", "train_loss_window", "wider_ratio",
          "affinity", "consistency", "diversity", "ratio", "in_domain_mean", "ood_mean", "ood_std",
          "median_step_s", "ratio_vs_erm"}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if v == "":
                r[k] = None
            elif k in _INT:
                r[k] = int(v)
            elif k in _FLOAT:
                r[k] = float(v)
    return rows


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def label_of(method: str, lam) -> str:
    return method if lam is None else f"{method} lam={lam:g}"


def rejection_rows(log_dir: Path, steps_per_window: int, domain_names) -> list[dict]:
    """Wider/weak counts per (log tag, window, domain), pooled over the
    held-out domains and seeds that share a tag."""
    pooled: dict[tuple, list[int]] = {}
    for path in sorted(log_dir.glob("*.jsonl")):
        m = _LOG_NAME.match(path.name)
        if m is None:
            continue
        stats = rejection_series(read_jsonl(path), steps_per_window)
        for (epoch, d), (w, k) in stats.counts.items():
            c = pooled.setdefault((m["tag"], epoch, d), [0, 0])
            c[0] += w
            c[1] += k
    rows = []
    for (tag, epoch, d), (w, k) in sorted(pooled.items()):
        name = domain_names[d] if domain_names and 0 <= d < len(domain_names) else str(d)
        rows.append({"label": tag, "epoch": epoch, "domain": d, "domain_name": name,
                     "wider": w, "weak": k, "ratio": w / (w + k)})
    return rows


def rejection_totals(series: list[dict]) -> list[dict]:
    totals: dict[tuple, list[int]] = {}
    for r in series:
        c = totals.setdefault((r["label"], r["domain"], r["domain_name"]), [0, 0])
        c[0] += r["wider"]
        c[1] += r["weak"]
    return [
        {"label": t, "domain": d, "domain_name": n, "wider": w, "weak": k, "ratio": w / (w + k)}
        for (t, d, n), (w, k) in sorted(totals.items())
    ]


def accuracy_rows(results: list[dict]) -> list[dict]:
    return [
        {
            "label": label_of(s["method"], s["lambda"]),
            "method": s["method"],
            "variant": s["variant"],
            "lambda": s["lambda"],
            "in_domain_mean": s["in_domain"]["mean"],
            "ood_mean": s["average"]["mean"],
            "ood_std": s["average"]["std"],
        }
        for s in summarize_rows(results)
    ]


def lambda_rows(results: list[dict]) -> list[dict]:
    return [
        {"method": a["method"], "variant": a["variant"], "lambda": a["lambda"],
         "ood_mean": a["ood_mean"], "ood_std": a["ood_std"], "in_domain_mean": a["in_domain_mean"]}
        for a in accuracy_rows(results)
        if a["lambda"] is not None
    ]


def scatter_rows(points: list[dict]) -> list[dict]:
    return [
        {"tag": label_of(p["method"], p["lambda"]), "kind": p["kind"], "holdout": p["holdout"], "seed": p["seed"],
         "affinity": p["affinity"], "consistency": p["consistency"], "diversity": p["diversity"]}
        for p in points
        if p["affinity"] is not None
    ]


def contact_sheet(log_path: Path, cfg: ExperimentConfig, path: Path, per_row: int = 8) -> Path | None:
    """Wider candidates that were kept vs rejected, re-rendered on the clean
    source image (the weak jitter is not replayed)."""
    records = [r for r in read_jsonl(log_path) if r.get("op")]
    if not records:
        return None
    ds = load_dataset(cfg)
    by_id = {int(i): k for k, i in enumerate(ds.ids)}
    late = records[len(records) // 2 :]
    kept = [r for r in late if r["decision"] == "wider"][:per_row]
    dropped = [r for r in late if r["decision"] == "weak"][:per_row]
    cells, labels = [], []
    for name, group in (("kept", kept), ("rejected", dropped)):
        if not group:
            continue
        src = [ds.images[by_id[r["index"]]] for r in group]
        cells.append(src)
        labels.append(f"{name}: source")
        cells.append([augment.apply(AppliedTransform(TransformOp(r["op"]), r["magnitude"]), img)
                      for r, img in zip(group, src)])
        labels.append(f"{name}: wider")
    return plotting.image_grid(cells, path, labels, title=log_path.stem)


def build_report(result_dir, out=None, windows: int = 10) -> dict[str, Path]:
    """Write every figure table and PNG the inputs allow; returns name -> path."""
    result_dir = Path(result_dir)
    results_path = result_dir / "results.csv"
    if not results_path.exists():
        raise FileNotFoundError(f"{results_path} not found; run the experiment first")
    out = Path(out) if out is not None else result_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    cfg = None
    if (result_dir / "config.json").exists():
        raw = json.loads((result_dir / "config.json").read_text())
        cfg = ExperimentConfig.from_dict(raw)
    results = read_csv(results_path)
    names = sorted({(r["holdout"], r["holdout_name"]) for r in results})
    domain_names = [n for _, n in names] if [d for d, _ in names] == list(range(len(names))) else None
    if cfg is not None and cfg.dataset.path is None:
        domain_names = [s.name for s in DEFAULT_STYLES[: cfg.dataset.domains]]

    acc = accuracy_rows(results)
    write_csv(out / "accuracy.csv", acc, ("label", "method", "variant", "lambda", "in_domain_mean", "ood_mean", "ood_std"))
    written["accuracy.csv"] = out / "accuracy.csv"
    written["accuracy.png"] = plotting.accuracy_plot(acc, out / "accuracy.png")

    lam = lambda_rows(results)
    if len({r["lambda"] for r in lam}) > 1:
        write_csv(out / "lambda_curve.csv", lam, ("method", "variant", "lambda", "ood_mean", "ood_std", "in_domain_mean"))
        written["lambda_curve.csv"] = out / "lambda_curve.csv"
        written["lambda_curve.png"] = plotting.lambda_plot(lam, out / "lambda_curve.png")

    log_dir = result_dir / "selections"
    if log_dir.is_dir() and any(log_dir.glob("*.jsonl")):
        if cfg is not None:
            steps = cfg.steps
        else:
            steps = 1 + max(r["step"] for p in log_dir.glob("*.jsonl") for r in read_jsonl(p))
        per_window = max(1, math.ceil(steps / windows))
        series = rejection_rows(log_dir, per_window, domain_names)
        fields = ("label", "epoch", "domain", "domain_name", "wider", "weak", "ratio")
        write_csv(out / "rejection_series.csv", series, fields)
        write_csv(out / "rejection_by_domain.csv", rejection_totals(series),
                  ("label", "domain", "domain_name", "wider", "weak", "ratio"))
        written["rejection_series.csv"] = out / "rejection_series.csv"
        written["rejection_by_domain.csv"] = out / "rejection_by_domain.csv"
        written["rejection_series.png"] = plotting.rejection_plot(series, out / "rejection_series.png")
        if cfg is not None:
            selecting = [p for p in sorted(log_dir.glob("*.jsonl")) if not p.name.startswith(("erm", "ta_"))]
            if selecting:
                sheet = contact_sheet(selecting[0], cfg, out / "selected_vs_rejected.png")
                if sheet is not None:
                    written["selected_vs_rejected.png"] = sheet

    ad = result_dir / "affinity_diversity.csv"
    if ad.exists():
        pts = scatter_rows(read_csv(ad))
        write_csv(out / "scatter.csv", pts, ("tag", "kind", "holdout", "seed", "affinity", "consistency", "diversity"))
        written["scatter.csv"] = out / "scatter.csv"
        written["scatter.png"] = plotting.scatter_plot(pts, out / "scatter.png")
    return written
