"""Seeded run orchestration: leave-one-out training, lambda sweeps, step timing.

Every random draw comes from ``stream(root, holdout, seed, tag, ...)``, so
a run's numbers depend only on its coordinates and never on the order in
which workers pick up jobs.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dcaug import augment, model
from dcaug.augment import SearchSpace, WeakConfig
from dcaug.harness.config import ExperimentConfig
from dcaug.harness.data import DomainDataset, SyntheticDomainSpec, generate_dataset
from dcaug.metrics import (
    AffinityReport,
    LooResult,
    ModelConfig,
    accuracy,
    leave_one_out_eval,
    stream,
    train_plain,
    weak_policy,
    weak_wider_policy,
)
from dcaug.training import RewardConfig, Variant, final_classifier, init_state, select_batch, train_minibatch

WORKERS_ENV = "DCAUG_WORKERS"
DEFAULT_LAMBDA_GRID = (0.2, 0.5, 0.8)

# stream tags under (root, holdout, seed)
_INIT, _BATCH, _AUG, _CLEAN, _AFFINITY = range(5)

RESULT_FIELDS = (
    "method", "variant", "lambda", "space", "holdout", "holdout_name", "seed",
    "ood_accuracy", "val_accuracy", "best_step", "train_loss_window", "wider_ratio",
)

DISPLAY = {
    Variant.ERM: "ERM",
    Variant.TA: "TA",
    Variant.DOMAIN: "DCAug-domain",
    Variant.LABEL: "DCAug-label",
    Variant.LABEL_EMA_FINAL: "TeachDCAug-label",
    Variant.DOMAIN_DIV_LABEL_CON: "Ablation-domdiv-labcon",
    Variant.EMA_BOTH: "Ablation-ema-both",
}


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1, got {raw!r}")
    return n


def load_dataset(cfg: ExperimentConfig) -> DomainDataset:
    ds = cfg.dataset
    if ds.path is not None:
        return DomainDataset.load(ds.path)
    spec = SyntheticDomainSpec.default(ds.domains, ds.classes, ds.side, ds.samples_per_domain)
    return generate_dataset(spec, ds.seed)


# -- one training run ---------------------------------------------------------


@dataclass(frozen=True)
class Group:
    """One training trajectory and the final classifiers read off it.

    TeachDCAug-label shares DCAug-label's trajectory; only the deployed
    parameters differ.
    """

    train_variant: Variant
    lam: float | None
    finals: tuple[Variant, ...]

    @property
    def tag(self) -> str:
        lam = "" if self.lam is None else f"_lam{self.lam:g}"
        return f"{self.train_variant.value}{lam}"


def plan_groups(variants: Sequence[Variant], lambdas: Sequence[float]) -> list[Group]:
    """Collapse (variant, lambda) pairs into shared training trajectories."""
    groups: dict[tuple, list[Variant]] = {}
    for v in variants:
        train_v = Variant.LABEL if v is Variant.LABEL_EMA_FINAL else v
        for lam in (lambdas if v.selects else [None]):
            finals = groups.setdefault((train_v, lam), [])
            if v not in finals:
                finals.append(v)
    return [Group(v, lam, tuple(f)) for (v, lam), f in groups.items()]


@dataclass(frozen=True)
class RunSettings:
    space: SearchSpace
    weak: WeakConfig
    hidden: int = 64
    beta: float = 0.999
    lr: float = 1e-3
    weight_decay: float = 0.0
    steps: int = 2000
    per_domain_batch: int = 8
    checkpoint_every: float = 0.1
    root_seed: int = 0
    out: str | None = None
    log_selections: bool = True
    clean_steps: int | None = None  # set to compute affinity of the method's policy

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, side: int, out: str | None = None) -> RunSettings:
        return cls(
            space=cfg.search_space(side),
            weak=cfg.weak.build(),
            hidden=cfg.model.hidden,
            beta=cfg.model.beta,
            lr=cfg.optim.lr,
            weight_decay=cfg.optim.weight_decay,
            steps=cfg.steps,
            per_domain_batch=cfg.per_domain_batch,
            checkpoint_every=cfg.checkpoint_every,
            root_seed=cfg.seed,
            out=out,
            log_selections=cfg.log_selections,
            clean_steps=cfg.analytics.clean_steps if cfg.analytics.enabled else None,
        )


@dataclass
class Fitted:
    """Deployed classifier plus bookkeeping; callable as a predictor."""

    params: model.ClassifierParams
    info: dict = field(default_factory=dict)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return model.predict(self.params, images)


class BatchSampler:
    """``quota`` indices per training domain each step, domain-major order."""

    def __init__(self, domains: np.ndarray, quota: int):
        self.pools = [np.flatnonzero(domains == d) for d in np.unique(domains)]
        self.quota = quota

    @property
    def batch_size(self) -> int:
        return self.quota * len(self.pools)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([pool[rng.integers(0, len(pool), self.quota)] for pool in self.pools])


def checkpoint_steps(steps: int, every: float) -> list[int]:
    """1-based step counts at which validation accuracy is measured."""
    interval = max(1, int(round(steps * every)))
    marks = list(range(interval, steps + 1, interval))
    if not marks or marks[-1] != steps:
        marks.append(steps)
    return marks


def train_group(
    group: Group,
    settings: RunSettings,
    train: DomainDataset,
    val: DomainDataset,
    holdout: int,
    seed: int,
    on_batch: Callable[[np.ndarray], None] | None = None,
) -> dict[Variant, Fitted]:
    """Train one trajectory and select a checkpoint for every final classifier.

    ``on_batch`` receives the sample ids of every training batch (a hook
    for taint checks).
    """
    s = settings
    root = s.root_seed
    cfg = RewardConfig(0.0 if group.lam is None else group.lam, group.train_variant)
    sampler = BatchSampler(train.domains, s.per_domain_batch)
    state = init_state(
        cfg, int(np.prod(train.image_shape)), train.num_classes, train.num_domains,
        stream(root, holdout, seed, _INIT), s.hidden, s.lr, s.weight_decay, s.beta,
    )
    finals = [RewardConfig(cfg.lam, v) for v in group.finals]
    best = {f.variant: (-1.0, 0, None) for f in finals}
    marks = set(checkpoint_steps(s.steps, s.checkpoint_every))
    losses = []
    wider = seen = 0

    log = None
    if s.out and s.log_selections:
        log_dir = Path(s.out) / "selections"
        log_dir.mkdir(parents=True, exist_ok=True)
        log = open(log_dir / f"{group.tag}_h{holdout}_s{seed}.jsonl", "w")
    try:
        for t in range(s.steps):
            idx = sampler.draw(stream(root, holdout, seed, _BATCH, t))
            if on_batch is not None:
                on_batch(train.ids[idx])
            rngs = [stream(root, holdout, seed, _AUG, t, j) for j in range(len(idx))]
            res = train_minibatch(
                train.images[idx], train.labels[idx], train.domains[idx], state, cfg,
                s.space, s.weak, rngs, train.ids[idx],
            )
            losses.append(res.loss)
            n_wider = sum(r.decision.value == "wider" for r in res.records)
            wider += n_wider
            seen += len(res.records)
            if log is not None:
                log.write("".join(r.to_json() + "\n" for r in res.records))
            if t + 1 in marks:
                for f in finals:
                    p = final_classifier(state, f)
                    acc = accuracy(lambda x: model.predict(p, x), val.images, val.labels)
                    if acc > best[f.variant][0]:
                        best[f.variant] = (acc, t + 1, p.copy())
    finally:
        if log is not None:
            log.close()

    window = max(1, int(round(s.steps * 0.2)))
    common = {
        "train_variant": group.train_variant.value,
        "lambda": group.lam,
        "train_loss_window": float(np.mean(losses[-window:])),
        "wider_ratio": wider / seen,
    }
    if s.clean_steps:
        common.update(_method_affinity(group, settings, train, val, holdout, seed, state, cfg))
    out = {}
    for f in finals:
        acc, step, params = best[f.variant]
        out[f.variant] = Fitted(params, {**common, "variant": f.variant.value, "val_accuracy": acc, "best_step": step})
        if s.out:
            ck = Path(s.out) / "checkpoints"
            ck.mkdir(parents=True, exist_ok=True)
            model.save_checkpoint(params, ck / f"{_row_tag(f.variant, group.lam)}_h{holdout}_s{seed}.ckpt")
    return out


def _row_tag(v: Variant, lam: float | None) -> str:
    return v.value if lam is None else f"{v.value}_lam{lam:g}"


def _method_affinity(group, s: RunSettings, train, val, holdout, seed, state, cfg) -> dict:
    """Accuracy drop of a clean-trained model when validation images go
    through the method's own augmentation (selection uses the end-of-run
    models)."""
    clean_seed = int(np.random.SeedSequence(s.root_seed, spawn_key=(holdout, seed, _CLEAN)).generate_state(1)[0])
    mcfg = ModelConfig(s.hidden, s.lr, s.weight_decay, s.per_domain_batch * len(np.unique(train.domains)))
    clean, _ = train_plain(train.images, train.labels, train.num_classes, mcfg, s.clean_steps, clean_seed)
    rngs = [stream(s.root_seed, holdout, seed, _AFFINITY, i) for i in range(len(val))]
    v = group.train_variant
    if v is Variant.ERM:
        policy = weak_policy(s.weak)
        augmented = np.stack([policy(img, r) for img, r in zip(val.images, rngs)])
    elif v is Variant.TA:
        policy = weak_wider_policy(s.weak, s.space)
        augmented = np.stack([policy(img, r) for img, r in zip(val.images, rngs)])
    else:
        weak = augment.weak_augment_batch(val.images, s.weak, rngs)
        wider = np.stack([augment.wider_augment(w, s.space, r)[0] for w, r in zip(weak, rngs)])
        mask, _, _ = select_batch(weak, wider, val.labels, val.domains, state.models, cfg)
        augmented = np.where(mask[:, None, None, None], wider, weak)
    predict = lambda x: model.predict(clean, x)  # noqa: E731
    rep = AffinityReport(accuracy(predict, val.images, val.labels), accuracy(predict, augmented, val.labels), len(val))
    return {"affinity": rep.affinity, "consistency": rep.consistency}


def fit_groups(
    groups: Sequence[Group],
    settings: RunSettings,
    train: DomainDataset,
    val: DomainDataset,
    holdout: int,
    seed: int,
    on_batch=None,
) -> dict[str, Fitted]:
    out = {}
    for g in groups:
        for v, fitted in train_group(g, settings, train, val, holdout, seed, on_batch).items():
            out[_row_tag(v, g.lam)] = fitted
    return out


# -- leave-one-out run --------------------------------------------------------


@dataclass
class RunResult:
    rows: list[dict]
    summary: dict
    out: Path | None

    def mean_ood(self, variant: Variant | str, lam: float | None = None) -> float:
        v = Variant.parse(variant).value
        rows = [r for r in self.rows if r["variant"] == v and (lam is None or r["lambda"] == lam)]
        return float(np.mean([r["ood_accuracy"] for r in rows]))


def _executor_map(workers: int):
    if workers <= 1:
        return map, None
    pool = ProcessPoolExecutor(workers)
    return pool.map, pool


def run(
    cfg: ExperimentConfig,
    out: str | Path | None = None,
    workers: int | None = None,
    on_batch=None,
    dataset: DomainDataset | None = None,
) -> RunResult:
    """Leave-one-out over every held-out domain and seed; writes results under ``out``."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers_from_env() if workers is None else workers
    if on_batch is not None:
        workers = 1
    started = time.time()

    ds = dataset if dataset is not None else load_dataset(cfg)
    variants = cfg.variants
    if any(v.needs_domains for v in variants) and ds.num_domains < 3:
        raise ValueError("domain-classifier variants need at least 2 training domains")
    groups = plan_groups(variants, cfg.method.lambdas)
    settings = RunSettings.from_config(cfg, ds.image_shape[0], str(out))
    fit = functools.partial(fit_groups, groups, settings, on_batch=on_batch)

    map_fn, pool = _executor_map(workers)
    try:
        result = leave_one_out_eval(
            ds, fit, cfg.seeds, cfg.holdouts, cfg.val_fraction, split_seed=cfg.seed, map_fn=map_fn
        )
    finally:
        if pool is not None:
            pool.shutdown()

    rows = _result_rows(result, cfg, ds)
    summary = _summary(result, rows, cfg, ds)
    write_csv(out / "results.csv", rows, RESULT_FIELDS)
    _write_json(out / "summary.json", summary)
    cfg_dict = cfg.to_dict()
    cfg_dict["out"] = str(out)
    _write_json(out / "config.json", cfg_dict)
    if cfg.analytics.enabled:
        write_csv(out / "affinity_diversity.csv", _analytics_rows(rows), ANALYTICS_FIELDS)
    _write_json(out / "run_info.json", {
        "started": started,
        "finished": time.time(),
        "elapsed_s": time.time() - started,
        "workers": workers,
        "python": platform.python_version(),
        "numpy": np.__version__,
    })
    return RunResult(rows, summary, out)


def _result_rows(result: LooResult, cfg: ExperimentConfig, ds: DomainDataset) -> list[dict]:
    rows = []
    for r in result.rows:
        v = Variant(r.extra["variant"])
        rows.append({
            "method": DISPLAY[v],
            "variant": v.value,
            "lambda": r.extra["lambda"],
            "space": cfg.space,
            "holdout": r.holdout,
            "holdout_name": ds.domain_names[r.holdout],
            "seed": r.seed,
            "ood_accuracy": r.accuracy,
            "val_accuracy": r.val_accuracy,
            "best_step": r.extra["best_step"],
            "train_loss_window": r.extra["train_loss_window"],
            "wider_ratio": r.extra["wider_ratio"],
            "affinity": r.extra.get("affinity"),
            "consistency": r.extra.get("consistency"),
        })
    order = {v.value: i for i, v in enumerate(Variant)}
    rows.sort(key=lambda r: (order[r["variant"]], -1 if r["lambda"] is None else r["lambda"], r["holdout"], r["seed"]))
    return rows


def _mean_std(xs) -> dict:
    xs = np.asarray(list(xs), dtype=np.float64)
    return {"mean": float(xs.mean()), "std": float(xs.std()), "n": int(len(xs))}


def summarize_rows(rows: Sequence[dict]) -> list[dict]:
    """Per (variant, lambda): held-out accuracy per domain, the across-domain
    average (mean/std over per-seed averages) and source-validation accuracy."""
    keys = []
    for r in rows:
        k = (r["variant"], r["lambda"])
        if k not in keys:
            keys.append(k)
    out = []
    for v, lam in keys:
        sel = [r for r in rows if r["variant"] == v and r["lambda"] == lam]
        names = sorted({(r["holdout"], r["holdout_name"]) for r in sel})
        seeds = sorted({r["seed"] for r in sel})
        out.append({
            "method": sel[0]["method"],
            "variant": v,
            "lambda": lam,
            "domains": {name: _mean_std(r["ood_accuracy"] for r in sel if r["holdout"] == d) for d, name in names},
            "average": _mean_std(np.mean([r["ood_accuracy"] for r in sel if r["seed"] == s]) for s in seeds),
            "in_domain": _mean_std(r["val_accuracy"] for r in sel),
        })
    return out


def _summary(result: LooResult, rows, cfg: ExperimentConfig, ds: DomainDataset) -> dict:
    return {
        "dataset": {"digest": ds.digest(), "domains": list(ds.domain_names), "samples": len(ds)},
        "seeds": list(cfg.seeds),
        "space": cfg.space,
        "methods": summarize_rows(rows),
    }


ANALYTICS_FIELDS = ("kind", "method", "variant", "lambda", "holdout", "seed", "affinity", "consistency", "diversity")


def _analytics_rows(rows: Sequence[dict]) -> list[dict]:
    return [
        {
            "kind": "method", "method": r["method"], "variant": r["variant"], "lambda": r["lambda"],
            "holdout": r["holdout"], "seed": r["seed"], "affinity": r["affinity"],
            "consistency": r["consistency"], "diversity": r["train_loss_window"],
        }
        for r in rows
    ]


def write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- lambda sweep -------------------------------------------------------------


SWEEP_FIELDS = ("method", "variant", "lambda", "holdout", "holdout_name", "val_accuracy", "ood_accuracy", "selected")


def sweep_lambda(
    cfg: ExperimentConfig,
    lambdas: Sequence[float] | None = None,
    out: str | Path | None = None,
    workers: int | None = None,
) -> list[dict]:
    """Run every lambda, then per held-out domain keep the lambda with the best
    mean source-validation accuracy (ties keep the smaller lambda)."""
    lambdas = list(DEFAULT_LAMBDA_GRID if lambdas is None else lambdas)
    if not lambdas:
        raise ValueError("empty lambda grid")
    cfg = replace(cfg, method=replace(cfg.method, lambdas=sorted(lambdas)))
    res = run(cfg, out, workers)
    table = sweep_table(res.rows)
    write_csv(res.out / "sweep.csv", table, SWEEP_FIELDS)
    return table


def sweep_table(rows: Sequence[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["variant"], r["lambda"], r["holdout"]), []).append(r)
    table = []
    for (v, lam, d), rs in cells.items():
        table.append({
            "method": rs[0]["method"], "variant": v, "lambda": lam, "holdout": d,
            "holdout_name": rs[0]["holdout_name"],
            "val_accuracy": float(np.mean([r["val_accuracy"] for r in rs])),
            "ood_accuracy": float(np.mean([r["ood_accuracy"] for r in rs])),
            "selected": 0,
        })
    for v, d in {(t["variant"], t["holdout"]) for t in table}:
        cands = sorted(
            (t for t in table if t["variant"] == v and t["holdout"] == d),
            key=lambda t: (-t["val_accuracy"], -1 if t["lambda"] is None else t["lambda"]),
        )
        cands[0]["selected"] = 1
    order = {x.value: i for i, x in enumerate(Variant)}
    table.sort(key=lambda t: (order[t["variant"]], t["holdout"], -1 if t["lambda"] is None else t["lambda"]))
    return table


# -- step timing --------------------------------------------------------------


BENCH_FIELDS = ("method", "variant", "median_step_s", "ratio_vs_erm", "steps")


def bench_step(
    cfg: ExperimentConfig,
    steps: int = 40,
    warmup: int = 5,
    variants: Sequence[Variant] | None = None,
    out: str | Path | None = None,
    dataset: DomainDataset | None = None,
) -> list[dict]:
    """Median wall time of one training step per variant on identical batches."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    variants = list(Variant) if variants is None else [Variant.parse(v) for v in variants]
    if Variant.ERM not in variants:
        variants.insert(0, Variant.ERM)
    holdout = 0 if not cfg.holdouts else cfg.holdouts[0]
    train = ds.subset(np.flatnonzero(ds.domains != holdout))
    s = RunSettings.from_config(cfg, ds.image_shape[0])
    sampler = BatchSampler(train.domains, s.per_domain_batch)
    lam = cfg.method.lambdas[0]
    configs = {v: RewardConfig(lam, v) for v in variants}
    states = {
        v: init_state(rc, int(np.prod(train.image_shape)), train.num_classes, train.num_domains,
                      stream(s.root_seed, holdout, 0, _INIT), s.hidden, s.lr, s.weight_decay, s.beta)
        for v, rc in configs.items()
    }
    laps = {v: [] for v in variants}
    # variants take turns on every batch so load drift hits them alike
    for t in range(warmup + steps):
        idx = sampler.draw(stream(s.root_seed, holdout, 0, _BATCH, t))
        for v in variants:
            t0 = time.perf_counter()
            rngs = [stream(s.root_seed, holdout, 0, _AUG, t, j) for j in range(len(idx))]
            train_minibatch(train.images[idx], train.labels[idx], train.domains[idx], states[v], configs[v],
                            s.space, s.weak, rngs, train.ids[idx])
            if t >= warmup:
                laps[v].append(time.perf_counter() - t0)
    times = {v: float(np.median(laps[v])) for v in variants}
    rows = [
        {"method": DISPLAY[v], "variant": v.value, "median_step_s": times[v],
         "ratio_vs_erm": times[v] / times[Variant.ERM], "steps": steps}
        for v in variants
    ]
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out) / "bench.csv", rows, BENCH_FIELDS)
    return rows
