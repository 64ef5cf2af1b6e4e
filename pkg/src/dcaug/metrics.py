"""Policy analytics and the leave-one-domain-out protocol.

Affinity is the accuracy a clean-trained model loses when the validation
images are pushed through a policy once; diversity is the training loss a
fresh model still has late in training on the policy's output. Both treat
a policy as ``policy(image, rng) -> image``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from dcaug import augment, model
from dcaug.augment import SearchSpace, WeakConfig
from dcaug.harness.data import DomainDataset

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]
Predictor = Callable[[np.ndarray], np.ndarray]


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one position in a seed lineage."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


# -- policies -----------------------------------------------------------------


def identity_policy(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return img


def ta_policy(space: SearchSpace) -> Policy:
    """One uniformly sampled op from ``space`` per image."""

    def policy(img, rng):
        return augment.apply(augment.sample(space, rng), img)

    policy.__name__ = f"ta_{space.variant.value}"
    return policy


def weak_policy(cfg: WeakConfig) -> Policy:
    def policy(img, rng):
        return augment.weak_augment(img, cfg, rng)

    return policy


def weak_wider_policy(cfg: WeakConfig, space: SearchSpace) -> Policy:
    def policy(img, rng):
        return augment.wider_augment(augment.weak_augment(img, cfg, rng), space, rng)[0]

    return policy


def as_predictor(m) -> Predictor:
    if isinstance(m, model.ClassifierParams):
        return lambda x: model.predict(m, x)
    return m


def accuracy(predict: Predictor, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.asarray(predict(images)) == labels))


# -- affinity / diversity -----------------------------------------------------


@dataclass(frozen=True)
class AffinityReport:
    clean_accuracy: float
    augmented_accuracy: float
    samples: int

    @property
    def affinity(self) -> float:
        """Accuracy drop ``A(clean) - A(augmented)``."""
        return self.clean_accuracy - self.augmented_accuracy

    @property
    def consistency(self) -> float:
        """Sign-flipped affinity: 0 for a harmless policy, negative as it distorts."""
        return self.augmented_accuracy - self.clean_accuracy


def affinity(m, images: np.ndarray, labels: np.ndarray, policy: Policy, seed: int = 0) -> AffinityReport:
    """Apply ``policy`` once per validation image and compare accuracies."""
    if len(images) == 0:
        raise ValueError("empty validation set")
    predict = as_predictor(m)
    augmented = np.stack([policy(img, stream(seed, i)) for i, img in enumerate(images)])
    return AffinityReport(accuracy(predict, images, labels), accuracy(predict, augmented, labels), len(images))


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32


@dataclass(frozen=True)
class DiversityReport:
    mean_loss: float
    samples: int
    policy: str
    losses: tuple[float, ...] = field(default=(), repr=False)


def train_plain(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    cfg: ModelConfig,
    steps: int,
    seed: int,
    policy: Policy | None = None,
) -> tuple[model.ClassifierParams, list[float]]:
    """Minibatch training on ``policy(x)`` (or clean ``x``); returns params and per-step losses.

    Batch draws and policy draws come from separate streams, so the batch
    sequence does not depend on the policy.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    p = model.init_params(int(np.prod(images.shape[1:])), cfg.hidden, num_classes, stream(seed, 0))
    opt = model.adam_init(p, cfg.lr, cfg.weight_decay)
    losses = []
    for t in range(steps):
        idx = stream(seed, 1, t).integers(0, len(images), cfg.batch_size)
        batch = images[idx]
        if policy is not None:
            batch = np.stack([policy(img, stream(seed, 2, t, j)) for j, img in enumerate(batch)])
        loss, g = model.loss_and_grad(p, batch, labels[idx])
        model.step(p, g, opt)
        losses.append(loss)
    return p, losses


def diversity(
    policy: Policy,
    cfg: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    steps: int,
    seed: int = 0,
    window: float = 0.2,
) -> DiversityReport:
    """Mean training loss over the final ``window`` fraction of steps."""
    _, losses = train_plain(images, labels, num_classes, cfg, steps, seed, policy)
    n = max(1, int(round(steps * window)))
    return DiversityReport(float(np.mean(losses[-n:])), len(images), getattr(policy, "__name__", "policy"), tuple(losses))


# -- rejection rates ----------------------------------------------------------


@dataclass
class RejectionStats:
    """Wider/weak counts keyed by ``(epoch, domain)``."""

    counts: dict[tuple[int, int], list[int]] = field(default_factory=dict)

    def ratio(self, epoch: int, domain: int) -> float:
        wider, weak = self.counts[(epoch, domain)]
        return wider / (wider + weak)

    def by_domain(self) -> dict[int, float]:
        totals: dict[int, list[int]] = defaultdict(lambda: [0, 0])
        for (_, d), (wider, weak) in self.counts.items():
            totals[d][0] += wider
            totals[d][1] += weak
        return {d: w / (w + k) for d, (w, k) in sorted(totals.items())}

    def overall(self) -> float:
        wider = sum(c[0] for c in self.counts.values())
        total = sum(c[0] + c[1] for c in self.counts.values())
        return wider / total if total else float("nan")

    def rows(self) -> list[dict]:
        return [
            {"epoch": e, "domain": d, "wider": w, "weak": k, "ratio": w / (w + k)}
            for (e, d), (w, k) in sorted(self.counts.items())
        ]


def rejection_series(records: Iterable, steps_per_epoch: int = 1) -> RejectionStats:
    """Count decisions per epoch and domain.

    ``records`` may be SelectionRecords or their JSON dicts.
    """
    stats = RejectionStats()
    for r in records:
        if not isinstance(r, Mapping):
            r = r.to_dict()
        key = (r["step"] // steps_per_epoch, -1 if r["domain"] is None else r["domain"])
        c = stats.counts.setdefault(key, [0, 0])
        c[0 if r["decision"] == "wider" else 1] += 1
    return stats


# -- leave-one-domain-out -----------------------------------------------------


def split_train_val(ds: DomainDataset, fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Per-domain, per-class seeded split holding out ``fraction`` for validation."""
    train_idx, val_idx = [], []
    for d in np.unique(ds.domains):
        for y in np.unique(ds.labels):
            idx = np.flatnonzero((ds.domains == d) & (ds.labels == y))
            if len(idx) == 0:
                continue
            idx = stream(seed, int(d), int(y)).permutation(idx)
            n_val = int(round(len(idx) * fraction))
            val_idx.extend(idx[:n_val])
            train_idx.extend(idx[n_val:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx))


@dataclass(frozen=True)
class LooRow:
    name: str
    holdout: int
    seed: int
    accuracy: float
    val_accuracy: float
    extra: dict = field(default_factory=dict)


@dataclass
class LooResult:
    rows: list[LooRow]
    domain_names: tuple[str, ...]

    def table(self) -> dict[str, dict]:
        """Per name: held-out-domain means/stds plus the average across domains."""
        out = {}
        for name in sorted({r.name for r in self.rows}):
            rows = [r for r in self.rows if r.name == name]
            per_domain = {}
            for d in sorted({r.holdout for r in rows}):
                acc = np.array([r.accuracy for r in rows if r.holdout == d])
                per_domain[self.domain_names[d]] = {"mean": float(acc.mean()), "std": float(acc.std()), "n": len(acc)}
            seeds = sorted({r.seed for r in rows})
            per_seed = np.array([np.mean([r.accuracy for r in rows if r.seed == s]) for s in seeds])
            out[name] = {
                "domains": per_domain,
                "average": {"mean": float(per_seed.mean()), "std": float(per_seed.std()), "n": len(per_seed)},
            }
        return out


FitFn = Callable[[DomainDataset, DomainDataset, int, int], "Predictor | Mapping[str, Predictor]"]


def leave_one_out_eval(
    ds: DomainDataset,
    fit: FitFn,
    seeds: Iterable[int],
    holdouts: Iterable[int] | None = None,
    val_fraction: float = 0.2,
    split_seed: int = 0,
    map_fn: Callable = map,
) -> LooResult:
    """Train on every domain but one, test on the one left out.

    ``fit(train, val, holdout, seed)`` sees only source-domain data and
    returns a predictor (or a mapping of named predictors); the validation
    split is there for its checkpoint selection. A predictor's optional
    ``info`` dict is carried into the row. ``map_fn`` may be an executor's
    ``map`` when ``fit`` pickles.
    """
    if ds.num_domains < 2:
        raise ValueError("leave-one-out needs at least 2 domains")
    for d in range(ds.num_domains):
        if not np.any(ds.domains == d):
            raise ValueError(f"domain {ds.domain_names[d]!r} is empty")
    holdouts = range(ds.num_domains) if holdouts is None else list(holdouts)
    jobs = []
    for d in holdouts:
        source = ds.subset(np.flatnonzero(ds.domains != d))
        train, val = split_train_val(source, val_fraction, split_seed)
        jobs.extend((fit, train, val, ds.domain(d), d, seed) for seed in seeds)
    rows = [row for rows in map_fn(_fit_and_score, jobs) for row in rows]
    return LooResult(rows, ds.domain_names)


def _fit_and_score(job) -> list[LooRow]:
    fit, train, val, target, d, seed = job
    fitted = fit(train, val, d, seed)
    if not isinstance(fitted, Mapping):
        fitted = {"model": fitted}
    return [
        LooRow(
            name, d, seed,
            accuracy(predict, target.images, target.labels),
            accuracy(predict, val.images, val.labels),
            dict(getattr(predict, "info", {})),
        )
        for name, predict in fitted.items()
    ]
