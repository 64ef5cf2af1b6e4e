"""Reward-based choice between the weak and the wider view of each sample.

Every step runs in two phases. First the current parameters are treated
as a frozen snapshot: both candidate views of every sample are scored
with ``(1 - lam) * r_div - lam * r_con`` and the higher-scoring one is kept
(ties keep the wider view). Then the label classifier takes one Adam step
on the kept views, followed by whichever EMA / domain-classifier updates
the variant maintains.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dcaug import augment, model
from dcaug.augment import AppliedTransform, SearchSpace, WeakConfig
from dcaug.model import ClassifierParams, EmaState, OptimState


class Variant(str, enum.Enum):
    DOMAIN = "dcaug-domain"
    LABEL = "dcaug-label"
    LABEL_EMA_FINAL = "teachdcaug-label"
    DOMAIN_DIV_LABEL_CON = "ablation-domdiv-labcon"
    EMA_BOTH = "ablation-ema-both"
    TA = "ta"
    ERM = "erm"

    @classmethod
    def parse(cls, name: str | Variant) -> Variant:
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace("_", "-")
        if key in _ALIASES:
            return _ALIASES[key]
        return cls(key)

    @property
    def selects(self) -> bool:
        return self not in (Variant.TA, Variant.ERM)

    @property
    def trains_domain_classifier(self) -> bool:
        return self in (Variant.DOMAIN, Variant.DOMAIN_DIV_LABEL_CON, Variant.EMA_BOTH)

    @property
    def keeps_domain_ema(self) -> bool:
        return self in (Variant.DOMAIN, Variant.EMA_BOTH)

    @property
    def keeps_label_ema(self) -> bool:
        return self in (Variant.LABEL, Variant.LABEL_EMA_FINAL, Variant.EMA_BOTH)

    @property
    def needs_domains(self) -> bool:
        return self.trains_domain_classifier


_ALIASES = {
    "domainreward": Variant.DOMAIN,
    "labelreward": Variant.LABEL,
    "labelrewardemafinal": Variant.LABEL_EMA_FINAL,
    "ablationdomaindivlabelcon": Variant.DOMAIN_DIV_LABEL_CON,
    "ablationemaboth": Variant.EMA_BOTH,
    "policyta": Variant.TA,
    "policyerm": Variant.ERM,
}


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.5
    variant: Variant = Variant.LABEL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_div: float
    r_con: float
    r: float

    def to_dict(self) -> dict:
        return {"r_div": self.r_div, "r_con": self.r_con, "r": self.r}


def combine(lam: float, r_div, r_con):
    return (1.0 - lam) * r_div - lam * r_con


class Decision(str, enum.Enum):
    WEAK = "weak"
    WIDER = "wider"


@dataclass(frozen=True)
class SelectionRecord:
    step: int
    index: int
    domain: int | None
    label: int
    weak: RewardBreakdown | None
    wider: RewardBreakdown | None
    transform: AppliedTransform | None
    decision: Decision

    def to_dict(self) -> dict:
        t = self.transform
        return {
            "step": int(self.step),
            "index": int(self.index),
            "domain": None if self.domain is None else int(self.domain),
            "label": int(self.label),
            "decision": self.decision.value,
            "weak": self.weak.to_dict() if self.weak else None,
            "wider": self.wider.to_dict() if self.wider else None,
            "op": t.op.value if t else None,
            "magnitude": t.magnitude if t else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class Models:
    """The parameter sets a variant scores with; unused slots stay ``None``."""

    f: ClassifierParams
    f_ema: EmaState | None = None
    h: ClassifierParams | None = None
    h_ema: EmaState | None = None

    def checksum(self) -> str:
        parts = [self.f.checksum()]
        for extra in (self.f_ema and self.f_ema.shadow, self.h, self.h_ema and self.h_ema.shadow):
            parts.append(extra.checksum() if extra is not None else "-")
        return ":".join(parts)


def _ce(params: ClassifierParams | EmaState | None, x, z, what: str):
    if params is None:
        raise ValueError(f"variant needs the {what}, which is not maintained")
    if z is None:
        raise ValueError(f"variant needs {what} targets, none given")
    if isinstance(params, EmaState):
        params = params.shadow
    return model.cross_entropy(model.forward(params, x), z)


def reward_components(cfg: RewardConfig, models: Models, x, y=None, d=None) -> RewardBreakdown:
    """Diversity and consistency losses of ``x`` under the variant's models.

    ``x`` may be one image or a batch; the breakdown fields follow suit.
    Nothing in ``models`` is modified.
    """
    v = cfg.variant
    x = model.as_features(x)
    if v is Variant.DOMAIN:
        r_div = _ce(models.h, x, d, "domain classifier")
        r_con = _ce(models.h_ema, x, d, "domain teacher")
    elif v in (Variant.LABEL, Variant.LABEL_EMA_FINAL):
        r_div = _ce(models.f, x, y, "label classifier")
        r_con = _ce(models.f_ema, x, y, "label teacher")
    elif v is Variant.DOMAIN_DIV_LABEL_CON:
        r_div = _ce(models.h, x, d, "domain classifier")
        r_con = _ce(models.f, x, y, "label classifier")
    elif v is Variant.EMA_BOTH:
        r_div = _ce(models.h_ema, x, d, "domain teacher")
        r_con = _ce(models.f_ema, x, y, "label teacher")
    else:
        raise ValueError(f"{v.value} does not compute rewards")
    return RewardBreakdown(r_div, r_con, combine(cfg.lam, r_div, r_con))


def prefer_wider(weak_r, wider_r):
    """The comparison rule itself: ties go to the wider view."""
    return np.asarray(wider_r) >= np.asarray(weak_r)


def decide(lam: float, weak_div, weak_con, wider_div, wider_con):
    """True where the wider candidate wins, from the four per-sample losses."""
    return prefer_wider(combine(lam, weak_div, weak_con), combine(lam, wider_div, wider_con))


def select_batch(
    weak: np.ndarray,
    wider: np.ndarray,
    y,
    d,
    models: Models,
    cfg: RewardConfig,
) -> tuple[np.ndarray, RewardBreakdown | None, RewardBreakdown | None]:
    """Boolean mask (True = wider kept) plus per-candidate breakdowns."""
    n = len(weak)
    if cfg.variant is Variant.TA:
        return np.ones(n, dtype=bool), None, None
    if cfg.variant is Variant.ERM:
        return np.zeros(n, dtype=bool), None, None
    both = np.concatenate([weak, wider])
    yy = None if y is None else np.concatenate([y, y])
    dd = None if d is None else np.concatenate([d, d])
    rb = reward_components(cfg, models, both, yy, dd)
    weak_rb = RewardBreakdown(rb.r_div[:n], rb.r_con[:n], rb.r[:n])
    wider_rb = RewardBreakdown(rb.r_div[n:], rb.r_con[n:], rb.r[n:])
    mask = decide(cfg.lam, weak_rb.r_div, weak_rb.r_con, wider_rb.r_div, wider_rb.r_con)
    return mask, weak_rb, wider_rb


def select(
    weak_img: np.ndarray,
    wider_img: np.ndarray,
    y: int | None,
    d: int | None,
    models: Models,
    cfg: RewardConfig,
    transform: AppliedTransform | None = None,
    step: int = 0,
    index: int = 0,
) -> tuple[np.ndarray, SelectionRecord]:
    ys = None if y is None else np.array([y])
    ds = None if d is None else np.array([d])
    mask, weak_rb, wider_rb = select_batch(weak_img[None], wider_img[None], ys, ds, models, cfg)
    rec = _record(step, index, d, y, weak_rb, wider_rb, 0, transform, bool(mask[0]))
    return (wider_img if mask[0] else weak_img), rec


def _row(rb: RewardBreakdown | None, i: int) -> RewardBreakdown | None:
    if rb is None:
        return None
    return RewardBreakdown(float(rb.r_div[i]), float(rb.r_con[i]), float(rb.r[i]))


def _record(step, index, d, y, weak_rb, wider_rb, i, transform, wider) -> SelectionRecord:
    return SelectionRecord(
        step=step,
        index=index,
        domain=None if d is None else int(d),
        label=int(y) if y is not None else -1,
        weak=_row(weak_rb, i),
        wider=_row(wider_rb, i),
        transform=transform,
        decision=Decision.WIDER if wider else Decision.WEAK,
    )


@dataclass
class TrainState:
    """Everything a run mutates; phase 2 of a step updates it in place."""

    models: Models
    opt_f: OptimState
    opt_h: OptimState | None = None
    step: int = 0


def init_state(
    cfg: RewardConfig,
    input_size: int,
    num_classes: int,
    num_domains: int,
    rng: np.random.Generator,
    hidden: int = 64,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    beta: float = 0.999,
) -> TrainState:
    """Fresh classifiers for ``cfg.variant``. The label classifier is always
    initialised first so that it is identical across variants for a seed."""
    f = model.init_params(input_size, hidden, num_classes, rng)
    h_rng = np.random.default_rng(rng.integers(2**63))
    f_ema = EmaState.of(f, beta) if cfg.variant.keeps_label_ema else None
    h = h_ema = opt_h = None
    if cfg.variant.trains_domain_classifier:
        h = model.init_params(input_size, hidden, num_domains, h_rng)
        opt_h = model.adam_init(h, lr, weight_decay)
        if cfg.variant.keeps_domain_ema:
            h_ema = EmaState.of(h, beta)
    return TrainState(Models(f, f_ema, h, h_ema), model.adam_init(f, lr, weight_decay), opt_h, 0)


@dataclass
class StepResult:
    state: TrainState
    records: list[SelectionRecord] = field(default_factory=list)
    loss: float = math.nan


def train_minibatch(
    images: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray | None,
    state: TrainState,
    cfg: RewardConfig,
    space: SearchSpace,
    weak_cfg: WeakConfig,
    rngs: Sequence[np.random.Generator],
    sample_ids: Sequence[int] | None = None,
) -> StepResult:
    """One training step; ``rngs`` holds one independent stream per sample."""
    n = len(images)
    if n == 0:
        raise ValueError("empty batch")
    if len(rngs) != n:
        raise ValueError(f"{len(rngs)} rng streams for {n} samples")
    if cfg.variant.needs_domains and domains is None:
        raise ValueError(f"{cfg.variant.value} needs domain labels")
    labels = np.asarray(labels, dtype=np.int64)
    ids = range(n) if sample_ids is None else sample_ids

    # phase 1: candidates and selection against the frozen snapshot
    weak = augment.weak_augment_batch(images, weak_cfg, rngs)
    wider = np.empty_like(images) if cfg.variant is not Variant.ERM else None
    transforms: list[AppliedTransform | None] = [None] * n
    if wider is not None:
        for i in range(n):
            wider[i], transforms[i] = augment.wider_augment(
                weak[i], space, rngs[i], (state.step, ids[i])
            )
    mask, weak_rb, wider_rb = select_batch(
        weak, wider if wider is not None else weak, labels, domains, state.models, cfg
    )
    chosen = np.where(mask[:, None, None, None], wider, weak) if wider is not None else weak
    records = [
        _record(
            state.step, ids[i], None if domains is None else domains[i], labels[i],
            weak_rb, wider_rb, i, transforms[i], bool(mask[i]),
        )
        for i in range(n)
    ]

    # phase 2: updates in the fixed order f, f_ema, h, h_ema
    m = state.models
    if m.h is not None:
        chosen = model.as_features(chosen)
    loss, g = model.loss_and_grad(m.f, chosen, labels)
    model.step(m.f, g, state.opt_f)
    if m.f_ema is not None:
        model.ema_update(m.f_ema, m.f)
    if m.h is not None:
        _, gh = model.loss_and_grad(m.h, chosen, domains)
        model.step(m.h, gh, state.opt_h)
        if m.h_ema is not None:
            model.ema_update(m.h_ema, m.h)
    state.step += 1
    return StepResult(state, records, loss)


def final_classifier(state: TrainState | Models, cfg: RewardConfig) -> ClassifierParams:
    models = state.models if isinstance(state, TrainState) else state
    if cfg.variant is Variant.LABEL_EMA_FINAL:
        return models.f_ema.shadow
    return models.f
