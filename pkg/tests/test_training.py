import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcaug import augment, model, training
from dcaug.augment import SearchSpace, WeakConfig
from dcaug.model import EmaState
from dcaug.training import Models, RewardConfig, Variant

SIDE = 8
SPACE = SearchSpace.named("wider", SIDE)
WEAK = WeakConfig()


def batch(n=6, seed=0, classes=3, domains=2):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, (n, SIDE, SIDE, 3), dtype=np.uint8)
    return x, rng.integers(0, classes, n), rng.integers(0, domains, n)


def fresh_state(variant, lam=0.5, seed=0, beta=0.999, classes=3, domains=2):
    cfg = RewardConfig(lam, variant)
    state = training.init_state(cfg, SIDE * SIDE * 3, classes, domains, np.random.default_rng(seed), hidden=7, beta=beta)
    return cfg, state


def rngs(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def perturbed(models: Models, seed=1):
    """Give every slot its own parameters so the variants are distinguishable."""
    rng = np.random.default_rng(seed)
    jitter = lambda p: p.map(lambda t: t + rng.normal(scale=0.3, size=t.shape))  # noqa: E731
    f_ema = models.f_ema and EmaState(jitter(models.f_ema.shadow), models.f_ema.beta)
    h_ema = models.h_ema and EmaState(jitter(models.h_ema.shadow), models.h_ema.beta)
    return Models(jitter(models.f), f_ema, models.h and jitter(models.h), h_ema)


# -- reward arithmetic --------------------------------------------------------


def test_combine_arithmetic():
    assert training.combine(0.5, 2.0, 3.0) == -0.5
    assert training.combine(0.0, 1.7, 99.0) == 1.7
    assert training.combine(1.0, 99.0, 0.4) == -0.4


def test_decision_examples():
    # equal rewards go to the wider view
    assert training.decide(0.5, 1.0, 1.0, 1.0, 1.0)
    # weak 0.25 beats wider -0.5
    assert not training.decide(0.5, 1.0, 0.5, 2.0, 3.0)
    # consistency only: the high-teacher-loss candidate is rejected
    assert not training.decide(1.0, 0.0, 0.1, 0.0, 5.0)


def test_decide_matches_direct_evaluation_on_10k_tuples():
    rng = np.random.default_rng(2024)
    n = 10_000
    lam = rng.choice([0.0, 0.2, 0.5, 0.8, 1.0, *rng.uniform(0, 1, 5)], n)
    losses = rng.exponential(2.0, (n, 4))
    # a quarter of the tuples are exact ties
    tie = rng.random(n) < 0.25
    losses[tie, 2:] = losses[tie, :2]
    got = training.decide(lam, *losses.T)
    for i in range(n):
        wd, wc, xd, xc = (float(v) for v in losses[i])
        li = float(lam[i])
        expect = (1 - li) * xd - li * xc >= (1 - li) * wd - li * wc
        assert bool(got[i]) == expect
    assert got[tie].all()


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]),
    st.lists(st.integers(0, 64), min_size=4, max_size=4),
    st.integers(-32, 32),
    st.integers(-32, 32),
)
def test_decision_invariant_under_common_shift(lam, losses, c_div, c_con):
    # dyadic values keep the arithmetic exact, so only the sign of R(wider) - R(weak) matters
    wd, wc, xd, xc = (v / 8 for v in losses)
    a, b = c_div / 8, c_con / 8
    assert training.decide(lam, wd, wc, xd, xc) == training.decide(lam, wd + a, wc + b, xd + a, xc + b)


def test_reward_config_validation():
    RewardConfig(0.7, "dcaug-label")
    for lam in (0.2, 0.5, 0.8):
        RewardConfig(lam)
    with pytest.raises(ValueError):
        RewardConfig(1.2)
    with pytest.raises(ValueError):
        RewardConfig(0.5, "nonsense")
    assert RewardConfig(0.5, "DomainReward").variant is Variant.DOMAIN


# -- reward components --------------------------------------------------------


def test_components_per_variant():
    x, y, d = batch()
    _, state = fresh_state(Variant.EMA_BOTH)
    _, dom = fresh_state(Variant.DOMAIN)
    m = perturbed(Models(state.models.f, state.models.f_ema, dom.models.h, dom.models.h_ema))
    ce = lambda p, z: model.cross_entropy(model.forward(p, x), z)  # noqa: E731
    expected = {
        Variant.DOMAIN: (ce(m.h, d), ce(m.h_ema.shadow, d)),
        Variant.LABEL: (ce(m.f, y), ce(m.f_ema.shadow, y)),
        Variant.LABEL_EMA_FINAL: (ce(m.f, y), ce(m.f_ema.shadow, y)),
        Variant.DOMAIN_DIV_LABEL_CON: (ce(m.h, d), ce(m.f, y)),
        Variant.EMA_BOTH: (ce(m.h_ema.shadow, d), ce(m.f_ema.shadow, y)),
    }
    for v, (div, con) in expected.items():
        rb = training.reward_components(RewardConfig(0.3, v), m, x, y, d)
        np.testing.assert_array_equal(rb.r_div, div)
        np.testing.assert_array_equal(rb.r_con, con)
        np.testing.assert_array_equal(rb.r, 0.7 * div - 0.3 * con)


def test_components_errors():
    x, y, d = batch()
    _, state = fresh_state(Variant.LABEL)
    with pytest.raises(ValueError):
        training.reward_components(RewardConfig(0.5, Variant.DOMAIN), state.models, x, y, d)
    _, dom = fresh_state(Variant.DOMAIN)
    with pytest.raises(ValueError):
        training.reward_components(RewardConfig(0.5, Variant.DOMAIN), dom.models, x, y, None)
    with pytest.raises(ValueError):
        training.reward_components(RewardConfig(0.5, Variant.TA), state.models, x, y, d)


def test_variant_reduction_label_vs_ema_both():
    x, y, _ = batch(12, seed=3)
    _, state = fresh_state(Variant.EMA_BOTH)
    m = perturbed(state.models)
    # the domain teacher becomes the label student, domain targets become labels
    same = Models(m.f, m.f_ema, None, EmaState(m.f.copy(), 0.999))
    weak, wider = x, x[::-1].copy()
    mask_label, *_ = training.select_batch(weak, wider, y, None, same, RewardConfig(0.4, Variant.LABEL))
    mask_both, *_ = training.select_batch(weak, wider, y, y, same, RewardConfig(0.4, Variant.EMA_BOTH))
    np.testing.assert_array_equal(mask_label, mask_both)


def test_select_single_sample_record():
    x, y, d = batch(2)
    cfg, state = fresh_state(Variant.LABEL)
    m = perturbed(state.models)
    img, rec = training.select(x[0], x[1], int(y[0]), int(d[0]), m, cfg, step=4, index=17)
    weak = training.reward_components(cfg, m, x[0], int(y[0]))
    wider = training.reward_components(cfg, m, x[1], int(y[0]))
    assert rec.weak.r == pytest.approx(weak.r, abs=1e-12) and rec.wider.r == pytest.approx(wider.r, abs=1e-12)
    assert (rec.decision is training.Decision.WIDER) == (wider.r >= weak.r)
    np.testing.assert_array_equal(img, x[1] if wider.r >= weak.r else x[0])
    assert rec.step == 4 and rec.index == 17
    assert set(rec.to_dict()) == {"step", "index", "domain", "label", "decision", "weak", "wider", "op", "magnitude"}


# -- training step ------------------------------------------------------------


@pytest.mark.parametrize("variant", [v for v in Variant if v.selects])
def test_phase_one_mutates_nothing(variant):
    x, y, d = batch(8)
    cfg, state = fresh_state(variant)
    before = state.models.checksum()
    training.select_batch(x, x[::-1].copy(), y, d, state.models, cfg)
    training.reward_components(cfg, state.models, x, y, d)
    assert state.models.checksum() == before


@pytest.mark.parametrize("variant", list(Variant))
def test_records_partition_the_batch(variant):
    x, y, d = batch(10)
    cfg, state = fresh_state(variant)
    res = training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(10))
    assert len(res.records) == 10
    kinds = [r.decision for r in res.records]
    assert kinds.count(training.Decision.WEAK) + kinds.count(training.Decision.WIDER) == 10
    assert state.step == 1 and np.isfinite(res.loss)


def test_selection_uses_pre_update_snapshot():
    x, y, d = batch(8, seed=5)
    cfg, state = fresh_state(Variant.DOMAIN, lam=0.5)
    snap = Models(state.models.f.copy(), None, state.models.h.copy(), state.models.h_ema.copy())
    res = training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8, 9))
    for r in res.records:
        assert r.weak is not None and r.wider is not None
    # replaying phase 1 against the snapshot gives the logged rewards
    replay = rngs(8, 9)
    weak = augment.weak_augment_batch(x, WEAK, replay)
    wider = np.stack([augment.wider_augment(weak[i], SPACE, replay[i])[0] for i in range(8)])
    mask, weak_rb, wider_rb = training.select_batch(weak, wider, y, d, snap, cfg)
    np.testing.assert_allclose([r.weak.r for r in res.records], weak_rb.r, rtol=0, atol=1e-12)
    np.testing.assert_array_equal([r.decision.value == "wider" for r in res.records], mask)


def test_fixed_policies_are_constant():
    x, y, d = batch(16)
    for variant, expect in [(Variant.TA, "wider"), (Variant.ERM, "weak")]:
        cfg, state = fresh_state(variant)
        for t in range(3):
            res = training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(16, t))
            assert {r.decision.value for r in res.records} == {expect}
            assert all(r.weak is None and r.wider is None for r in res.records)
        assert state.models.h is None and state.models.f_ema is None


def test_ema_moves_by_closed_form_after_a_step():
    x, y, d = batch(8)
    cfg, state = fresh_state(Variant.LABEL, beta=0.9)
    # let the shadow drift from the student first
    for t in range(3):
        training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8, t))
    e = state.models.f_ema.shadow.copy()
    training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8, 7))
    p = state.models.f
    shift = state.models.f_ema.shadow.flat() - e.flat()
    np.testing.assert_allclose(shift, 0.1 * (p.flat() - e.flat()), rtol=0, atol=1e-14)


def test_domain_variant_trains_both_classifiers():
    x, y, d = batch(8)
    cfg, state = fresh_state(Variant.DOMAIN)
    f0, h0, he0 = state.models.f.copy(), state.models.h.copy(), state.models.h_ema.copy()
    training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8))
    m = state.models
    assert m.f.checksum() != f0.checksum() and m.h.checksum() != h0.checksum()
    assert m.h_ema.shadow.checksum() != he0.shadow.checksum()
    assert m.f_ema is None
    assert m.h.num_classes == 2 and m.f.num_classes == 3


def test_label_classifier_identical_across_variants():
    inits = {v: fresh_state(v, seed=11)[1].models.f.checksum() for v in Variant}
    assert len(set(inits.values())) == 1


def test_step_errors():
    x, y, d = batch(4)
    cfg, state = fresh_state(Variant.DOMAIN)
    with pytest.raises(ValueError):
        training.train_minibatch(x[:0], y[:0], d[:0], state, cfg, SPACE, WEAK, [])
    with pytest.raises(ValueError):
        training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(3))
    with pytest.raises(ValueError):
        training.train_minibatch(x, y, None, state, cfg, SPACE, WEAK, rngs(4))


def test_steps_are_deterministic():
    x, y, d = batch(8)
    sums = []
    for _ in range(2):
        cfg, state = fresh_state(Variant.LABEL)
        logs = []
        for t in range(4):
            logs += [r.to_json() for r in training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8, t)).records]
        sums.append((state.models.checksum(), logs))
    assert sums[0] == sums[1]


# -- final classifier ---------------------------------------------------------


def test_final_classifier_choice():
    x, y, d = batch(8)
    for variant in (Variant.LABEL_EMA_FINAL, Variant.LABEL, Variant.DOMAIN):
        cfg, state = fresh_state(variant)
        training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8))
        final = training.final_classifier(state, cfg)
        if variant is Variant.LABEL_EMA_FINAL:
            assert final is state.models.f_ema.shadow
        else:
            assert final is state.models.f


def test_zero_beta_makes_teacher_equal_student():
    x, y, d = batch(8)
    cfg, state = fresh_state(Variant.LABEL_EMA_FINAL, beta=0.0)
    for t in range(3):
        training.train_minibatch(x, y, d, state, cfg, SPACE, WEAK, rngs(8, t))
    teach = training.final_classifier(state, cfg)
    student = training.final_classifier(state, RewardConfig(cfg.lam, Variant.LABEL))
    np.testing.assert_array_equal(teach.flat(), student.flat())
