import numpy as np
import pytest

from dcaug import metrics, model
from dcaug.augment import AppliedTransform, SearchSpace, TransformOp, apply
from dcaug.harness.data import DomainDataset, SyntheticDomainSpec, generate_dataset
from dcaug.training import Decision, SelectionRecord

CFG = metrics.ModelConfig(hidden=16, lr=3e-3, batch_size=16)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(SyntheticDomainSpec.default(domains=3, classes=3, side=12, samples_per_domain=30), seed=1)


@pytest.fixture(scope="module")
def clean_model(tiny):
    p, _ = metrics.train_plain(tiny.images, tiny.labels, tiny.num_classes, CFG, 150, seed=0)
    return p


# -- affinity -----------------------------------------------------------------


def test_identity_policy_has_zero_affinity(tiny, clean_model):
    for seed in range(3):
        rep = metrics.affinity(clean_model, tiny.images, tiny.labels, metrics.identity_policy, seed)
        assert rep.affinity == 0.0 and rep.consistency == 0.0
        assert rep.samples == len(tiny)


def test_grey_policy_affinity_by_direct_evaluation(tiny, clean_model):
    images, labels = tiny.images[:50], tiny.labels[:50]
    grey = lambda img, rng: np.full_like(img, 128)  # noqa: E731
    rep = metrics.affinity(clean_model, images, labels, grey, 0)
    # every grey image gets the same prediction, so augmented accuracy is that class's share
    c = int(model.predict(clean_model, np.full_like(images[:1], 128))[0])
    clean = float(np.mean(model.predict(clean_model, images) == labels))
    assert rep.clean_accuracy == clean
    assert rep.augmented_accuracy == float(np.mean(labels == c))
    assert rep.affinity == clean - float(np.mean(labels == c))
    assert -1 <= rep.affinity <= 1


def test_affinity_is_deterministic(tiny, clean_model):
    pol = metrics.ta_policy(SearchSpace.named("wider", 12))
    a = metrics.affinity(clean_model, tiny.images, tiny.labels, pol, 5)
    b = metrics.affinity(clean_model, tiny.images, tiny.labels, pol, 5)
    assert a == b


def test_affinity_empty_set(clean_model):
    with pytest.raises(ValueError):
        metrics.affinity(clean_model, np.zeros((0, 12, 12, 3), np.uint8), np.zeros(0, int), metrics.identity_policy)


# -- diversity ----------------------------------------------------------------


def test_zero_magnitude_policy_matches_clean_training_exactly(tiny):
    zero = lambda img, rng: apply(AppliedTransform(TransformOp.ROTATE, 0.0), img)  # noqa: E731
    _, clean = metrics.train_plain(tiny.images, tiny.labels, 3, CFG, 40, seed=2)
    rep = metrics.diversity(zero, CFG, tiny.images, tiny.labels, 3, 40, seed=2)
    assert rep.losses == tuple(clean)


def test_wider_policy_is_more_diverse_than_identity(tiny):
    wider = metrics.ta_policy(SearchSpace.named("wider", 12))
    a = metrics.diversity(metrics.identity_policy, CFG, tiny.images, tiny.labels, 3, 150, seed=3)
    b = metrics.diversity(wider, CFG, tiny.images, tiny.labels, 3, 150, seed=3)
    assert b.mean_loss >= a.mean_loss >= 0
    assert b.policy == "ta_wider"


def test_constant_images_are_trivially_fitted():
    images = np.full((20, 6, 6, 3), 90, np.uint8)
    labels = np.zeros(20, int)
    colour_identity = lambda img, rng: apply(AppliedTransform(TransformOp.COLOR, 0.0), img)  # noqa: E731
    rep = metrics.diversity(colour_identity, CFG, images, labels, 3, 300, seed=0)
    assert rep.mean_loss < 1e-2


def test_window_is_final_fifth(tiny):
    rep = metrics.diversity(metrics.identity_policy, CFG, tiny.images, tiny.labels, 3, 50, seed=4)
    assert rep.mean_loss == pytest.approx(np.mean(rep.losses[-10:]), abs=1e-15)


def test_diversity_needs_steps(tiny):
    with pytest.raises(ValueError):
        metrics.diversity(metrics.identity_policy, CFG, tiny.images, tiny.labels, 3, 0)


# -- rejection series ---------------------------------------------------------


def rec(step, domain, decision):
    return SelectionRecord(step, 0, domain, 0, None, None, None, Decision(decision))


def test_rejection_counts_hand_computed():
    records = [rec(0, 0, "wider"), rec(0, 0, "weak"), rec(1, 0, "wider"), rec(0, 1, "weak"),
               rec(2, 1, "wider"), rec(3, 1, "wider"), rec(3, 0, "weak")]
    stats = metrics.rejection_series(records, steps_per_epoch=2)
    assert stats.counts == {(0, 0): [2, 1], (0, 1): [0, 1], (1, 1): [2, 0], (1, 0): [0, 1]}
    assert stats.ratio(0, 0) == 2 / 3
    assert stats.by_domain() == {0: 2 / 4, 1: 2 / 3}
    assert stats.overall() == 4 / 7
    # the same from JSON dicts
    assert metrics.rejection_series([r.to_dict() for r in records], 2).counts == stats.counts


def test_rejection_of_fixed_policies():
    ta = metrics.rejection_series([rec(s, s % 3, "wider") for s in range(30)], 5)
    erm = metrics.rejection_series([rec(s, s % 3, "weak") for s in range(30)], 5)
    assert all(r["ratio"] == 1.0 for r in ta.rows())
    assert all(r["ratio"] == 0.0 for r in erm.rows())
    assert sum(r["wider"] + r["weak"] for r in ta.rows()) == 30


def test_empty_rejection_stream():
    stats = metrics.rejection_series([])
    assert stats.counts == {} and np.isnan(stats.overall())


# -- leave-one-out ------------------------------------------------------------


def four_domains():
    return generate_dataset(SyntheticDomainSpec.default(domains=4, classes=5, side=8, samples_per_domain=25), seed=0)


def test_split_is_stratified_and_disjoint():
    ds = four_domains()
    train, val = metrics.split_train_val(ds, 0.2, seed=0)
    assert set(train.ids).isdisjoint(val.ids)
    assert len(train) + len(val) == len(ds)
    for d in range(4):
        for y in range(5):
            assert np.sum((val.domains == d) & (val.labels == y)) == 1  # 5 per cell * 0.2
    again = metrics.split_train_val(ds, 0.2, seed=0)[1]
    np.testing.assert_array_equal(again.ids, val.ids)


class Oracle:
    """Looks every image up in the full dataset."""

    def __init__(self, ds):
        self.table = {img.tobytes(): y for img, y in zip(ds.images, ds.labels)}
        self.info = {"kind": "oracle"}

    def __call__(self, images):
        return np.array([self.table[img.tobytes()] for img in images])


def test_oracle_scores_one_everywhere():
    ds = four_domains()
    seen = []

    def fit(train, val, holdout, seed):
        seen.append((holdout, seed, set(train.domains), set(val.domains)))
        return Oracle(ds)

    res = metrics.leave_one_out_eval(ds, fit, seeds=[0, 1])
    assert len(res.rows) == 8
    assert all(r.accuracy == 1.0 and r.val_accuracy == 1.0 for r in res.rows)
    assert all(r.extra == {"kind": "oracle"} for r in res.rows)
    table = res.table()["model"]
    assert set(table["domains"]) == set(ds.domain_names)
    assert table["average"] == {"mean": 1.0, "std": 0.0, "n": 2}
    # the held-out domain never reaches fit
    for holdout, _, train_d, val_d in seen:
        assert holdout not in train_d and holdout not in val_d


def test_named_predictors_and_average():
    ds = four_domains()

    def fit(train, val, holdout, seed):
        const = lambda x: np.full(len(x), (holdout + seed) % 5)  # noqa: E731
        return {"oracle": Oracle(ds), "const": const}

    res = metrics.leave_one_out_eval(ds, fit, seeds=[0, 1, 2], holdouts=[0, 2])
    table = res.table()
    assert set(table) == {"oracle", "const"}
    assert set(table["const"]["domains"]) == {ds.domain_names[0], ds.domain_names[2]}
    per_seed = [np.mean([r.accuracy for r in res.rows if r.name == "const" and r.seed == s]) for s in range(3)]
    assert table["const"]["average"]["mean"] == pytest.approx(np.mean(per_seed))
    assert table["const"]["average"]["std"] == pytest.approx(np.std(per_seed))


def test_protocol_errors():
    ds = four_domains()
    one = ds.subset(np.flatnonzero(ds.domains == 0))
    single = DomainDataset(one.images, one.labels, one.domains, 5, ("photo",))
    with pytest.raises(ValueError):
        metrics.leave_one_out_eval(single, lambda *a: Oracle(ds), [0])
    gap = DomainDataset(one.images, one.labels, one.domains, 5, ("photo", "empty"))
    with pytest.raises(ValueError):
        metrics.leave_one_out_eval(gap, lambda *a: Oracle(ds), [0])
