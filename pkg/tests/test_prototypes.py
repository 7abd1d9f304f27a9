import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacvr import prototypes as pr
from metacvr.featurespace import OCC_INDEX, OCCASIONS
from metacvr.frn import represent


@pytest.fixture(scope="module")
def bank(tiny_data, tiny_stage1):
    return pr.build_bank(tiny_data["recent"], tiny_stage1.model_params(), seed=0,
                         checkpoint_id=tiny_stage1.checkpoint_id())


def test_prototype_oracle(rng):
    feats = rng.normal(size=(9, 5))
    m = feats.mean(axis=0)
    np.testing.assert_allclose(pr.prototype_from_features(feats), m / np.linalg.norm(m), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_prototype_permutation_and_duplication_invariant(seed, n):
    r = np.random.default_rng(seed)
    feats = r.normal(size=(n, 6)) + 0.5
    p = pr.prototype_from_features(feats)
    np.testing.assert_allclose(np.linalg.norm(p), 1.0, atol=1e-5)
    np.testing.assert_allclose(pr.prototype_from_features(feats[r.permutation(n)]), p, atol=1e-10)
    np.testing.assert_allclose(pr.prototype_from_features(np.concatenate([feats, feats])), p, atol=1e-10)


def test_cancelling_support_set_gives_zero(caplog):
    v = np.array([[1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_array_equal(pr.prototype_from_features(v), 0)
    assert "degenerate" in caplog.text


def test_empty_support_set_rejected():
    with pytest.raises(ValueError):
        pr.prototype_from_features(np.zeros((0, 3)))


def test_bank_has_unit_prototypes_for_every_pair(bank):
    assert set(bank.vectors) == {(o, c) for o in OCCASIONS for c in pr.CLASSES}
    for v in bank.vectors.values():
        assert v.shape == (160,)
        np.testing.assert_allclose(np.linalg.norm(v), 1.0, atol=1e-5)
    assert bank.dim() == 160


def test_bank_uses_most_recent_day_with_both_classes(bank, tiny_data):
    recent = tiny_data["recent"]
    for occ in OCCASIONS:
        rows = recent.occasion == OCC_INDEX[occ]
        good = [d for d in np.unique(recent.date[rows])
                if 0 < recent.purchase[rows & (recent.date == d)].sum() < (rows & (recent.date == d)).sum()]
        assert bank.provenance[f"{occ}/pos/day"] == str(max(good))


def test_support_sets_respect_cap_and_are_deterministic(tiny_data):
    a = pr.build_support_sets(tiny_data["recent"], cap=3, seed=4)
    b = pr.build_support_sets(tiny_data["recent"], cap=3, seed=4)
    for key, s in a.items():
        assert len(s) <= 3 and s.full_size >= len(s)
        np.testing.assert_array_equal(s.samples.user_id, b[key].samples.user_id)
        assert set(s.samples.purchase) == {1 if s.cls == "pos" else 0}


def test_pooled_fallback_when_no_day_has_both_classes(tiny_data, caplog):
    recent = tiny_data["recent"].subset(np.arange(len(tiny_data["recent"])))
    bp = recent.occasion == OCC_INDEX["BP"]
    days = np.unique(recent.date[bp])
    # put all BP purchases on the first BP day, then drop that day's non-purchases
    recent.purchase = recent.purchase.copy()
    keep = np.ones(len(recent), bool)
    for d in days:
        rows = bp & (recent.date == d)
        if d == days[0]:
            keep &= ~(rows & (recent.purchase == 0))
            recent.purchase[rows] = 1
        else:
            recent.purchase[rows] = 0
    recent = recent.subset(np.flatnonzero(keep))
    sets = pr.build_support_sets(recent)
    assert sets[("BP", "pos")].source_day == "pooled"
    assert "pooling" in caplog.text


def test_missing_occasion_raises(tiny_data):
    recent = tiny_data["recent"]
    no_ap = recent.subset(np.flatnonzero(recent.occasion != OCC_INDEX["AP"]))
    with pytest.raises(pr.SupportSetError) as err:
        pr.build_support_sets(no_ap)
    assert err.value.occasion == "AP"


def test_prototype_matches_mean_of_representations(bank, tiny_data, tiny_stage1):
    sets = pr.build_support_sets(tiny_data["recent"], seed=0)
    feats, _ = represent(sets[("DP", "pos")].samples, tiny_stage1.model_params())
    m = feats.mean(axis=0)
    np.testing.assert_allclose(bank.get("DP", "+"), m / np.linalg.norm(m), atol=1e-5)


def test_bank_tensor_round_trip(bank):
    again = pr.PrototypeBank.from_tensors(bank.to_tensors())
    for k, v in bank.vectors.items():
        np.testing.assert_array_equal(again.vectors[k], v)
    t = bank.to_tensors()
    del t["proto/NP/neg"]
    with pytest.raises(KeyError):
        pr.PrototypeBank.from_tensors(t)


def test_class_aliases(bank):
    assert bank.get("BP", "+") is bank.get("BP", "pos")
    with pytest.raises(KeyError):
        bank.get("BP", "x")
