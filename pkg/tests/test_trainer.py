import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacvr import trainer as tr
from metacvr.featurespace import FeatureSchema
from metacvr.prototypes import build_bank
from metacvr.simgen import schema_for


def _ckpt(rng):
    return tr.ModelCheckpoint({"a/w": rng.normal(size=(3, 2)).astype(np.float32),
                               "b": np.array([1.5], np.float32), "s": np.array(2.0, np.float32)},
                              {"stage": "1", "note": "x y"})


def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    ck = _ckpt(rng)
    tr.save_checkpoint(ck, tmp_path / "a.ckpt")
    loaded = tr.load_checkpoint(tmp_path / "a.ckpt")
    tr.save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.metadata == ck.metadata
    for k, v in ck.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k], v)
        assert loaded.tensors[k].shape == v.shape


def test_checkpoint_layout_header(rng):
    blob = tr.dumps_checkpoint(_ckpt(rng))
    assert blob[:4] == b"MCVR"
    assert struct.unpack("<I", blob[4:8])[0] == tr.FORMAT_VERSION


def test_checkpoint_errors_are_distinct(rng):
    blob = tr.dumps_checkpoint(_ckpt(rng))
    with pytest.raises(tr.BadMagicError):
        tr.loads_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(tr.UnsupportedVersionError):
        tr.loads_checkpoint(blob[:4] + struct.pack("<I", 99) + blob[8:])
    for cut in (2, 6, 20, len(blob) - 1):
        with pytest.raises(tr.TruncatedCheckpointError):
            tr.loads_checkpoint(blob[:cut])
    with pytest.raises(tr.CheckpointError):
        tr.loads_checkpoint(blob + b"\0")
    assert len({tr.BadMagicError, tr.UnsupportedVersionError, tr.TruncatedCheckpointError}) == 3


def test_unencodable_metadata_rejected():
    with pytest.raises(tr.CheckpointError):
        tr.dumps_checkpoint(tr.ModelCheckpoint({}, {"a": "x\ny"}))


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abc/", min_size=1, max_size=6),
                       st.lists(st.integers(0, 4), min_size=0, max_size=3), max_size=4),
       st.integers(0, 1000))
def test_checkpoint_round_trip_property(shapes, seed):
    r = np.random.default_rng(seed)
    ck = tr.ModelCheckpoint({k: r.normal(size=tuple(s)).astype(np.float32) for k, s in shapes.items()},
                            {"seed": str(seed)})
    blob = tr.dumps_checkpoint(ck)
    assert tr.dumps_checkpoint(tr.loads_checkpoint(blob)) == blob


def test_checkpoint_id_tracks_values(rng):
    a = _ckpt(rng)
    b = tr.ModelCheckpoint({k: v.copy() for k, v in a.tensors.items()}, {"other": "meta"})
    assert a.checkpoint_id() == b.checkpoint_id()
    b.tensors["b"][0] += 1
    assert a.checkpoint_id() != b.checkpoint_id()


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        tr.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(metric_kind="manhattan")
    with pytest.raises(ValueError):
        tr.TrainConfig(val_fraction=1.0)


def test_stage1_checkpoint_contents(tiny_stage1, tiny_schema):
    md = tiny_stage1.metadata
    assert md["stage"] == "1" and md["model"] == "BASE" and md["schema"] == tiny_schema.digest()
    assert md["epochs_run"] == "1" and "history.000" in md
    assert all(k.startswith(("frn/", "embed/", "fb/", "norm/", "final/")) for k in tiny_stage1.tensors)


def test_training_is_deterministic(tiny_data, tiny_schema, tiny_stage1):
    again = tr.train_base(tiny_data["train"], tiny_schema, tr.TrainConfig(epochs_base=1, seed=5))
    assert tr.dumps_checkpoint(again) == tr.dumps_checkpoint(tiny_stage1)


def test_zero_epochs_returns_initialisation(tiny_data, tiny_schema):
    ck = tr.train_base(tiny_data["train"], tiny_schema, tr.TrainConfig(epochs_base=0, seed=2))
    init = tr.init_base_params(tiny_schema, 2)
    np.testing.assert_array_equal(ck.tensors["frn/sa/Wq"], init["frn/sa/Wq"])
    assert ck.metadata["epochs_run"] == "0"


def test_single_class_data_rejected(tiny_data, tiny_schema):
    d = tiny_data["train"]
    neg = d.subset(np.flatnonzero(d.purchase == 0))
    with pytest.raises(ValueError, match="both"):
        tr.train_base(neg, tiny_schema, tr.TrainConfig(epochs_base=1))


def test_best_validation_loss_is_non_increasing(tiny_data, tiny_schema):
    ck = tr.train_base(tiny_data["train"], tiny_schema,
                       tr.TrainConfig(epochs_base=3, patience=5, val_fraction=0.2, seed=1))
    best = [float(ck.metadata[f"history.{e:03d}"].split(",")[2]) for e in range(int(ck.metadata["epochs_run"]))]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_base_model_learns_a_separable_toy_problem(tiny_data, tiny_schema):
    d = tiny_data["train"].subset(np.arange(300))
    d.purchase = (d.user_id % 2).astype(np.int64)
    d.click = np.ones_like(d.click)
    ck = tr.train_base(d, tiny_schema, tr.TrainConfig(epochs_base=30, learning_rate=0.03,
                                                      val_fraction=0.0, batch_size=32, seed=0))
    p = np.clip(tr.predict_base(ck, d), 1e-7, 1 - 1e-7)
    assert -np.mean(d.purchase * np.log(p) + (1 - d.purchase) * np.log(1 - p)) < 0.05


def test_finetune_with_zero_lr_scale_keeps_parameters(tiny_data, tiny_stage1):
    f = tr.finetune_base(tiny_stage1, tiny_data["recent"],
                         tr.TrainConfig(epochs_finetune=1, finetune_lr_scale=1e-30, seed=0))
    for k, v in tiny_stage1.model_params().items():
        np.testing.assert_allclose(f.tensors[k], v, atol=1e-6)
    assert f.metadata["model"] == "BASE-F" and f.metadata["parent"] == tiny_stage1.checkpoint_id()


def test_finetune_uses_reduced_rate(tiny_data, tiny_stage1):
    f = tr.finetune_base(tiny_stage1, tiny_data["recent"], tr.TrainConfig(epochs_finetune=1, learning_rate=0.02))
    assert float(f.metadata["lr"]) == pytest.approx(0.002)


@pytest.fixture(scope="module")
def tiny_bank(tiny_data, tiny_stage1):
    return build_bank(tiny_data["recent"], tiny_stage1.model_params(), checkpoint_id=tiny_stage1.checkpoint_id())


@pytest.mark.parametrize("kind", ["spdm", "nndm", "cosine", "euclidean"])
def test_stage2_leaves_frozen_tensors_bitwise_unchanged(kind, tiny_data, tiny_stage1, tiny_bank):
    before = {k: v.copy() for k, v in tiny_stage1.tensors.items()}
    bank_before = {k: v.copy() for k, v in tiny_bank.vectors.items()}
    s2 = tr.train_meta(tiny_stage1, tiny_data["recent"], tiny_bank,
                       tr.TrainConfig(epochs_meta=2, metric_kind=kind, seed=0))
    for k, v in tiny_stage1.model_params().items():
        assert s2.tensors[k].tobytes() == v.tobytes()
    for k, v in before.items():
        assert tiny_stage1.tensors[k].tobytes() == v.tobytes()
    for (occ, cls), v in bank_before.items():
        assert s2.tensors[f"proto/{occ}/{cls}"].tobytes() == v.tobytes()
    assert s2.metadata["stage"] == "2" and s2.metadata["metric_kind"] == kind
    assert s2.metadata["stage1_id"] == tiny_stage1.checkpoint_id()
    p = tr.predict_meta(s2, tiny_data["valid"])
    assert p.shape == (len(tiny_data["valid"]),) and np.all((p > 0) & (p < 1))


def test_stage2_rejects_bank_from_other_checkpoint(tiny_data, tiny_stage1, tiny_bank):
    other = type(tiny_bank)(dict(tiny_bank.vectors), {"checkpoint_id": "deadbeef"})
    with pytest.raises(tr.ProvenanceError):
        tr.train_meta(tiny_stage1, tiny_data["recent"], other, tr.TrainConfig(epochs_meta=1))


def test_schema_mismatch_is_a_provenance_error(tiny_data, tiny_stage1, tiny_params):
    recent = tiny_data["recent"].subset(np.arange(len(tiny_data["recent"])))
    recent.schema_digest = schema_for(tiny_params, seq_len=7).digest()
    with pytest.raises(tr.ProvenanceError):
        tr.finetune_base(tiny_stage1, recent, tr.TrainConfig(epochs_finetune=1))


def test_epn_bias_calibrated_to_recent_rate(tiny_data, tiny_stage1, tiny_bank):
    s2 = tr.train_meta(tiny_stage1, tiny_data["recent"], tiny_bank, tr.TrainConfig(epochs_meta=0))
    from metacvr.frn import represent
    _, s_b = represent(tiny_data["recent"], tiny_stage1.model_params())
    idx, _ = tr._split_holdout(len(s_b), 0.05, tr.tc.rng_for(0, "stage2/holdout"))
    rate = tiny_data["recent"].purchase[idx].mean()
    assert float(s2.metadata["epn_bias_init"]) == pytest.approx(np.log(rate / (1 - rate)) - s_b[idx].mean(), rel=1e-6)
    np.testing.assert_array_equal(s2.tensors["epn/w"], [1, 0, 0, 0, 0])


def test_schema_round_trip(tmp_path, tiny_schema):
    (tmp_path / "s.json").write_text(json.dumps(tiny_schema.to_json()))
    assert FeatureSchema.load(tmp_path / "s.json").digest() == tiny_schema.digest()
