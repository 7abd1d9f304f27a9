import numpy as np
import pytest

from metacvr import tensorcore as tc
from metacvr.featurespace import (FeatureSchema, RecordError, embed_batch, encode_record,
                                  fit_scaler, init_embeddings, read_records)

from conftest import small_schema


def _line(seq="", user="3", item="7", purchase="0", click="1", occ="NP", date="2021-03-01"):
    return "\t".join([date, occ, user, item, "2", "1", "0.1,0.2", "1,2,3", "0.5,0.1", "2", "1",
                      seq, click, purchase])


def test_encode_basic_fields():
    s = encode_record(_line(seq="1:1:1,4:2:3"), small_schema())
    assert (s.user_id, s.item_id, s.category_id, s.brand_id) == (3, 7, 2, 1)
    assert s.occasion == "NP" and s.purchase == 0 and s.click == 1
    np.testing.assert_allclose(s.item_dense, [1, 2, 3])


def test_sequence_left_padded_oldest_first():
    s = encode_record(_line(seq="1:1:1,4:2:3"), small_schema(seq_len=4))
    np.testing.assert_array_equal(s.seq_mask, [False, False, True, True])
    np.testing.assert_array_equal(s.seq[2:], [[1, 1, 1], [4, 2, 3]])
    np.testing.assert_array_equal(s.seq[:2], 0)


def test_long_sequence_keeps_most_recent():
    seq = ",".join(f"{i}:1:1" for i in range(1, 8))
    s = encode_record(_line(seq=seq), small_schema(seq_len=3))
    np.testing.assert_array_equal(s.seq[:, 0], [5, 6, 7])
    assert s.seq_mask.all()


def test_out_of_vocabulary_maps_to_zero():
    s = encode_record(_line(user="999", item="-4", seq="500:1:1"), small_schema())
    assert s.user_id == 0 and s.item_id == 0
    assert s.seq[-1, 0] == 0 and s.seq_mask[-1]


def test_empty_sequence_all_masked():
    s = encode_record(_line(seq=""), small_schema())
    assert not s.seq_mask.any()


@pytest.mark.parametrize("line, field", [
    (_line(purchase="1", click="0"), "purchase"),
    (_line(occ="XX"), "occasion"),
    (_line(date="2021-13-01"), "date"),
    (_line(seq="1:2"), "behavior_seq"),
    (_line(user="abc"), "user_id"),
    ("a\tb", "<record>"),
])
def test_bad_records_name_line_and_field(line, field):
    with pytest.raises(RecordError) as err:
        encode_record(line, small_schema(), line_no=17)
    assert err.value.line_no == 17 and err.value.field == field
    assert "line 17" in str(err.value)


def test_dense_width_checked():
    bad = _line().replace("1,2,3", "1,2")
    with pytest.raises(RecordError) as err:
        encode_record(bad, small_schema())
    assert err.value.field == "item_dense"


def test_schema_digest_changes_with_seq_len():
    assert small_schema(4).digest() != small_schema(5).digest()


def test_schema_requires_all_vocabularies():
    with pytest.raises(ValueError):
        FeatureSchema(vocab={"user_id": 3}, dense={"user": 1, "item": 1, "inter": 1})


def test_embedding_dims():
    sc = small_schema()
    assert sc.seq_item_dim == 96
    assert sc.user_dim == 8 + 2 and sc.context_dim == 16


def _batch():
    sc = small_schema(seq_len=4)
    lines = [_line(seq="1:1:1,4:2:3", item="4"), _line(seq="4:2:3", user="5", purchase="1")]
    data = read_records(lines, sc)
    params = init_embeddings(sc, np.random.default_rng(0))
    params.update(fit_scaler(data))
    return sc, data, params


def test_shared_embedding_accumulates_target_and_sequence_grads():
    sc, data, params = _batch()
    P = tc.parameters(params, [k for k in params if k.startswith("embed/")])
    g = embed_batch(data, P, params)
    loss = tc.add(tc.sum_(g.e_i), tc.sum_(g.e_seq))
    tc.backward(loss)
    grad = P["embed/item_id"].grad
    # item 4 appears as a target once and in both sequences
    np.testing.assert_allclose(grad[4], 3.0)
    np.testing.assert_allclose(grad[1], 1.0)


def test_masked_sequence_rows_are_zero():
    sc, data, params = _batch()
    g = embed_batch(data, tc.parameters(params), params, trim=False)
    assert np.all(g.e_seq.value[~g.mask] == 0)


def test_trim_keeps_longest_valid_suffix():
    sc, data, params = _batch()
    g = embed_batch(data, tc.parameters(params), params, trim=True)
    assert g.e_seq.shape[1] == 2


def test_embedding_index_range_checked():
    sc, data, params = _batch()
    data.item_id[0] = 999
    with pytest.raises(IndexError):
        embed_batch(data, tc.parameters(params), params)


def test_scaler_standardizes_training_columns(tiny_data):
    scaler = fit_scaler(tiny_data["train"])
    x = (tiny_data["train"].user_dense - scaler["norm/user/mean"]) / scaler["norm/user/std"]
    np.testing.assert_allclose(x.mean(axis=0), 0, atol=1e-4)
    np.testing.assert_allclose(x.std(axis=0), 1, atol=1e-3)
