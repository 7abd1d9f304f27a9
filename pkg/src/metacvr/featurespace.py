"""Feature schema, record encoding and the shared embedding layer.

Raw records are the tab-separated click logs written by :mod:`metacvr.simgen`.
Categorical ids are kept as-is when they fall inside the vocabulary and map to
the reserved index 0 otherwise; index 0 is also the padding id of behavior
sequences.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc

OCCASIONS = ("BP", "DP", "AP", "NP")
OCC_INDEX = {o: i for i, o in enumerate(OCCASIONS)}

ITEM_FIELDS = ("item_id", "category_id", "brand_id")
CATEGORICAL_FIELDS = ("user_id",) + ITEM_FIELDS + ("position", "time_bucket")
DENSE_GROUPS = ("user", "item", "inter")
N_COLUMNS = 14


class RecordError(ValueError):
    def __init__(self, line_no: int, field_name: str, detail: str):
        self.line_no = line_no
        self.field = field_name
        super().__init__(f"line {line_no}: field '{field_name}': {detail}")


@dataclass(frozen=True)
class FeatureSchema:
    vocab: dict[str, int]
    dense: dict[str, int]
    seq_len: int = 30
    embed_dims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        missing = [f for f in CATEGORICAL_FIELDS if f not in self.vocab]
        if missing:
            raise ValueError(f"schema lacks vocabulary sizes for {missing}")
        dims = {f: (32 if f in ITEM_FIELDS else 8) for f in CATEGORICAL_FIELDS}
        dims.update(self.embed_dims)
        object.__setattr__(self, "embed_dims", dims)

    @property
    def seq_item_dim(self) -> int:
        return sum(self.embed_dims[f] for f in ITEM_FIELDS)

    @property
    def user_dim(self) -> int:
        return self.embed_dims["user_id"] + self.dense["user"]

    @property
    def item_dim(self) -> int:
        return self.seq_item_dim + self.dense["item"]

    @property
    def inter_dim(self) -> int:
        return self.dense["inter"]

    @property
    def context_dim(self) -> int:
        return self.embed_dims["position"] + self.embed_dims["time_bucket"]

    def to_json(self) -> dict:
        return {"vocab": dict(self.vocab), "dense": dict(self.dense), "seq_len": self.seq_len}

    def digest(self) -> str:
        blob = json.dumps({**self.to_json(), "embed_dims": self.embed_dims}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path: str | Path, seq_len: int | None = None) -> "FeatureSchema":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(vocab={k: int(v) for k, v in raw["vocab"].items()},
                   dense={k: int(v) for k, v in raw["dense"].items()},
                   seq_len=int(seq_len if seq_len is not None else raw.get("seq_len", 30)))


@dataclass
class EncodedSample:
    date: dt.date
    occasion: str
    user_id: int
    item_id: int
    category_id: int
    brand_id: int
    user_dense: np.ndarray
    item_dense: np.ndarray
    inter_dense: np.ndarray
    position: int
    time_bucket: int
    seq: np.ndarray          # (t, 3) item/category/brand ids, left-padded with 0
    seq_mask: np.ndarray     # (t,) bool
    click: int
    purchase: int


def _parse_dense(text: str, n: int, line_no: int, name: str) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise RecordError(line_no, name, f"non-numeric value in {text!r}") from None
    if len(vals) != n:
        raise RecordError(line_no, name, f"expected {n} values, got {len(vals)}")
    return np.asarray(vals, dtype=np.float32)


def _parse_int(text: str, line_no: int, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise RecordError(line_no, name, f"not an integer: {text!r}") from None


def _vocab_index(raw: int, size: int) -> int:
    return raw if 0 < raw < size else 0


def encode_record(raw: str, schema: FeatureSchema, line_no: int = 1) -> EncodedSample:
    """Parse one tab-separated log line into an :class:`EncodedSample`."""
    cols = raw.rstrip("\n").split("\t")
    if len(cols) != N_COLUMNS:
        raise RecordError(line_no, "<record>", f"expected {N_COLUMNS} columns, got {len(cols)}")
    try:
        date = dt.date.fromisoformat(cols[0])
    except ValueError:
        raise RecordError(line_no, "date", f"bad ISO date {cols[0]!r}") from None
    occ = cols[1]
    if occ not in OCC_INDEX:
        raise RecordError(line_no, "occasion", f"unknown occasion {occ!r}")
    v = schema.vocab
    ids = {name: _vocab_index(_parse_int(cols[k], line_no, name), v[name])
           for k, name in ((2, "user_id"), (3, "item_id"), (4, "category_id"), (5, "brand_id"),
                           (9, "position"), (10, "time_bucket"))}

    t = schema.seq_len
    events = [e for e in cols[11].split(",") if e] if cols[11] else []
    events = events[-t:]
    seq = np.zeros((t, 3), dtype=np.int64)
    mask = np.zeros(t, dtype=bool)
    offset = t - len(events)
    for j, ev in enumerate(events):
        parts = ev.split(":")
        if len(parts) != 3:
            raise RecordError(line_no, "behavior_seq", f"bad triple {ev!r}")
        for k, name in enumerate(ITEM_FIELDS):
            seq[offset + j, k] = _vocab_index(_parse_int(parts[k], line_no, "behavior_seq"), v[name])
        mask[offset + j] = True

    click = _parse_int(cols[12], line_no, "click")
    purchase = _parse_int(cols[13], line_no, "purchase")
    if click not in (0, 1) or purchase not in (0, 1):
        raise RecordError(line_no, "click" if click not in (0, 1) else "purchase", "label must be 0 or 1")
    if purchase and not click:
        raise RecordError(line_no, "purchase", "purchase without click")

    return EncodedSample(
        date=date, occasion=occ,
        user_id=ids["user_id"], item_id=ids["item_id"],
        category_id=ids["category_id"], brand_id=ids["brand_id"],
        user_dense=_parse_dense(cols[6], schema.dense["user"], line_no, "user_dense"),
        item_dense=_parse_dense(cols[7], schema.dense["item"], line_no, "item_dense"),
        inter_dense=_parse_dense(cols[8], schema.dense["inter"], line_no, "inter_dense"),
        position=ids["position"], time_bucket=ids["time_bucket"],
        seq=seq, seq_mask=mask, click=click, purchase=purchase,
    )


@dataclass
class Dataset:
    """Column-oriented batch of encoded samples."""

    date: np.ndarray            # datetime64[D]
    occasion: np.ndarray        # int codes in OCCASIONS order
    user_id: np.ndarray
    item_id: np.ndarray
    category_id: np.ndarray
    brand_id: np.ndarray
    user_dense: np.ndarray
    item_dense: np.ndarray
    inter_dense: np.ndarray
    position: np.ndarray
    time_bucket: np.ndarray
    seq: np.ndarray             # (n, t, 3)
    seq_mask: np.ndarray        # (n, t)
    click: np.ndarray
    purchase: np.ndarray
    schema_digest: str = ""

    def __len__(self) -> int:
        return len(self.purchase)

    @property
    def labels(self) -> np.ndarray:
        return self.purchase

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        kw = {name: getattr(self, name)[idx] for name in _ARRAY_FIELDS}
        return Dataset(**kw, schema_digest=self.schema_digest)

    def days(self) -> np.ndarray:
        return np.unique(self.date)

    @classmethod
    def from_samples(cls, samples: Sequence[EncodedSample], schema: FeatureSchema) -> "Dataset":
        n, t = len(samples), schema.seq_len
        d = schema.dense

        def col(name, dtype=np.int64):
            return np.asarray([getattr(s, name) for s in samples], dtype=dtype)

        def mat(name, width):
            if n == 0:
                return np.zeros((0, width), dtype=np.float32)
            return np.stack([getattr(s, name) for s in samples]).astype(np.float32).reshape(n, width)

        return cls(
            date=np.asarray([np.datetime64(s.date, "D") for s in samples], dtype="datetime64[D]"),
            occasion=np.asarray([OCC_INDEX[s.occasion] for s in samples], dtype=np.int64),
            user_id=col("user_id"), item_id=col("item_id"),
            category_id=col("category_id"), brand_id=col("brand_id"),
            user_dense=mat("user_dense", d["user"]), item_dense=mat("item_dense", d["item"]),
            inter_dense=mat("inter_dense", d["inter"]),
            position=col("position"), time_bucket=col("time_bucket"),
            seq=np.stack([s.seq for s in samples]) if n else np.zeros((0, t, 3), dtype=np.int64),
            seq_mask=np.stack([s.seq_mask for s in samples]) if n else np.zeros((0, t), dtype=bool),
            click=col("click"), purchase=col("purchase"),
            schema_digest=schema.digest(),
        )


_ARRAY_FIELDS = ("date", "occasion", "user_id", "item_id", "category_id", "brand_id",
                 "user_dense", "item_dense", "inter_dense", "position", "time_bucket",
                 "seq", "seq_mask", "click", "purchase")


def read_records(lines: Iterable[str], schema: FeatureSchema) -> Dataset:
    samples = [encode_record(line, schema, k) for k, line in enumerate(lines, start=1) if line.strip()]
    return Dataset.from_samples(samples, schema)


def load_dataset(path: str | Path, schema: FeatureSchema) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return read_records(fh, schema)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in _ARRAY_FIELDS}
    return Dataset(**kw, schema_digest=parts[0].schema_digest)


# -- embedding layer -------------------------------------------------------------

@dataclass
class EmbeddedGroups:
    e_u: tc.Node
    e_i: tc.Node
    e_ui: tc.Node
    e_c: tc.Node
    e_seq: tc.Node              # (B, L, d_i), rows zeroed where mask is False
    mask: np.ndarray            # (B, L) bool


def init_embeddings(schema: FeatureSchema, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {f"embed/{f}": tc.embedding_init(rng, schema.vocab[f], schema.embed_dims[f])
            for f in CATEGORICAL_FIELDS}


def fit_scaler(data: Dataset) -> dict[str, np.ndarray]:
    """Per-column mean/std of the dense groups, stored as ``norm/<group>/{mean,std}``."""
    out = {}
    for g in DENSE_GROUPS:
        x = getattr(data, f"{g}_dense").astype(np.float64)
        mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
        std = x.std(axis=0) if len(x) else np.ones(x.shape[1])
        std = np.where(std > 1e-6, std, 1.0)
        out[f"norm/{g}/mean"] = mean.astype(np.float32)
        out[f"norm/{g}/std"] = std.astype(np.float32)
    return out


def _standardize(x: np.ndarray, scaler: dict[str, np.ndarray], group: str, dtype) -> np.ndarray:
    return ((x - scaler[f"norm/{group}/mean"]) / scaler[f"norm/{group}/std"]).astype(dtype)


def _check_range(name: str, idx: np.ndarray, size: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise IndexError(f"{name}: index {int(idx.max())} out of range for vocabulary {size}")


def embed_batch(data: Dataset, tables: dict[str, tc.Node], scaler: dict[str, np.ndarray],
                trim: bool = True) -> EmbeddedGroups:
    """Look up every id group through the shared tables.

    The target item and the behavior-sequence items use the same item,
    category and brand tables. With ``trim`` the sequence axis is cut to the
    longest valid suffix in the batch; dropped columns are padding in every
    row, so downstream values do not change.
    """
    dtype = tables["embed/item_id"].value.dtype
    for f in CATEGORICAL_FIELDS:
        _check_range(f, getattr(data, f), tables[f"embed/{f}"].shape[0])
    for k, f in enumerate(ITEM_FIELDS):
        _check_range(f"behavior_seq.{f}", data.seq[..., k], tables[f"embed/{f}"].shape[0])

    seq, mask = data.seq, data.seq_mask
    if trim:
        longest = int(mask.sum(axis=1).max()) if len(mask) else 0
        keep = max(longest, 1)
        seq, mask = seq[:, -keep:], mask[:, -keep:]

    def look(f, idx):
        return tc.gather_rows(tables[f"embed/{f}"], idx)

    e_u = tc.concat([look("user_id", data.user_id),
                     tc.const(_standardize(data.user_dense, scaler, "user", dtype))], axis=-1)
    e_i = tc.concat([look(f, getattr(data, f)) for f in ITEM_FIELDS]
                    + [tc.const(_standardize(data.item_dense, scaler, "item", dtype))], axis=-1)
    e_ui = tc.const(_standardize(data.inter_dense, scaler, "inter", dtype))
    e_c = tc.concat([look("position", data.position), look("time_bucket", data.time_bucket)], axis=-1)
    e_seq = tc.concat([look(f, seq[..., k]) for k, f in enumerate(ITEM_FIELDS)], axis=-1)
    e_seq = tc.mul(e_seq, tc.const(mask[..., None].astype(dtype)))
    return EmbeddedGroups(e_u=e_u, e_i=e_i, e_ui=e_ui, e_c=e_c, e_seq=e_seq, mask=mask)


def embed_sample(sample: EncodedSample, tables: dict[str, tc.Node],
                 scaler: dict[str, np.ndarray], schema: FeatureSchema) -> EmbeddedGroups:
    return embed_batch(Dataset.from_samples([sample], schema), tables, scaler, trim=False)
