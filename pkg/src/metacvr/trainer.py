"""Two-stage training, the fine-tuned baseline, and the binary checkpoint format.

Stage 1 fits embeddings, FRN and the base head on the long training window.
Stage 2 freezes all of them, computes representations once, and fits only the
distance-metric and ensemble parameters on the recent window.
"""
from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .featurespace import Dataset, FeatureSchema, embed_batch, fit_scaler, init_embeddings
from .frn import (base_head, frn_forward, init_frn_params, init_head_params, represent,
                  wrap_frozen)
from .metric_ensemble import (MetricKind, epn_forward, init_dmn_params, init_epn_params,
                              occasion_scores)
from .prototypes import PrototypeBank

log = logging.getLogger(__name__)

MAGIC = b"MCVR"
FORMAT_VERSION = 1
FROZEN_PREFIXES = ("frn/", "embed/", "fb/", "norm/")


# -- checkpoint ------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ProvenanceError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def section(self, *prefixes: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefixes)}

    def model_params(self) -> dict[str, np.ndarray]:
        return self.section(*FROZEN_PREFIXES)

    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f4", order="C")
            h.update(name.encode())
            h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


def dumps_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    lines = []
    for key in sorted(ckpt.metadata):
        value = str(ckpt.metadata[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    meta = "\n".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> ModelCheckpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedCheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError("bad magic: not a MCVR checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta_text = bytes(take(meta_len, "metadata")).decode("utf-8")
    metadata = dict(line.split("=", 1) for line in meta_text.split("\n") if line)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(bytes(take(4 * n, f"{name} values")), dtype="<f4")
        tensors[name] = data.astype(np.float32).reshape(dims)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return ModelCheckpoint(tensors, metadata, version)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    return loads_checkpoint(Path(path).read_bytes())


# -- training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 0.01
    epochs_base: int = 5
    epochs_meta: int = 10
    epochs_finetune: int = 10
    finetune_lr_scale: float = 0.1
    patience: int = 2
    val_fraction: float = 0.05
    seed: int = 0
    metric_kind: str = "spdm"
    calibrate_epn: bool = True
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        MetricKind(self.metric_kind)


def _split_holdout(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * fraction))
    if n_val == 0 or n_val >= n:
        return np.arange(n), np.arange(0)
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _require_both_classes(data: Dataset, what: str) -> None:
    pos = int(data.purchase.sum())
    if len(data) == 0 or pos == 0 or pos == len(data):
        raise ValueError(f"{what} must contain both converted and non-converted clicks")


def _fit_loop(train_step, eval_loss, params: dict[str, np.ndarray], names, n_train: int,
              epochs: int, cfg: TrainConfig, lr: float, rng: np.random.Generator):
    """Shared epoch loop with early stopping; returns (best, final, history)."""
    state = tc.AdagradState(learning_rate=lr, epsilon=cfg.adagrad_epsilon)
    best = {k: params[k].copy() for k in names}
    best_val = eval_loss() if epochs > 0 else float("nan")
    history, stale = [], 0
    for epoch in range(epochs):
        losses = []
        for idx in _batches(n_train, cfg.batch_size, rng):
            loss, grads = train_step(idx)
            tc.adagrad_step({k: params[k] for k in grads}, grads, state)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / max(n_train, 1))
        val = eval_loss()
        improved = val < best_val or np.isnan(best_val)
        if improved:
            best_val, stale = val, 0
            best = {k: params[k].copy() for k in names}
        else:
            stale += 1
        history.append((epoch, train_loss, val, best_val))
        log.info("epoch %d train %.5f val %.5f best %.5f", epoch, train_loss, val, best_val)
        if cfg.val_fraction > 0 and stale >= cfg.patience:
            break
    final = {k: params[k].copy() for k in names}
    return best, final, history


def _history_meta(history) -> dict[str, str]:
    out = {"epochs_run": str(len(history))}
    for epoch, tr, va, bv in history:
        out[f"history.{epoch:03d}"] = f"{tr:.6f},{va:.6f},{bv:.6f}"
    return out


def _base_training(params: dict[str, np.ndarray], data: Dataset, cfg: TrainConfig,
                   epochs: int, lr: float, tag: str):
    rng = tc.rng_for(cfg.seed, f"{tag}/shuffle")
    train_idx, val_idx = _split_holdout(len(data), cfg.val_fraction, tc.rng_for(cfg.seed, f"{tag}/holdout"))
    train, val = data.subset(train_idx), data.subset(val_idx)
    trainable = [k for k in params if k.startswith(("frn/", "embed/", "fb/"))]

    def step(idx):
        batch = train.subset(idx)
        P = {k: tc.const(v) for k, v in params.items()}
        P.update(tc.parameters(params, trainable))
        prob = base_head(frn_forward(embed_batch(batch, P, params), P), P)
        loss = tc.logloss(prob, batch.purchase)
        tc.backward(loss)
        return float(loss.value), tc.collect_grads({k: P[k] for k in trainable})

    def eval_loss():
        if len(val) == 0:
            return float("nan")
        _, probs = represent(val, params)
        return tc.logloss_value(probs, val.purchase)

    return _fit_loop(step, eval_loss, params, trainable, len(train), epochs, cfg, lr, rng)


def init_base_params(schema: FeatureSchema, seed: int) -> dict[str, np.ndarray]:
    params = init_embeddings(schema, tc.rng_for(seed, "init/embed"))
    params.update(init_frn_params(schema, tc.rng_for(seed, "init/frn")))
    params.update(init_head_params(tc.rng_for(seed, "init/head")))
    return params


def train_base(data: Dataset, schema: FeatureSchema, cfg: TrainConfig) -> ModelCheckpoint:
    """Stage 1: base CVR model on the full training window."""
    _require_both_classes(data, "training data")
    params = init_base_params(schema, cfg.seed)
    params.update(fit_scaler(data))
    # start the head at the prior log-odds instead of 0.5
    rate = float(data.purchase.mean())
    params["fb/b2"][:] = np.log(rate / (1 - rate))
    best, final, history = _base_training(params, data, cfg, cfg.epochs_base, cfg.learning_rate, "stage1")
    tensors = {k: v for k, v in params.items() if k.startswith("norm/")}
    tensors.update(best)
    tensors.update({f"final/{k}": v for k, v in final.items()})
    meta = {"stage": "1", "model": "BASE", "seed": str(cfg.seed), "schema": schema.digest(),
            "params": "best-validation", "lr": repr(cfg.learning_rate), **_history_meta(history)}
    return ModelCheckpoint(tensors, meta)


def _check_schema(stage1: ModelCheckpoint, data: Dataset) -> None:
    expected = stage1.metadata.get("schema")
    if expected and data.schema_digest and expected != data.schema_digest:
        raise ProvenanceError(f"schema mismatch: checkpoint {expected}, data {data.schema_digest}")


def finetune_base(stage1: ModelCheckpoint, recent: Dataset, cfg: TrainConfig) -> ModelCheckpoint:
    """BASE-F: continue training every base parameter on recent data at a reduced rate."""
    _check_schema(stage1, recent)
    params = {k: v.copy() for k, v in stage1.model_params().items()}
    lr = cfg.learning_rate * cfg.finetune_lr_scale
    if cfg.epochs_finetune > 0:
        _require_both_classes(recent, "recent data")
    best, _, history = _base_training(params, recent, cfg, cfg.epochs_finetune, lr, "finetune")
    tensors = {k: v for k, v in params.items() if k.startswith("norm/")}
    tensors.update(best)
    meta = {**{k: v for k, v in stage1.metadata.items() if not k.startswith(("history.", "epochs_run"))},
            "model": "BASE-F", "parent": stage1.checkpoint_id(), "lr": repr(lr), **_history_meta(history)}
    return ModelCheckpoint(tensors, meta)


def predict_base(ckpt: ModelCheckpoint, data: Dataset) -> np.ndarray:
    return represent(data, ckpt.model_params())[1]


def _meta_graph(P, reps, s_b, bank, kind):
    F = tc.const(reps)
    return epn_forward(tc.const(s_b), occasion_scores(F, bank, P, kind), P)


def train_meta(stage1: ModelCheckpoint, recent: Dataset, bank: PrototypeBank,
               cfg: TrainConfig) -> ModelCheckpoint:
    """Stage 2: fit distance metrics and the ensemble head with FRN and f_b frozen."""
    stage1_id = stage1.checkpoint_id()
    if bank.provenance.get("checkpoint_id") != stage1_id:
        raise ProvenanceError(
            f"prototype bank was built from checkpoint {bank.provenance.get('checkpoint_id')!r}, "
            f"not {stage1_id!r}")
    _check_schema(stage1, recent)
    kind = MetricKind(cfg.metric_kind)
    frozen = stage1.model_params()
    reps, s_b = represent(recent, frozen)

    train_idx, val_idx = _split_holdout(len(recent), cfg.val_fraction, tc.rng_for(cfg.seed, "stage2/holdout"))
    y = recent.purchase
    bias = 0.0
    if cfg.calibrate_epn and len(train_idx):
        rate = float(np.clip(y[train_idx].mean(), 1e-4, 1 - 1e-4))
        bias = float(np.log(rate / (1 - rate)) - s_b[train_idx].mean())
    params = init_dmn_params(kind, reps.shape[1], tc.rng_for(cfg.seed, "init/dmn"))
    params.update(init_epn_params(bias))
    names = list(params)

    def step(idx):
        rows = train_idx[idx]
        P = tc.parameters(params, names)
        loss = tc.logloss(_meta_graph(P, reps[rows], s_b[rows], bank, kind), y[rows])
        tc.backward(loss)
        return float(loss.value), tc.collect_grads(P)

    def eval_loss():
        if len(val_idx) == 0:
            return float("nan")
        P = wrap_frozen(params)
        return tc.logloss_value(_meta_graph(P, reps[val_idx], s_b[val_idx], bank, kind).value, y[val_idx])

    if cfg.epochs_meta > 0:
        _require_both_classes(recent, "recent data")
    best, _, history = _fit_loop(step, eval_loss, params, names, len(train_idx), cfg.epochs_meta,
                                 cfg, cfg.learning_rate, tc.rng_for(cfg.seed, "stage2/shuffle"))
    tensors = dict(frozen)
    tensors.update(bank.to_tensors())
    tensors.update(best)
    meta = {"stage": "2", "model": "MetaCVR", "metric_kind": kind.value, "seed": str(cfg.seed),
            "schema": stage1.metadata.get("schema", ""), "stage1_id": stage1_id,
            "stage1_params": stage1.metadata.get("params", "best-validation"),
            "epn_bias_init": repr(bias), **_history_meta(history)}
    meta.update({f"proto.{k}": v for k, v in bank.provenance.items()})
    return ModelCheckpoint(tensors, meta)


def predict_meta(ckpt: ModelCheckpoint, data: Dataset) -> np.ndarray:
    kind = MetricKind(ckpt.metadata["metric_kind"])
    bank = PrototypeBank.from_tensors(ckpt.section("proto/"))
    reps, s_b = represent(data, ckpt.model_params())
    P = wrap_frozen(ckpt.section("dmn/", "epn/"))
    return _meta_graph(P, reps, s_b, bank, kind).value
