"""End-to-end experiment helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalreport as ev
from .featurespace import OCC_INDEX, OCCASIONS, Dataset, FeatureSchema, load_dataset
from .metric_ensemble import MetricKind
from .prototypes import bank_for_day, build_bank
from .simgen import SimParams, write_dataset
from .trainer import (ModelCheckpoint, TrainConfig, finetune_base, predict_base, predict_meta,
                      train_base, train_meta)

log = logging.getLogger(__name__)

SPLITS = ("train", "recent", "valid")


@dataclass
class Splits:
    schema: FeatureSchema
    train: Dataset
    recent: Dataset
    valid: Dataset


def load_splits(data_dir: str | Path, names=SPLITS) -> Splits:
    d = Path(data_dir)
    schema = FeatureSchema.load(d / "schema.json")
    parts = {n: load_dataset(d / f"{n}.tsv", schema) for n in names}
    empty = Dataset.from_samples([], schema)
    return Splits(schema, *(parts.get(n, empty) for n in SPLITS))


def score(ckpt: ModelCheckpoint, data: Dataset) -> np.ndarray:
    """Predicted conversion probabilities from a stage-1, BASE-F or stage-2 checkpoint."""
    if ckpt.metadata.get("stage") == "2":
        return predict_meta(ckpt, data)
    return predict_base(ckpt, data)


def evaluate(ckpt: ModelCheckpoint, data: Dataset, dataset_name: str = "D_v") -> ev.EvalReport:
    scores = score(ckpt, data)
    counts = {"n": len(data), "pos": int(data.purchase.sum())}
    for occ in OCCASIONS:
        counts[f"n_{occ.lower()}"] = int((data.occasion == OCC_INDEX[occ]).sum())
    seed = int(ckpt.metadata.get("seed", 0))
    return ev.EvalReport(model=ckpt.metadata.get("model", "?"), dataset=dataset_name,
                         metric_kind=ckpt.metadata.get("metric_kind", "-"), seeds=[seed],
                         aucs=[ev.auc(scores, data.purchase)],
                         per_occasion=[ev.auc_by_occasion(scores, data.purchase, data.occasion)],
                         counts=counts)


def similarity_banks(stage1: ModelCheckpoint, older: Dataset, newer: Dataset):
    """Banks from the latest qualifying day per occasion in two date-disjoint datasets."""
    params = stage1.model_params()
    bank_a = bank_for_day(older, params, lambda occ, days: max(days))
    bank_b = bank_for_day(newer, params, lambda occ, days: max(days))
    return ev.prototype_similarity(bank_a, bank_b)


@dataclass
class SeedResult:
    seed: int
    aucs: dict[str, float]
    seconds: float
    checkpoints: dict[str, ModelCheckpoint] = field(default_factory=dict, repr=False)


def run_seed(splits: Splits, cfg: TrainConfig, kinds=tuple(MetricKind),
             support_cap: int = 50_000, keep_checkpoints: bool = False) -> SeedResult:
    """BASE, BASE-F and one MetaCVR model per metric kind, all scored on the validation split."""
    t0 = time.time()
    stage1 = train_base(splits.train, splits.schema, cfg)
    out = {"BASE": stage1, "BASE-F": finetune_base(stage1, splits.recent, cfg)}
    bank = build_bank(splits.recent, stage1.model_params(), cap=support_cap, seed=cfg.seed,
                      checkpoint_id=stage1.checkpoint_id())
    for kind in kinds:
        kind = MetricKind(kind)
        out[f"MetaCVR-{kind.value}"] = train_meta(stage1, splits.recent, bank,
                                                  TrainConfig(**{**cfg.__dict__, "metric_kind": kind.value}))
    aucs = {name: ev.auc(score(c, splits.valid), splits.valid.purchase) for name, c in out.items()}
    log.info("seed %d: %s", cfg.seed, {k: round(v, 4) for k, v in aucs.items()})
    return SeedResult(cfg.seed, aucs, time.time() - t0, out if keep_checkpoints else {})


def simulate_and_run(out_dir: str | Path, params: SimParams, cfg: TrainConfig, seq_len: int,
                     kinds=tuple(MetricKind)) -> SeedResult:
    write_dataset(out_dir, params, seed=params.seed, seq_len=seq_len)
    return run_seed(load_splits(out_dir), cfg, kinds)
