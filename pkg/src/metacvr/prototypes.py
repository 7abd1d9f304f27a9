"""Occasion support sets and class prototypes computed with a frozen FRN."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .featurespace import OCC_INDEX, OCCASIONS, Dataset
from .frn import represent

log = logging.getLogger(__name__)

CLASSES = ("pos", "neg")
SUPPORT_CAP = 50_000


class SupportSetError(ValueError):
    def __init__(self, occasion: str, detail: str):
        self.occasion = occasion
        super().__init__(f"occasion {occasion}: {detail}")


def _cls_key(cls: str) -> str:
    if cls in ("+", "pos"):
        return "pos"
    if cls in ("-", "neg"):
        return "neg"
    raise KeyError(cls)


@dataclass
class SupportSet:
    occasion: str
    cls: str
    samples: Dataset
    source_day: str          # ISO date, or "pooled" for the fallback
    full_size: int = 0       # size before the cap was applied

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class PrototypeBank:
    vectors: dict[tuple[str, str], np.ndarray]
    provenance: dict[str, str] = field(default_factory=dict)

    def get(self, occ: str, cls: str) -> np.ndarray:
        return self.vectors[(occ, _cls_key(cls))]

    def dim(self) -> int:
        return len(next(iter(self.vectors.values())))

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"proto/{occ}/{cls}": self.vectors[(occ, cls)] for occ in OCCASIONS for cls in CLASSES}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], provenance: dict[str, str] | None = None):
        vectors = {}
        for occ in OCCASIONS:
            for c in CLASSES:
                key = f"proto/{occ}/{c}"
                if key not in tensors:
                    raise KeyError(f"checkpoint has no prototype tensor {key}")
                vectors[(occ, c)] = tensors[key]
        return cls(vectors, dict(provenance or {}))


def _select_day(data: Dataset, occ: str) -> tuple[np.ndarray, str]:
    in_occ = (data.occasion == OCC_INDEX[occ]) & (data.click == 1)
    if not in_occ.any():
        raise SupportSetError(occ, "no clicked samples in the recent dataset")
    for day in sorted(np.unique(data.date[in_occ]), reverse=True):
        rows = in_occ & (data.date == day)
        n_pos = int(data.purchase[rows].sum())
        if 0 < n_pos < rows.sum():
            return rows, str(day)
    return in_occ, "pooled"


def _cap(idx: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def build_support_sets(recent: Dataset, cap: int = SUPPORT_CAP,
                       seed: int = 0) -> dict[tuple[str, str], SupportSet]:
    """Positive/negative support sets from the most recent qualifying day per occasion.

    A day qualifies when it has at least one purchase and one non-purchased
    click. Occasions without such a day pool all their recent samples.
    """
    out = {}
    for occ in OCCASIONS:
        rows, day = _select_day(recent, occ)
        if day == "pooled":
            log.warning("occasion %s has no day with both classes; pooling all its samples", occ)
        for cls, want in (("pos", 1), ("neg", 0)):
            idx = np.flatnonzero(rows & (recent.purchase == want))
            if len(idx) == 0:
                raise SupportSetError(occ, f"no {cls} samples even after pooling")
            kept = _cap(idx, cap, tc.rng_for(seed, f"support/{occ}/{cls}"))
            out[(occ, cls)] = SupportSet(occ, cls, recent.subset(kept), day, full_size=len(idx))
    return out


def prototype_from_features(features: np.ndarray) -> np.ndarray:
    """``normalize(mean(rows))``; an all-cancelling set gives the zero vector."""
    features = np.asarray(features)
    if len(features) == 0:
        raise ValueError("cannot build a prototype from an empty support set")
    mean = tc.mean_rows(tc.const(features), axis=0)
    out = tc.l2_normalize(mean).value
    if not np.any(out):
        log.warning("degenerate prototype: support-set mean is the zero vector")
    return out


def compute_prototype(support: SupportSet, params: dict[str, np.ndarray],
                      batch_size: int = 1024) -> np.ndarray:
    if len(support) == 0:
        raise SupportSetError(support.occasion, f"empty {support.cls} support set")
    feats, _ = represent(support.samples, params, batch_size)
    return prototype_from_features(feats)


def build_bank(recent: Dataset, params: dict[str, np.ndarray], cap: int = SUPPORT_CAP,
               seed: int = 0, checkpoint_id: str = "") -> PrototypeBank:
    sets = build_support_sets(recent, cap=cap, seed=seed)
    vectors, prov = {}, {"checkpoint_id": checkpoint_id, "support_cap": str(cap)}
    for (occ, cls), s in sets.items():
        vectors[(occ, cls)] = compute_prototype(s, params)
        prov[f"{occ}/{cls}/day"] = s.source_day
        prov[f"{occ}/{cls}/size"] = str(len(s))
        prov[f"{occ}/{cls}/full_size"] = str(s.full_size)
    return PrototypeBank(vectors, prov)


def bank_for_day(data: Dataset, params: dict[str, np.ndarray], day_picker) -> PrototypeBank:
    """Bank from one chosen day per occasion; ``day_picker(occ, days)`` returns the day."""
    vectors, prov = {}, {}
    for occ in OCCASIONS:
        in_occ = (data.occasion == OCC_INDEX[occ]) & (data.click == 1)
        days = [d for d in np.unique(data.date[in_occ])
                if 0 < data.purchase[in_occ & (data.date == d)].sum() < (in_occ & (data.date == d)).sum()]
        if not days:
            raise SupportSetError(occ, "no day with both classes")
        day = day_picker(occ, days)
        rows = in_occ & (data.date == day)
        for cls, want in (("pos", 1), ("neg", 0)):
            feats, _ = represent(data.subset(np.flatnonzero(rows & (data.purchase == want))), params)
            vectors[(occ, cls)] = prototype_from_features(feats)
        prov[f"{occ}/day"] = str(day)
    return PrototypeBank(vectors, prov)
