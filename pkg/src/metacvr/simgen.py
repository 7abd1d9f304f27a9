"""Synthetic click/purchase logs with a promotion calendar.

Users and items belong to latent clusters. Conversion probability is
``sigmoid(intercept + affinity + occasion boost + trend + user/item/position terms)``.
The per-cluster trend vector rotates week over week, so a model fit on the
whole window is stale by the end of it, and each occasion shifts both which
item clusters get clicked and which ones convert.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .featurespace import OCCASIONS, FeatureSchema

N_LATENT = 4
N_POSITIONS = 10
N_TIME_BUCKETS = 6
SUBCATEGORIES = 5

# conversion boosts per occasion over item clusters, scaled by SimParams.occasion_boost;
# cluster c uses column c % 8
_BOOST = {
    "BP": [0.0, 0.0, -0.4, -0.4, 1.2, 1.2, 0.0, 0.0],
    "DP": [0.3, 0.3, 1.8, 1.8, 0.3, 0.3, 0.3, 0.3],
    "AP": [-0.2, -0.2, -0.2, -0.2, 0.0, 0.0, 1.2, 1.2],
    "NP": [0.0] * 8,
}
# click mix per occasion over item clusters before normalisation
_CLICK_MIX = {
    "BP": [1, 1, 2, 2, 4, 4, 1, 1],
    "DP": [1, 1, 6, 6, 1, 1, 1, 1],
    "AP": [1, 1, 1, 1, 1, 1, 4, 4],
    "NP": [1] * 8,
}


@dataclass(frozen=True)
class OccasionCalendar:
    start: dt.date
    n_days: int
    promotion_days: tuple[int, ...]
    bp_window: int = 3
    ap_window: int = 3
    tags: tuple[str, ...] = field(default=(), compare=False)

    def date(self, day: int) -> dt.date:
        return self.start + dt.timedelta(days=day)

    def tag(self, day: int) -> str:
        return self.tags[day]

    def n_promotions(self) -> int:
        """Number of contiguous runs of promotion days."""
        days = sorted(self.promotion_days)
        return sum(1 for k, d in enumerate(days) if k == 0 or d != days[k - 1] + 1)

    def to_json(self) -> dict:
        return {"start": self.start.isoformat(), "n_days": self.n_days,
                "promotion_days": list(self.promotion_days), "bp_window": self.bp_window,
                "ap_window": self.ap_window,
                "days": [{"date": self.date(d).isoformat(), "occasion": self.tags[d]}
                         for d in range(self.n_days)]}


@dataclass
class SimParams:
    n_users: int = 800
    n_items: int = 400
    n_clusters: int = 8
    n_brands: int = 100
    clicks_per_day: int = 2000
    dp_traffic: float = 1.5
    base_cvr: float = 0.01
    occasion_boost: float = 1.0
    drift_rate: float = 0.3           # radians of cluster-offset rotation per week
    drift_scale: float = 1.5
    affinity_scale: float = 0.6
    start_date: str = "2021-01-15"
    n_days: int = 75
    train_days: int = 60
    recent_days: int = 15
    promo_period: int = 12
    promo_offset: int = 6
    promo_length: int = 2
    promo_days: tuple[int, ...] | None = None
    bp_window: int = 3
    ap_window: int = 3
    max_history: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.base_cvr < 1:
            raise ValueError("base_cvr must be in (0, 1)")
        if self.bp_window < 0 or self.ap_window < 0:
            raise ValueError("occasion windows must be >= 0")
        if not 0 < self.recent_days <= self.train_days < self.n_days:
            raise ValueError("need 0 < recent_days <= train_days < n_days")

    def cluster_weights(self) -> dict[str, np.ndarray]:
        """Per-occasion click mix over item clusters (each sums to 1)."""
        k, s = self.n_clusters, min(self.occasion_boost, 1.0)
        out = {}
        for occ in OCCASIONS:
            raw = np.array([_CLICK_MIX[occ][c % 8] for c in range(k)], dtype=np.float64)
            w = (1 - s) * np.full(k, 1.0 / k) + s * raw / raw.sum()
            out[occ] = w / w.sum()
        return out


def generate_calendar(params: SimParams) -> OccasionCalendar:
    """Tag every day; priority DP > BP > AP > NP where windows overlap."""
    n = params.n_days
    if params.promo_days is not None:
        promos = sorted(set(params.promo_days))
    elif params.promo_period > 0:
        promos = [d + j for d in range(params.promo_offset, n, params.promo_period)
                  for j in range(params.promo_length)]
    else:
        promos = []
    bad = [d for d in promos if not 0 <= d < n]
    if params.promo_days is not None and bad:
        raise ValueError(f"promotion days outside the {n}-day range: {bad}")
    promos = [d for d in promos if 0 <= d < n]

    tags = ["NP"] * n
    promo_set = set(promos)
    for d in promos:
        for w in range(1, params.ap_window + 1):
            if d + w < n and d + w not in promo_set:
                tags[d + w] = "AP"
    for d in promos:
        for w in range(1, params.bp_window + 1):
            if d - w >= 0 and d - w not in promo_set:
                tags[d - w] = "BP"
    for d in promos:
        tags[d] = "DP"
    return OccasionCalendar(start=dt.date.fromisoformat(params.start_date), n_days=n,
                            promotion_days=tuple(promos), bp_window=params.bp_window,
                            ap_window=params.ap_window, tags=tuple(tags))


@dataclass
class _World:
    user_latent: np.ndarray
    user_pref: np.ndarray
    user_bias: np.ndarray
    user_activity: np.ndarray
    item_cluster: np.ndarray
    item_latent: np.ndarray
    item_quality: np.ndarray
    item_pop: np.ndarray
    item_category: np.ndarray
    item_brand: np.ndarray
    drift_basis: np.ndarray
    user_dense: np.ndarray
    item_dense: np.ndarray


def _build_world(p: SimParams, rng: np.random.Generator) -> _World:
    k = p.n_clusters
    centers = rng.normal(size=(k, N_LATENT))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    home = rng.integers(0, k, size=p.n_users)
    pref = rng.dirichlet(np.full(k, 0.3), size=p.n_users)
    pref = 0.5 * pref + 0.5 * np.eye(k)[home]
    user_latent = centers[home] + 0.4 * rng.normal(size=(p.n_users, N_LATENT))
    user_bias = 0.4 * rng.normal(size=p.n_users)
    activity = rng.lognormal(0.0, 0.8, size=p.n_users)

    item_cluster = rng.integers(0, k, size=p.n_items)
    item_latent = centers[item_cluster] + 0.4 * rng.normal(size=(p.n_items, N_LATENT))
    quality = 0.4 * rng.normal(size=p.n_items)
    pop = rng.lognormal(0.0, 0.7, size=p.n_items)
    category = 1 + item_cluster * SUBCATEGORIES + rng.integers(0, SUBCATEGORIES, size=p.n_items)
    brand = rng.integers(1, p.n_brands + 1, size=p.n_items)
    # two orthonormal zero-mean directions over clusters
    raw = rng.normal(size=(k, 2))
    raw -= raw.mean(axis=0)
    basis = np.linalg.qr(raw)[0].T * np.sqrt(k)

    user_dense = np.column_stack([user_latent + 0.3 * rng.normal(size=user_latent.shape),
                                  user_bias + 0.2 * rng.normal(size=p.n_users),
                                  np.log(activity)])
    item_dense = np.column_stack([item_latent + 0.3 * rng.normal(size=item_latent.shape),
                                  quality + 0.2 * rng.normal(size=p.n_items),
                                  np.log(pop)])
    return _World(user_latent, pref, user_bias, activity, item_cluster, item_latent, quality, pop,
                  category, brand, basis, user_dense, item_dense)


def cluster_trend(p: SimParams, w: _World, day: int) -> np.ndarray:
    """Per-cluster conversion offset; the offset vector rotates ``drift_rate`` rad/week."""
    angle = p.drift_rate * day / 7.0
    return p.drift_scale * (np.cos(angle) * w.drift_basis[0] + np.sin(angle) * w.drift_basis[1])


def _logit_parts(p: SimParams, w: _World, users, items, day: int, occ: str, position) -> np.ndarray:
    affinity = p.affinity_scale * np.einsum("nd,nd->n", w.user_latent[users], w.item_latent[items])
    clusters = w.item_cluster[items]
    boost = p.occasion_boost * np.asarray(_BOOST[occ])[clusters % 8]
    trend = cluster_trend(p, w, day)[clusters]
    return affinity + boost + trend + w.user_bias[users] + w.item_quality[items] - 0.05 * position


def _calibrate_intercept(p: SimParams, w: _World, cal: OccasionCalendar, rng) -> float:
    """Intercept giving the target mean conversion rate over the calendar's click mix."""
    mix = p.cluster_weights()
    parts = []
    for day in range(0, p.n_days, max(1, p.n_days // 25)):
        users, items, pos, _ = _sample_clicks(p, w, 400, cal.tag(day), mix, rng)
        parts.append(_logit_parts(p, w, users, items, day, cal.tag(day), pos))
    z = np.concatenate(parts)
    lo, hi = -20.0, 20.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if (1 / (1 + np.exp(-(z + mid)))).mean() > p.base_cvr:
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2


def _sample_clicks(p: SimParams, w: _World, n: int, occ: str, mix, rng):
    users = rng.choice(p.n_users, size=n, p=w.user_activity / w.user_activity.sum())
    occ_mix = mix[occ]
    cluster_p = 0.5 * w.user_pref[users] + 0.5 * occ_mix
    u = rng.random(n)[:, None]
    clusters = (u > np.cumsum(cluster_p, axis=1)).sum(axis=1).clip(0, p.n_clusters - 1)
    items = np.empty(n, dtype=np.int64)
    for c in np.unique(clusters):
        members = np.flatnonzero(w.item_cluster == c)
        sel = clusters == c
        pop = w.item_pop[members]
        items[sel] = rng.choice(members, size=sel.sum(), p=pop / pop.sum())
    position = rng.integers(1, N_POSITIONS + 1, size=n)
    bucket = rng.integers(1, N_TIME_BUCKETS + 1, size=n)
    return users, items, position, bucket


def _fmt(values) -> str:
    return ",".join(f"{v:.4f}" for v in values)


def generate_logs(calendar: OccasionCalendar, params: SimParams, seed: int | None = None) -> list[str]:
    """Generate every click record (one TSV line each) over the calendar, in time order."""
    seed = params.seed if seed is None else seed
    world = _build_world(params, tc.rng_for(seed, "sim/world"))
    intercept = _calibrate_intercept(params, world, calendar, tc.rng_for(seed, "sim/calibrate"))
    mix = params.cluster_weights()
    history: dict[int, list[str]] = {}
    cat_counts: dict[tuple[int, int], int] = {}
    last_day: dict[int, int] = {}
    lines = []
    for day in range(calendar.n_days):
        occ = calendar.tag(day)
        rng = tc.rng_for(seed, f"sim/day/{day}")
        n = int(round(params.clicks_per_day * (params.dp_traffic if occ == "DP" else 1.0)))
        users, items, position, bucket = _sample_clicks(params, world, n, occ, mix, rng)
        order = np.lexsort((rng.random(n), bucket))
        users, items, position, bucket = users[order], items[order], position[order], bucket[order]
        z = intercept + _logit_parts(params, world, users, items, day, occ, position)
        purchase = rng.random(n) < 1 / (1 + np.exp(-z))
        date = calendar.date(day).isoformat()
        for j in range(n):
            u, i = int(users[j]), int(items[j])
            cat = int(world.item_category[i])
            seen = cat_counts.get((u, cat), 0)
            gap = day - last_day[u] if u in last_day else 30
            inter = (np.log1p(seen), np.log1p(min(gap, 30)))
            past = history.setdefault(u, [])
            lines.append("\t".join((
                date, occ, str(u + 1), str(i + 1), str(cat), str(int(world.item_brand[i])),
                _fmt(world.user_dense[u]), _fmt(world.item_dense[i]), _fmt(inter),
                str(int(position[j])), str(int(bucket[j])), ",".join(past),
                "1", "1" if purchase[j] else "0",
            )))
            past.append(f"{i + 1}:{cat}:{int(world.item_brand[i])}")
            if len(past) > params.max_history:
                del past[0]
            cat_counts[(u, cat)] = seen + 1
            last_day[u] = day
    return lines


def schema_for(params: SimParams, seq_len: int = 30) -> FeatureSchema:
    return FeatureSchema(
        vocab={"user_id": params.n_users + 1, "item_id": params.n_items + 1,
               "category_id": params.n_clusters * SUBCATEGORIES + 1,
               "brand_id": params.n_brands + 1, "position": N_POSITIONS + 1,
               "time_bucket": N_TIME_BUCKETS + 1},
        dense={"user": N_LATENT + 2, "item": N_LATENT + 2, "inter": 2},
        seq_len=seq_len,
    )


def split_lines(lines: list[str], calendar: OccasionCalendar, params: SimParams) -> dict[str, list[str]]:
    """D = first ``train_days``; D_r = last ``recent_days`` of D; D_v = the rest."""
    first_valid = calendar.date(params.train_days).isoformat()
    first_recent = calendar.date(params.train_days - params.recent_days).isoformat()
    train = [ln for ln in lines if ln[:10] < first_valid]
    return {"train": train,
            "recent": [ln for ln in train if ln[:10] >= first_recent],
            "valid": [ln for ln in lines if ln[:10] >= first_valid]}


def write_dataset(out_dir: str | Path, params: SimParams, seed: int | None = None,
                  seq_len: int = 30) -> dict[str, Path]:
    """Write ``train.tsv``, ``recent.tsv``, ``valid.tsv``, ``schema.json`` and ``calendar.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = params.seed if seed is None else seed
    calendar = generate_calendar(params)
    splits = split_lines(generate_logs(calendar, params, seed), calendar, params)
    paths = {}
    for name, rows in splits.items():
        path = out / f"{name}.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(row + "\n" for row in rows)
        paths[name] = path
    schema = {**schema_for(params, seq_len).to_json(), "sim_params": _params_json(params), "seed": seed}
    paths["schema"] = out / "schema.json"
    paths["schema"].write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["calendar"] = out / "calendar.json"
    paths["calendar"].write_text(json.dumps(calendar.to_json(), indent=1) + "\n", encoding="utf-8")
    return paths


def _params_json(params: SimParams) -> dict:
    d = asdict(params)
    if d["promo_days"] is not None:
        d["promo_days"] = list(d["promo_days"])
    return d
