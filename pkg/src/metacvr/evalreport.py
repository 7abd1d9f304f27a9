"""AUC, prototype-similarity analysis and experiment reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurespace import OCCASIONS

CSV_COLUMNS = ("model", "dataset", "metric_kind", "seed", "auc", "auc_bp", "auc_dp", "auc_ap", "auc_np")


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be 1-D of equal length, got {scores.shape} and {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("AUC needs both positive and negative labels")
    return scores, labels.astype(bool)


def auc(scores, labels) -> float:
    """Rank-sum AUC with ties credited one half (average ranks)."""
    scores, pos = _check_binary(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # average 1-based rank of each tie group
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_scores)) + 1]
    ends = np.r_[starts[1:], len(scores)]
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    n_pos = pos.sum()
    n_neg = len(pos) - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(P*N) reference: fraction of positive/negative pairs ordered correctly."""
    scores, pos = _check_binary(scores, labels)
    wins = 0.0
    for s_pos in scores[pos]:
        for s_neg in scores[~pos]:
            if s_pos > s_neg:
                wins += 1.0
            elif s_pos == s_neg:
                wins += 0.5
    return wins / (pos.sum() * (~pos).sum())


def auc_by_occasion(scores, labels, occasion_codes) -> dict[str, float | None]:
    out = {}
    scores, labels, codes = np.asarray(scores), np.asarray(labels), np.asarray(occasion_codes)
    for k, occ in enumerate(OCCASIONS):
        sel = codes == k
        y = labels[sel]
        out[occ] = auc(scores[sel], y) if sel.any() and 0 < y.sum() < len(y) else None
    return out


@dataclass
class EvalReport:
    model: str
    dataset: str
    metric_kind: str
    seeds: list[int]
    aucs: list[float]
    per_occasion: list[dict[str, float | None]] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def auc_std(self) -> float:
        return float(np.std(self.aucs))

    def rows(self) -> list[dict[str, str]]:
        rows = []
        for k, (seed, value) in enumerate(zip(self.seeds, self.aucs)):
            occ = self.per_occasion[k] if k < len(self.per_occasion) else {}
            row = {"model": self.model, "dataset": self.dataset, "metric_kind": self.metric_kind,
                   "seed": str(seed), "auc": f"{value:.4f}"}
            for o in OCCASIONS:
                v = occ.get(o)
                row[f"auc_{o.lower()}"] = "" if v is None else f"{v:.4f}"
            rows.append(row)
        return rows


@dataclass
class SimilarityMatrix:
    cls: str
    values: np.ndarray                # (4, 4): rows bank A occasions, cols bank B occasions
    labels: tuple[str, ...] = OCCASIONS
    provenance: dict[str, str] = field(default_factory=dict)

    def diagonal_dominant(self) -> bool:
        """Each diagonal entry exceeds every off-diagonal entry."""
        v = self.values
        off = v[~np.eye(len(v), dtype=bool)]
        return bool(np.diag(v).min() > off.max())


def prototype_similarity(bank_a, bank_b) -> dict[str, SimilarityMatrix]:
    if bank_a.dim() != bank_b.dim():
        raise ValueError(f"prototype dims differ: {bank_a.dim()} vs {bank_b.dim()}")
    out = {}
    for cls in ("pos", "neg"):
        m = np.zeros((len(OCCASIONS), len(OCCASIONS)))
        for i, oa in enumerate(OCCASIONS):
            for j, ob in enumerate(OCCASIONS):
                a = np.asarray(bank_a.get(oa, cls), dtype=np.float64)
                b = np.asarray(bank_b.get(ob, cls), dtype=np.float64)
                denom = max(np.linalg.norm(a), 1e-12) * max(np.linalg.norm(b), 1e-12)
                m[i, j] = np.clip(a @ b / denom, -1.0, 1.0)
        prov = {**{f"a.{k}": v for k, v in bank_a.provenance.items()},
                **{f"b.{k}": v for k, v in bank_b.provenance.items()}}
        out[cls] = SimilarityMatrix(cls, m, provenance=prov)
    return out


# -- output --------------------------------------------------------------------------

def format_table(reports: list[EvalReport]) -> str:
    lines = [f"{'model':<10} {'dataset':<8} {'metric':<10} {'AUC (mean±std)':<20} n",
             "-" * 56]
    for r in reports:
        lines.append(f"{r.model:<10} {r.dataset:<8} {r.metric_kind:<10} "
                     f"{r.auc_mean:.4f}±{r.auc_std:.5f}{'':<4} {len(r.aucs)}")
    occ_rows = [(r, occ) for r in reports for occ in r.per_occasion if occ]
    if occ_rows:
        lines += ["", "Per-occasion AUC (extension, mean over seeds)",
                  f"{'model':<10} {'metric':<10} " + " ".join(f"{o:>7}" for o in OCCASIONS)]
        for r in reports:
            if not any(r.per_occasion):
                continue
            cells = []
            for o in OCCASIONS:
                vals = [d[o] for d in r.per_occasion if d.get(o) is not None]
                cells.append(f"{np.mean(vals):>7.4f}" if vals else f"{'-':>7}")
            lines.append(f"{r.model:<10} {r.metric_kind:<10} " + " ".join(cells))
    if any(r.counts for r in reports):
        lines += ["", "Sample counts"]
        for r in reports:
            if r.counts:
                lines.append(f"{r.model:<10} " + " ".join(f"{k}={v}" for k, v in sorted(r.counts.items())))
    return "\n".join(lines) + "\n"


def format_similarity(mats: dict[str, SimilarityMatrix]) -> str:
    lines = []
    for cls, m in mats.items():
        lines.append(f"{cls} prototypes (rows: bank A, cols: bank B)")
        lines.append("      " + " ".join(f"{o:>7}" for o in m.labels))
        for i, o in enumerate(m.labels):
            lines.append(f"{o:<5} " + " ".join(f"{v:>7.4f}" for v in m.values[i]))
        lines.append("")
    return "\n".join(lines)


def reports_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(r.rows())
    return buf.getvalue()


def emit_report(reports: EvalReport | list[EvalReport], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.txt``; identical inputs give identical bytes."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    base = Path(path)
    if base.suffix in (".csv", ".txt"):
        base = base.with_suffix("")
    csv_path, txt_path = base.with_suffix(".csv"), base.with_suffix(".txt")
    try:
        csv_path.write_text(reports_csv(reports), encoding="utf-8", newline="\n")
        txt_path.write_text(format_table(reports), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {base}: {exc}") from exc
    return csv_path, txt_path
