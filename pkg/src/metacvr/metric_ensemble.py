"""Distance metrics between representations and prototypes, and the ensemble head.

All metrics follow a "larger means closer" convention so the occasion score
``d(F, p_pos) - d(F, p_neg)`` has the same sign meaning for every kind.
Learnable metrics hold one ``(W, b)`` pair per occasion, shared by both classes.
"""
from __future__ import annotations

import enum

import numpy as np

from . import tensorcore as tc
from .featurespace import OCCASIONS


class MetricKind(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    SPDM = "spdm"
    NNDM = "nndm"

    @property
    def learnable(self) -> bool:
        return self in (MetricKind.SPDM, MetricKind.NNDM)


def init_dmn_params(kind: MetricKind | str, dim: int, rng: np.random.Generator | None = None,
                    dtype=tc.DTYPE) -> dict[str, np.ndarray]:
    kind = MetricKind(kind)
    out: dict[str, np.ndarray] = {}
    if not kind.learnable:
        return out
    for occ in OCCASIONS:
        if kind is MetricKind.SPDM:
            W = np.eye(dim, dtype=dtype)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            W = rng.uniform(-0.01, 0.01, size=(1, 2 * dim)).astype(dtype)
        out[f"dmn/{occ}/W"] = W
        out[f"dmn/{occ}/b"] = np.zeros(1, dtype=dtype)
    return out


def init_epn_params(bias: float = 0.0, dtype=tc.DTYPE) -> dict[str, np.ndarray]:
    return {"epn/w": np.array([1, 0, 0, 0, 0], dtype=dtype),
            "epn/b": np.array([bias], dtype=dtype)}


def _vec(p, dtype) -> tc.Node:
    return p if isinstance(p, tc.Node) else tc.const(np.asarray(p, dtype=dtype))


def spdm(F: tc.Node, p, W: tc.Node, b: tc.Node) -> tc.Node:
    """Bilinear metric ``F^T W p + b``; ``F`` may carry leading batch dims."""
    p = _vec(p, F.value.dtype)
    D = F.shape[-1]
    if W.shape != (D, D) or p.shape != (D,):
        raise tc.ShapeError("spdm", F.shape, W.shape, p.shape)
    return tc.bias_add(tc.matmul(tc.matmul(F, W), p), b)


def nndm(F: tc.Node, p, W: tc.Node, b: tc.Node) -> tc.Node:
    """Linear map over the concatenation ``W [F; p] + b``."""
    p = _vec(p, F.value.dtype)
    D = F.shape[-1]
    if W.shape != (1, 2 * D) or p.shape != (D,):
        raise tc.ShapeError("nndm", F.shape, W.shape, p.shape)
    tiled = tc.const(np.broadcast_to(p.value, F.shape).copy())
    return tc.bias_add(tc.matmul(tc.concat([F, tiled], axis=-1), tc.reshape(W, (2 * D,))), b)


def fixed_metrics(F: tc.Node, p, kind: MetricKind | str) -> tc.Node:
    """Cosine similarity or negated squared Euclidean distance."""
    kind = MetricKind(kind)
    p = _vec(p, F.value.dtype)
    if p.shape[-1] != F.shape[-1]:
        raise tc.ShapeError(f"fixed_metrics[{kind.value}]", F.shape, p.shape)
    if kind is MetricKind.COSINE:
        return tc.matmul(tc.l2_normalize(F, axis=-1), tc.l2_normalize(p, axis=-1))
    if kind is MetricKind.EUCLIDEAN:
        diff = tc.sub(F, p)
        return tc.mul(tc.sum_(tc.mul(diff, diff), axis=-1), tc.const(np.asarray(-1, dtype=F.value.dtype)))
    raise ValueError(f"{kind.value} is not a fixed metric")


def distance(F: tc.Node, p, kind: MetricKind | str, P: dict[str, tc.Node], occ: str) -> tc.Node:
    kind = MetricKind(kind)
    if kind is MetricKind.SPDM:
        return spdm(F, p, P[f"dmn/{occ}/W"], P[f"dmn/{occ}/b"])
    if kind is MetricKind.NNDM:
        return nndm(F, p, P[f"dmn/{occ}/W"], P[f"dmn/{occ}/b"])
    return fixed_metrics(F, p, kind)


def occasion_scores(F: tc.Node, bank, P: dict[str, tc.Node], kind: MetricKind | str) -> tc.Node:
    """Per-occasion ``d(F, p+) - d(F, p-)`` stacked in (BP, DP, AP, NP) order -> (B, 4)."""
    cols = []
    for occ in OCCASIONS:
        try:
            pos, neg = bank.get(occ, "+"), bank.get(occ, "-")
        except KeyError:
            raise KeyError(f"prototype bank has no entry for occasion {occ}") from None
        s = tc.sub(distance(F, pos, kind, P, occ), distance(F, neg, kind, P, occ))
        cols.append(tc.reshape(s, s.shape + (1,)))
    return tc.concat(cols, axis=-1)


def epn_logit(s_b: tc.Node, s_occ: tc.Node, P: dict[str, tc.Node]) -> tc.Node:
    if s_occ.shape[-1] != len(OCCASIONS):
        raise tc.ShapeError("epn", s_b.shape, s_occ.shape)
    x = tc.concat([tc.reshape(s_b, s_b.shape + (1,)), s_occ], axis=-1)
    return tc.bias_add(tc.matmul(x, P["epn/w"]), P["epn/b"])


def epn_forward(s_b: tc.Node, s_occ: tc.Node, P: dict[str, tc.Node]) -> tc.Node:
    """Final probability ``sigmoid(w . [s_b, s_BP, s_DP, s_AP, s_NP] + b)``."""
    return tc.sigmoid(epn_logit(s_b, s_occ, P))
