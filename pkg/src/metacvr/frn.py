"""Feature representation network and the base conversion head.

MainNet runs multi-head self-attention over the embedded behavior sequence,
then a user-queried and a target-item-queried pooling over the attended rows,
and feeds ``[e_u, e_i, e_ui, s_i, s_u]`` through an MLP. BiasNet maps
``[e_u, e_c]`` through a smaller MLP. The representation is the L2-normalized
concatenation of the two outputs.
"""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .featurespace import EmbeddedGroups, FeatureSchema, embed_batch

N_HEADS = 8
HIDDEN = 128
MAIN_WIDTHS = (512, 256, 128)
BIAS_WIDTHS = (64, 32)
HEAD_WIDTHS = (64, 32, 1)


def representation_dim() -> int:
    return MAIN_WIDTHS[-1] + BIAS_WIDTHS[-1]


def _mlp_init(rng, prefix: str, fan_in: int, widths) -> dict[str, np.ndarray]:
    out = {}
    for k, w in enumerate(widths):
        out[f"{prefix}/W{k}"] = tc.glorot(rng, fan_in, w)
        out[f"{prefix}/b{k}"] = np.zeros(w, dtype=tc.DTYPE)
        fan_in = w
    return out


def init_frn_params(schema: FeatureSchema, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d_i = schema.seq_item_dim
    p = {
        "frn/sa/Wq": tc.glorot(rng, d_i, HIDDEN),
        "frn/sa/Wk": tc.glorot(rng, d_i, HIDDEN),
        "frn/sa/Wv": tc.glorot(rng, d_i, HIDDEN),
        "frn/sa/Wo": tc.glorot(rng, HIDDEN, HIDDEN),
        "frn/sa/bo": np.zeros(HIDDEN, dtype=tc.DTYPE),
        "frn/ua/Wq": tc.glorot(rng, schema.user_dim, HIDDEN),
        "frn/ta/Wq": tc.glorot(rng, schema.item_dim, HIDDEN),
    }
    main_in = schema.user_dim + schema.item_dim + schema.inter_dim + 2 * HIDDEN
    p.update(_mlp_init(rng, "frn/main", main_in, MAIN_WIDTHS))
    p.update(_mlp_init(rng, "frn/bias", schema.user_dim + schema.context_dim, BIAS_WIDTHS))
    return p


def init_head_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return _mlp_init(rng, "fb", representation_dim(), HEAD_WIDTHS)


def mlp(x: tc.Node, P: dict[str, tc.Node], prefix: str, n_layers: int,
        relu_last: bool = False) -> tc.Node:
    for k in range(n_layers):
        x = tc.add(tc.matmul(x, P[f"{prefix}/W{k}"]), P[f"{prefix}/b{k}"])
        if k < n_layers - 1 or relu_last:
            x = tc.relu(x)
    return x


def self_attention(e_seq: tc.Node, mask: np.ndarray, P: dict[str, tc.Node]) -> tc.Node:
    """Masked 8-head scaled dot-product self-attention, output (B, L, 128).

    Invalid keys get -inf before the softmax; invalid query rows are zeroed.
    """
    B, L, _ = e_seq.shape
    dh = HIDDEN // N_HEADS

    def heads(W):
        x = tc.reshape(tc.matmul(e_seq, W), (B, L, N_HEADS, dh))
        return tc.transpose(x, (0, 2, 1, 3))

    q, k, v = heads(P["frn/sa/Wq"]), heads(P["frn/sa/Wk"]), heads(P["frn/sa/Wv"])
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1 / np.sqrt(dh))
    weights = tc.softmax(scores, mask=mask[:, None, None, :])
    attended = tc.reshape(tc.transpose(tc.matmul(weights, v), (0, 2, 1, 3)), (B, L, HIDDEN))
    out = tc.add(tc.matmul(attended, P["frn/sa/Wo"]), P["frn/sa/bo"])
    return tc.mul(out, tc.const(mask[..., None].astype(e_seq.value.dtype)))


def pooled_attention(query: tc.Node, keys: tc.Node, mask: np.ndarray, W_query: tc.Node) -> tc.Node:
    """Softmax-weighted sum of ``keys`` rows scored against a projected query."""
    q = tc.matmul(query, W_query)                                  # (B, 128)
    scores = tc.scale(tc.reshape(tc.matmul(keys, tc.reshape(q, q.shape + (1,))), mask.shape),
                      1 / np.sqrt(keys.shape[-1]))
    w = tc.softmax(scores, mask=mask)                               # (B, L)
    pooled = tc.matmul(tc.reshape(w, (w.shape[0], 1, w.shape[1])), keys)
    return tc.reshape(pooled, (w.shape[0], keys.shape[-1]))


def frn_parts(g: EmbeddedGroups, P: dict[str, tc.Node]) -> tuple[tc.Node, tc.Node, tc.Node]:
    """Return ``(h_main, h_bias, F)`` for a batch."""
    seq_hat = self_attention(g.e_seq, g.mask, P)
    s_u = pooled_attention(g.e_u, seq_hat, g.mask, P["frn/ua/Wq"])
    s_i = pooled_attention(g.e_i, seq_hat, g.mask, P["frn/ta/Wq"])
    h_main = mlp(tc.concat([g.e_u, g.e_i, g.e_ui, s_i, s_u], axis=-1), P, "frn/main", len(MAIN_WIDTHS))
    h_bias = mlp(tc.concat([g.e_u, g.e_c], axis=-1), P, "frn/bias", len(BIAS_WIDTHS))
    rep = tc.l2_normalize(tc.concat([h_main, h_bias], axis=-1), axis=-1)
    return h_main, h_bias, rep


def frn_forward(g: EmbeddedGroups, P: dict[str, tc.Node]) -> tc.Node:
    return frn_parts(g, P)[2]


def base_logit(rep: tc.Node, P: dict[str, tc.Node]) -> tc.Node:
    out = mlp(rep, P, "fb", len(HEAD_WIDTHS))
    return tc.reshape(out, (rep.shape[0],))


def base_head(rep: tc.Node, P: dict[str, tc.Node]) -> tc.Node:
    """Base CVR probability: ReLU, ReLU, linear, then sigmoid."""
    return tc.sigmoid(base_logit(rep, P))


def wrap_frozen(params: dict[str, np.ndarray]) -> dict[str, tc.Node]:
    return {k: tc.const(v) for k, v in params.items()}


def represent(data, params: dict[str, np.ndarray], batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only pass: unit representations (n, D) and base probabilities (n,)."""
    P = wrap_frozen(params)
    reps, probs = [], []
    for start in range(0, len(data), batch_size):
        chunk = data.subset(np.arange(start, min(start + batch_size, len(data))))
        rep = frn_forward(embed_batch(chunk, P, params), P)
        reps.append(rep.value)
        probs.append(base_head(rep, P).value)
    dtype = params["fb/W0"].dtype
    if not reps:
        return np.zeros((0, representation_dim()), dtype=dtype), np.zeros(0, dtype=dtype)
    return np.concatenate(reps), np.concatenate(probs)
