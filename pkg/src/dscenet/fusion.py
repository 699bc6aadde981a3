"""Clinical-guided fusion: query tokens from clinical data, then two attentions.

The clinical vector and the bag's pooled image feature are mixed into m query
tokens (one per indicator). Those tokens first attend over the projected
image keys/values to pull out clinically relevant evidence; the image patches
then attend back over the tokens, so every patch row ends up enriched by the
clinically weighted summary. The token width equals the feature width, so the
tokens are used unprojected on both sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import Matrix, Node


@dataclass
class FusionParams:
    """Token MLP (m+L -> L -> m*L) and the Q/K/V projections (L -> d_k)."""

    cq1_w: Matrix | Node
    cq1_b: Matrix | Node
    cq2_w: Matrix | Node
    cq2_b: Matrix | Node
    w_q: Matrix | Node
    w_k: Matrix | Node
    w_v: Matrix | Node


def build_clinical_query_node(
    c: Node,
    x: Node,
    params: FusionParams,
    n_tokens: int,
    scale_pooling: bool = True,
) -> Node:
    """Graph version: clinical row + pooled image row -> m x L query tokens."""
    feat = x.value.cols
    expected = c.value.cols + feat
    cq1_rows = params.cq1_w.value.rows if isinstance(params.cq1_w, Node) else params.cq1_w.rows
    if cq1_rows != expected:
        raise ConfigError(
            f"token MLP expects {cq1_rows} inputs but clinical+image gives {expected}"
        )
    u = nm.concat_cols(c, nm.mean_rows(x))
    t = nm.relu(nm.affine(u, params.cq1_w, params.cq1_b))
    z = nm.affine(t, params.cq2_w, params.cq2_b)
    tokens = nm.reshape(z, n_tokens, feat)
    if scale_pooling:
        tokens = nm.scale(tokens, 1.0 / math.sqrt(feat))
    return tokens


def build_clinical_query(
    c: Matrix,
    x: Matrix,
    params: FusionParams,
    scale_pooling: bool = True,
) -> Matrix:
    """Build the m x L clinical query tokens for one bag."""
    node = build_clinical_query_node(
        nm.constant(c), nm.constant(x), params, c.cols, scale_pooling
    )
    return node.value


def _attention(q: Node, k: Node, v: Node) -> tuple[Node, Node]:
    d_k = q.value.cols
    if k.value.cols != d_k:
        raise DimensionError(f"attention width mismatch: {q.value.shape} vs {k.value.shape}")
    if v.value.rows != k.value.rows:
        raise DimensionError(f"keys and values disagree: {k.value.shape} vs {v.value.shape}")
    weights = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(d_k)))
    return nm.matmul(weights, v), weights


def clinical_query_attention_node(c: Node, k: Node, v: Node) -> tuple[Node, Node]:
    """Tokens attend over image keys/values; returns (V_c, weight rows)."""
    return _attention(c, k, v)


def clinical_query_attention(c: Matrix, k: Matrix, v: Matrix) -> Matrix:
    out, _ = _attention(nm.constant(c), nm.constant(k), nm.constant(v))
    return out.value


def clinical_shared_attention_node(q: Node, c: Node, v_c: Node) -> tuple[Node, Node]:
    """Image queries attend back over the tokens; returns (h, weight rows)."""
    return _attention(q, c, v_c)


def clinical_shared_attention(q: Matrix, c: Matrix, v_c: Matrix) -> Matrix:
    out, _ = _attention(nm.constant(q), nm.constant(c), nm.constant(v_c))
    return out.value


def fuse_nodes(s: Node, h: Node) -> Node:
    return nm.concat_cols(s, h)


def fuse(s: Matrix, h: Matrix) -> Matrix:
    """Column-concatenate the screened branch (first) with the fused branch."""
    if s.rows != h.rows:
        raise DimensionError(f"fuse row mismatch: {s.shape} vs {h.shape}")
    return fuse_nodes(nm.constant(s), nm.constant(h)).value
