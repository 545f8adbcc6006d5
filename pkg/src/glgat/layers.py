"""Graph attention layers.

Two variants share one vocabulary: ``gat_forward`` is the plain masked
single-matrix attention; ``glgat_forward`` extends it with a stack of
weighting matrices, per-matrix heads, a pairwise-encoding score term, and
a query path that mixes one shared ("global") projection with a per-vertex
("local") projection bank before compression.

Both accept inputs with arbitrary leading batch axes, (..., N, K); all
graph-level objects (adjacency, pairwise table, encodings) are fixed per
layer. Attention coefficients are exposed on request so tests can compare
them against scalar-loop references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adjacency import AdjacencySet
from .encoding import PairwiseEncoding


@dataclass(frozen=True)
class LayerDims:
    """Width bookkeeping for the multi-adjacency layer.

    ``h`` is the per-head channel count, ``h_adj`` the number of weighting
    matrices, ``h_head`` the heads per matrix, and ``h_pe`` the pairwise
    encoding width (0 disables the geometry score term). The attention
    output width is h * h_adj * h_head and the query projection adds
    h_adj * h_pe channels for the encoding queries.
    """

    h: int
    h_adj: int
    h_head: int
    h_pe: int

    def __post_init__(self):
        if min(self.h, self.h_adj, self.h_head) < 1 or self.h_pe < 0:
            raise ValueError(f"invalid layer dims {self}")

    @property
    def h_prime(self) -> int:
        return self.h * self.h_adj * self.h_head

    @property
    def h_q(self) -> int:
        return self.h_prime + self.h_adj * self.h_pe


@dataclass
class GatLayerParams:
    w_q: ad.DiffTensor  # (H, K + H_E)
    b_q: ad.DiffTensor  # (H,)
    w_k: ad.DiffTensor  # (H, K + H_E)
    b_k: ad.DiffTensor  # (H,)
    w_v: ad.DiffTensor  # (H, K)
    b_v: ad.DiffTensor  # (H,)
    w_ff: ad.DiffTensor  # (K', H)
    b_ff: ad.DiffTensor  # (K',)

    def named(self) -> dict[str, ad.DiffTensor]:
        return {k: getattr(self, k) for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_ff", "b_ff")}


@dataclass
class GlgatLayerParams:
    dims: LayerDims
    w_q_global: ad.DiffTensor  # (H_Q, K + H_E)
    b_q_global: ad.DiffTensor  # (H_Q,)
    w_q_local: ad.DiffTensor  # (N, H_Q, K + H_E), row i owned by vertex i
    b_q_local: ad.DiffTensor  # (N, H_Q)
    w_q_compress: ad.DiffTensor  # (H_Q, 2 * H_Q)
    b_q_compress: ad.DiffTensor  # (H_Q,)
    w_k: ad.DiffTensor  # (H', K + H_E)
    b_k: ad.DiffTensor  # (H',)
    w_v: ad.DiffTensor  # (H', K)
    b_v: ad.DiffTensor  # (H',)
    w_ff: ad.DiffTensor  # (K', H')
    b_ff: ad.DiffTensor  # (K',)

    def named(self) -> dict[str, ad.DiffTensor]:
        keys = (
            "w_q_global", "b_q_global", "w_q_local", "b_q_local",
            "w_q_compress", "b_q_compress", "w_k", "b_k", "w_v", "b_v",
            "w_ff", "b_ff",
        )
        return {k: getattr(self, k) for k in keys}

    @property
    def n_vertices(self) -> int:
        return self.w_q_local.shape[0]


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, *lead) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(*lead, fan_out, fan_in))


def init_gat_layer(
    k_in: int, k_out: int, h: int, h_e: int, seed: int
) -> GatLayerParams:
    """Glorot-uniform weights, zero biases, deterministic under seed."""
    if min(k_in, k_out, h) < 1 or h_e < 0:
        raise ValueError("invalid layer sizes")
    rng = np.random.default_rng(seed)
    f = k_in + h_e
    return GatLayerParams(
        w_q=ad.parameter(_glorot(rng, h, f)),
        b_q=ad.parameter(np.zeros(h)),
        w_k=ad.parameter(_glorot(rng, h, f)),
        b_k=ad.parameter(np.zeros(h)),
        w_v=ad.parameter(_glorot(rng, h, k_in)),
        b_v=ad.parameter(np.zeros(h)),
        w_ff=ad.parameter(_glorot(rng, k_out, h)),
        b_ff=ad.parameter(np.zeros(k_out)),
    )


def init_glgat_layer(
    dims: LayerDims, n: int, k_in: int, k_out: int, h_e: int, seed: int
) -> GlgatLayerParams:
    """Glorot-uniform weights with the local query bank damped by 1/2.

    The damping keeps the shared global path dominant early in training;
    each vertex's bank row still gets independent draws.
    """
    if n < 1 or min(k_in, k_out) < 1 or h_e < 0:
        raise ValueError("invalid layer sizes")
    rng = np.random.default_rng(seed)
    f = k_in + h_e
    hp, hq = dims.h_prime, dims.h_q
    return GlgatLayerParams(
        dims=dims,
        w_q_global=ad.parameter(_glorot(rng, hq, f)),
        b_q_global=ad.parameter(np.zeros(hq)),
        w_q_local=ad.parameter(0.5 * _glorot(rng, hq, f, n)),
        b_q_local=ad.parameter(np.zeros((n, hq))),
        w_q_compress=ad.parameter(_glorot(rng, hq, 2 * hq)),
        b_q_compress=ad.parameter(np.zeros(hq)),
        w_k=ad.parameter(_glorot(rng, hp, f)),
        b_k=ad.parameter(np.zeros(hp)),
        w_v=ad.parameter(_glorot(rng, hp, k_in)),
        b_v=ad.parameter(np.zeros(hp)),
        w_ff=ad.parameter(_glorot(rng, k_out, hp)),
        b_ff=ad.parameter(np.zeros(k_out)),
    )


def _affine(x: ad.DiffTensor, w: ad.DiffTensor, b: ad.DiffTensor) -> ad.DiffTensor:
    return ad.matmul(x, ad.transpose_last(w)) + b


def _with_encoding(x: ad.DiffTensor, enc: ad.DiffTensor | None) -> ad.DiffTensor:
    if enc is None or enc.shape[-1] == 0:
        return x
    if x.ndim > 2:
        enc = ad.broadcast_to(enc, x.shape[:-2] + enc.shape)
    return ad.concat([x, enc], axis=-1)


def gat_forward(
    params: GatLayerParams,
    x_in: ad.DiffTensor,
    enc: ad.DiffTensor | None,
    adj: np.ndarray,
    return_coefficients: bool = False,
):
    """Masked single-matrix attention over (..., N, K) inputs.

    Queries and keys see the input concatenated with the vertex encoding;
    values see the input alone. Scores pass through GELU and a weighted
    softmax where ``adj`` entries in [0, 1] scale each neighbor's share
    (a 0/1 matrix reproduces hard masking). Output is an affine map of the
    attention-mixed values, shape (..., N, K').
    """
    xe = _with_encoding(x_in, enc)
    q = _affine(xe, params.w_q, params.b_q)
    k = _affine(xe, params.w_k, params.b_k)
    v = _affine(x_in, params.w_v, params.b_v)
    scores = ad.gelu(ad.matmul(q, ad.transpose_last(k)))
    coef = ad.masked_softmax(scores, adj)
    out = _affine(ad.matmul(coef, v), params.w_ff, params.b_ff)
    if return_coefficients:
        return out, coef
    return out


def _split_heads(t: ad.DiffTensor, dims: LayerDims) -> ad.DiffTensor:
    """(..., N, H') -> (..., H_adj, H_head, N, H)."""
    n = t.shape[-2]
    r = ad.reshape(t, t.shape[:-1] + (dims.h_adj, dims.h_head, dims.h))
    r = ad.swap_axes(r, -4, -2)  # (..., H_head, H_adj, N, H)
    return ad.swap_axes(r, -4, -3)  # (..., H_adj, H_head, N, H)


def glgat_forward(
    params: GlgatLayerParams,
    x_in: ad.DiffTensor,
    enc: ad.DiffTensor | None,
    adjs,
    pe,
    return_coefficients: bool = False,
):
    """Multi-adjacency global-local attention over (..., N, K) inputs.

    Computation per vertex i: a shared projection and vertex i's own row of
    the local bank each map x_i (+ encoding) to query space; their
    concatenation is compressed back to H_Q channels by shared weights. The
    first H' query channels dot against keys per (matrix n, head m); the
    remaining H_adj*H_PE channels dot against the static pairwise encoding
    of the pair (i, j), one H_PE block per matrix. GELU'd scores are
    softmax-normalized with A_n[i, j] as multiplicative weight, mix the
    values, and the flattened heads pass through the output affine map.

    Returns (..., N, K'), plus the coefficient tensor indexed
    (..., H_adj, H_head, N_row, N_col) when ``return_coefficients``.
    """
    dims = params.dims
    stacked = adjs.stacked if isinstance(adjs, AdjacencySet) else np.asarray(adjs)
    pe_table = pe.tensor if isinstance(pe, PairwiseEncoding) else pe
    n = x_in.shape[-2]
    if stacked.shape != (dims.h_adj, n, n):
        raise ad.ShapeError(
            f"expected {dims.h_adj} adjacency matrices of size {n}, got {stacked.shape}"
        )
    if params.n_vertices != n:
        raise ad.ShapeError(
            f"layer is bound to {params.n_vertices} vertices, input has {n}"
        )
    if dims.h_pe:
        if pe_table is None or pe_table.shape != (n, n, dims.h_pe):
            raise ad.ShapeError(
                f"pairwise encoding must have shape ({n}, {n}, {dims.h_pe})"
            )

    xe = _with_encoding(x_in, enc)
    q_global = _affine(xe, params.w_q_global, params.b_q_global)
    q_local = ad.bank_apply(params.w_q_local, xe) + params.b_q_local
    q = _affine(ad.concat([q_global, q_local], axis=-1), params.w_q_compress, params.b_q_compress)

    k = _split_heads(_affine(xe, params.w_k, params.b_k), dims)
    v = _split_heads(_affine(x_in, params.w_v, params.b_v), dims)

    q_at = _split_heads(q[..., : dims.h_prime], dims)
    scores = ad.matmul(q_at, ad.transpose_last(k))  # (..., H_adj, H_head, N, N)
    if dims.h_pe:
        q_pe = ad.reshape(q[..., dims.h_prime :], q.shape[:-1] + (dims.h_adj, dims.h_pe))
        q_pe = ad.swap_axes(q_pe, -3, -2)  # (..., H_adj, N, H_PE)
        pe_scores = ad.pairwise_scores(q_pe, pe_table)  # (..., H_adj, N, N)
        scores = scores + ad.reshape(pe_scores, pe_scores.shape[:-2] + (1, n, n))

    coef = ad.masked_softmax(ad.gelu(scores), stacked.reshape(dims.h_adj, 1, n, n))
    hidden = ad.matmul(coef, v)  # (..., H_adj, H_head, N, H)
    hidden = ad.swap_axes(ad.swap_axes(hidden, -4, -2), -3, -2)  # (..., N, H_adj, H_head, H)
    flat = ad.reshape(hidden, hidden.shape[:-4] + (n, dims.h_prime))
    out = _affine(flat, params.w_ff, params.b_ff)
    if return_coefficients:
        return out, coef
    return out
