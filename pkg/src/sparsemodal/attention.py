"""Query-conditioned spatial attention, top-p selection, and the sparse block.

A text-side query vector scores every spatial position of a feature-map
stack; the smallest set of positions holding the top-p probability mass is
kept and everything else becomes exact zero.  Two submanifold convolutions
and a sparse max-pool then run on the survivors.  Selection is deterministic
truncation (no sampling): positions are ranked by score with row-major order
breaking ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsemodal.sparse import (
    FlopsLedger,
    SparseFeatureMap,
    densify,
    sparse_maxpool,
    submanifold_conv,
    to_sparse,
)
from sparsemodal.tensor import (
    ParamStore,
    ShapeMismatch,
    Tensor,
    matmul,
    relu,
    softmax,
    take_rows,
    tanh,
)

__all__ = [
    "AttentionParams",
    "attention_scores",
    "nucleus_select",
    "apply_mask",
    "sparse_relu",
    "crossmodal_block",
    "write_mask_pgm",
    "write_selection_csv",
]


@dataclass
class AttentionParams:
    """Weights of one attention layer over a C-channel map and a d-dim query.

    ``map_weight`` (k, C) and ``query_weight`` (k, d) project into a shared
    k-dim space; ``score_weight`` (k,) and ``score_bias`` (1,) turn it into a
    per-position logit.
    """

    map_weight: Tensor
    map_bias: Tensor
    query_weight: Tensor
    score_weight: Tensor
    score_bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int,
               query_dim: int, width: int) -> "AttentionParams":
        return cls(
            map_weight=store.add(f"{prefix}/map_weight", (width, channels),
                                 init="fan_in", fan_in=channels),
            map_bias=store.add(f"{prefix}/map_bias", (width,)),
            query_weight=store.add(f"{prefix}/query_weight", (width, query_dim),
                                   init="fan_in", fan_in=query_dim),
            score_weight=store.add(f"{prefix}/score_weight", (width,),
                                   init="fan_in", fan_in=width),
            score_bias=store.add(f"{prefix}/score_bias", (1,)),
        )


def attention_scores(maps: Tensor, query: Tensor, params: AttentionParams,
                     active: np.ndarray | None = None) -> Tensor:
    """Spatial attention scores (S, H, W), normalized jointly over H x W per s.

    ``maps`` is a dense (C, S, H, W) stack; ``query`` is a single (d,) vector
    shared by all slices, or an (S, d) matrix with one row per slice.
    ``active`` optionally restricts normalization: excluded positions score
    exactly 0 and can never be selected downstream.
    """
    c, s, h, w = maps.data.shape
    width, c_expect = params.map_weight.shape
    if c != c_expect:
        raise ShapeMismatch(
            f"attention: map channels C={c} do not match weights C={c_expect}")
    d_expect = params.query_weight.shape[1]
    if query.data.shape not in ((d_expect,), (s, d_expect)):
        raise ShapeMismatch(
            f"attention: query shape {query.data.shape} is neither "
            f"(d={d_expect},) nor (S={s}, d={d_expect})")
    projected = matmul(params.map_weight, maps.reshape(c, s * h * w))
    projected = projected.reshape(width, s, h, w) + \
        params.map_bias.reshape(width, 1, 1, 1)
    if query.data.ndim == 1:
        qk = matmul(params.query_weight, query.reshape(d_expect, 1))
        qk = qk.reshape(width, 1, 1, 1)
    else:
        qk = matmul(query, params.query_weight.transpose(1, 0))
        qk = qk.transpose(1, 0).reshape(width, s, 1, 1)
    hidden = tanh(projected + qk)
    logits = matmul(params.score_weight.reshape(1, width),
                    hidden.reshape(width, s * h * w))
    logits = logits.reshape(s, h, w) + params.score_bias.reshape(1, 1, 1)
    return softmax(logits, axes=(1, 2), valid=active)


def nucleus_select(scores: np.ndarray, p: float,
                   active: np.ndarray | None = None) -> np.ndarray:
    """Smallest per-slice set of top-scored positions with cumulative mass >= p.

    Deterministic truncation: positions sort by descending score, ties broken
    by row-major coordinate order; at least one position per slice is always
    kept.  With ``active`` given, only active positions are candidates, so a
    previously dropped site can never return.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"top-p must be in (0, 1], got {p}")
    scores = np.asarray(scores, dtype=np.float64)
    s, h, w = scores.shape
    mask = np.zeros((s, h, w), dtype=bool)
    flat_mask = mask.reshape(s, -1)
    flat = scores.reshape(s, -1)
    act = None if active is None else np.asarray(active, bool).reshape(s, -1)
    for i in range(s):
        cand = np.arange(h * w) if act is None else np.nonzero(act[i])[0]
        if cand.size == 0:
            raise ValueError(f"slice {i} has no candidate positions")
        vals = flat[i, cand]
        order = np.argsort(-vals, kind="stable")
        csum = np.cumsum(vals[order])
        take = min(int(np.searchsorted(csum, p, side="left")) + 1, cand.size)
        flat_mask[i, cand[order[:take]]] = True
    return mask


def apply_mask(mask: np.ndarray, maps, gate: Tensor | None = None
               ) -> SparseFeatureMap:
    """Keep the masked positions of a dense stack or of a sparse map.

    The mask is a non-differentiable constant; gradient reaches the kept
    positions only.  With ``gate`` given (the score tensor), kept rows are
    multiplied by their own score instead of 1, which lets the attention
    weights receive gradient (soft-gating mode).
    """
    mask = np.asarray(mask) != 0
    if isinstance(maps, SparseFeatureMap):
        c, s, h, w = maps.extents
        if mask.shape != (s, h, w):
            raise ShapeMismatch(
                f"mask extents {mask.shape} do not match ({s},{h},{w})")
        if (mask & ~maps.active_mask()).any():
            raise ShapeMismatch("mask selects positions outside the active set")
        keep = mask[maps.coords[:, 0], maps.coords[:, 1], maps.coords[:, 2]]
        rows = np.nonzero(keep)[0]
        sp = SparseFeatureMap((c, s, h, w), maps.coords[rows],
                              take_rows(maps.features, rows))
    else:
        if mask.shape != tuple(maps.data.shape[1:]):
            raise ShapeMismatch(
                f"mask extents {mask.shape} do not match "
                f"{tuple(maps.data.shape[1:])}")
        s, h, w = mask.shape
        sp = to_sparse(maps, mask)
    if gate is not None:
        flat_idx = (sp.coords[:, 0] * h + sp.coords[:, 1]) * w + sp.coords[:, 2]
        gates = take_rows(gate.reshape(s * h * w, 1), flat_idx)
        sp = SparseFeatureMap(sp.extents, sp.coords, sp.features * gates)
    return sp


def sparse_relu(sp: SparseFeatureMap) -> SparseFeatureMap:
    return SparseFeatureMap(sp.extents, sp.coords, relu(sp.features))


def crossmodal_block(x, query: Tensor, params: AttentionParams,
                     conv1: tuple[Tensor, Tensor], conv2: tuple[Tensor, Tensor],
                     p: float, soft_gate: bool = False,
                     ledger: FlopsLedger | None = None,
                     layer: str = "block",
                     ) -> tuple[SparseFeatureMap, Tensor, np.ndarray]:
    """Attention -> top-p selection -> two sparse convs (relu) -> sparse pool.

    ``x`` is a dense (C, S, H, W) tensor for the first block or a sparse map
    for later blocks (its zero-filled view feeds the attention; dropped sites
    are barred from re-selection).  Returns the pooled sparse map plus the
    score tensor and selection mask for inspection.
    """
    if isinstance(x, SparseFeatureMap):
        dense_view = densify(x)
        active = x.active_mask()
    else:
        dense_view = x
        active = None
    scores = attention_scores(dense_view, query, params, active=active)
    mask = nucleus_select(scores.data, p, active=active)
    sp = apply_mask(mask, x, gate=scores if soft_gate else None)
    sp = sparse_relu(submanifold_conv(sp, conv1[0], conv1[1], ledger=ledger,
                                      layer=f"{layer}/conv1"))
    sp = sparse_relu(submanifold_conv(sp, conv2[0], conv2[1], ledger=ledger,
                                      layer=f"{layer}/conv2"))
    return sparse_maxpool(sp), scores, mask


def write_mask_pgm(mask2d: np.ndarray, path) -> None:
    """One selection mask slice as an ASCII PGM: 255 selected, 0 not."""
    mask2d = np.asarray(mask2d) != 0
    h, w = mask2d.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join("255" if v else "0" for v in row) for row in mask2d]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_selection_csv(rows, path) -> None:
    """Selected coordinates as `layer,s,h,w` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,s,h,w\n")
        for layer, s, h, w in rows:
            fh.write(f"{layer},{s},{h},{w}\n")
