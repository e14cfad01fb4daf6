"""Submanifold sparse convolution, sparse pooling and exact MAC accounting.

A sparse feature map stores only its active sites; everything else is exact
zero.  Convolution output sites equal the input sites (submanifold rule) and
each site reads only the active neighbors inside its window, so a layer's
executed cost is ``sum_sites a(site) * m * n`` multiply-accumulates versus the
standard ``z^2 * m * n`` per location.  Neighbor lookup goes through a dense
integer grid rebuilt per forward pass (the rulebook pattern).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from sparsemodal.tensor import ShapeMismatch, Tensor, _accum, _finish, _node

__all__ = [
    "SparseFeatureMap",
    "ConvSpec",
    "FlopsLedger",
    "LayerCost",
    "to_sparse",
    "densify",
    "submanifold_conv",
    "sparse_maxpool",
    "flops_report",
    "write_sparse_csv",
]


@dataclass
class ConvSpec:
    """Shape contract for a submanifold layer: odd kernel, stride 1, same pad."""

    kernel_size: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ShapeMismatch(
                f"kernel size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatch("channel counts must be >= 1")


class SparseFeatureMap:
    """Active sites of a (C, S, H, W) block plus their channel vectors.

    ``coords`` is an (A, 3) int array of (s, h, w), strictly increasing in
    row-major order; ``features`` is an (A, C) tensor, one row per site.
    """

    __slots__ = ("extents", "coords", "features")

    def __init__(self, extents: tuple[int, int, int, int],
                 coords: np.ndarray, features: Tensor):
        c, s, h, w = (int(e) for e in extents)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if features.data.shape != (coords.shape[0], c):
            raise ShapeMismatch(
                f"features shape {features.data.shape} does not match "
                f"{coords.shape[0]} sites x {c} channels")
        if coords.size:
            if (coords.min(axis=0) < 0).any() or \
                    (coords.max(axis=0) >= np.array([s, h, w])).any():
                raise ShapeMismatch("active site out of bounds")
            keys = (coords[:, 0] * h + coords[:, 1]) * w + coords[:, 2]
            if not np.all(np.diff(keys) > 0):
                raise ShapeMismatch(
                    "active sites must be unique and row-major sorted")
        self.extents = (c, s, h, w)
        self.coords = coords
        self.features = features

    @property
    def active_count(self) -> int:
        return self.coords.shape[0]

    def active_mask(self) -> np.ndarray:
        """Boolean (S, H, W) map of the active set."""
        _, s, h, w = self.extents
        mask = np.zeros((s, h, w), dtype=bool)
        mask[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = True
        return mask

    def site_grid(self) -> np.ndarray:
        """(S, H, W) int grid mapping coordinates to row index, -1 if inactive."""
        _, s, h, w = self.extents
        grid = np.full((s, h, w), -1, dtype=np.int64)
        grid[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = \
            np.arange(self.active_count)
        return grid

    def __repr__(self) -> str:
        return (f"SparseFeatureMap(extents={self.extents}, "
                f"active={self.active_count})")


# ----------------------------------------------------------------------
# dense <-> sparse
# ----------------------------------------------------------------------

def to_sparse(dense: Tensor, mask: np.ndarray) -> SparseFeatureMap:
    """Keep the one-positions of ``mask`` (S, H, W) from a (C, S, H, W) block.

    Gradient flows back to the kept positions of ``dense`` only; the mask is a
    non-differentiable constant.
    """
    c, s, h, w = dense.data.shape
    mask = np.asarray(mask)
    if mask.shape != (s, h, w):
        raise ShapeMismatch(
            f"mask extents {mask.shape} do not match map (S,H,W)=({s},{h},{w})")
    coords = np.argwhere(mask != 0)  # argwhere is row-major sorted
    feats = _node(dense.data[:, coords[:, 0], coords[:, 1], coords[:, 2]].T,
                  (dense,), "to_sparse")

    def bwd(g):
        dd = np.zeros_like(dense.data)
        dd[:, coords[:, 0], coords[:, 1], coords[:, 2]] = g.T
        _accum(dense, dd)

    return SparseFeatureMap((c, s, h, w), coords, _finish(feats, bwd))


def densify(sp: SparseFeatureMap) -> Tensor:
    """Zero-filled (C, S, H, W) view; inactive positions are exact zeros."""
    c, s, h, w = sp.extents
    coords = sp.coords
    dense = np.zeros((c, s, h, w))
    dense[:, coords[:, 0], coords[:, 1], coords[:, 2]] = sp.features.data.T
    out = _node(dense, (sp.features,), "densify")

    def bwd(g):
        _accum(sp.features, g[:, coords[:, 0], coords[:, 1], coords[:, 2]].T)

    return _finish(out, bwd)


# ----------------------------------------------------------------------
# submanifold convolution
# ----------------------------------------------------------------------

def _rulebook(sp: SparseFeatureMap, z: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per kernel tap, the (output_row, input_row) index pairs.

    For a fixed tap each output site has at most one neighbor, so both index
    arrays are duplicate-free within a tap.
    """
    _, _, h, w = sp.extents
    grid = sp.site_grid()
    r = (z - 1) // 2
    s0, h0, w0 = sp.coords[:, 0], sp.coords[:, 1], sp.coords[:, 2]
    rows = np.arange(sp.active_count)
    book = []
    for i in range(z):
        for j in range(z):
            hh, ww = h0 + i - r, w0 + j - r
            ok = (hh >= 0) & (hh < h) & (ww >= 0) & (ww < w)
            src = grid[s0[ok], hh[ok], ww[ok]]
            hit = src >= 0
            book.append((rows[ok][hit], src[hit]))
    return book


def submanifold_conv(sp: SparseFeatureMap, kernel: Tensor, bias: Tensor,
                     ledger: "FlopsLedger | None" = None,
                     layer: str = "subconv",
                     spec: ConvSpec | None = None) -> SparseFeatureMap:
    """Convolution evaluated at the active sites only.

    Output active set equals the input active set.  Ledger records
    ``a * m * n`` executed MACs per site (a = active in-window neighbors,
    the site itself included) against the ``z^2 * m * n`` dense cost at every
    location.
    """
    n_out, n_in, z, z2 = kernel.data.shape
    if spec is not None and (spec.kernel_size, spec.in_channels,
                             spec.out_channels) != (z, n_in, n_out):
        raise ShapeMismatch(f"kernel {kernel.data.shape} does not match {spec}")
    if z != z2 or z % 2 == 0:
        raise ShapeMismatch(f"kernel must be odd and square, got {z}x{z2}")
    c, s, h, w = sp.extents
    if c != n_in:
        raise ShapeMismatch(
            f"input channels C={c} do not match kernel in-channels m={n_in}")
    book = _rulebook(sp, z)
    feats = sp.features
    taps = z * z
    # gathered neighbor block: absent neighbors stay zero, then one GEMM
    cols = np.zeros((sp.active_count, taps, n_in))
    for tap, (dst, src) in enumerate(book):
        if dst.size:
            cols[dst, tap] = feats.data[src]
    cols = cols.reshape(sp.active_count, taps * n_in)
    kmat = kernel.data.reshape(n_out, n_in, taps).transpose(0, 2, 1).reshape(
        n_out, taps * n_in)
    out = cols @ kmat.T + bias.data
    if ledger is not None:
        pairs = sum(dst.size for dst, _ in book)
        ledger.add(layer, dense=taps * n_in * n_out * s * h * w,
                   executed=pairs * n_in * n_out)
    node = _node(out, (feats, kernel, bias), "submanifold_conv")

    def bwd(g):
        dk = (g.T @ cols).reshape(n_out, taps, n_in).transpose(0, 2, 1)
        _accum(kernel, dk.reshape(kernel.data.shape))
        _accum(bias, g.sum(axis=0))
        dcols = (g @ kmat).reshape(sp.active_count, taps, n_in)
        dfeat = np.zeros_like(feats.data)
        for tap, (dst, src) in enumerate(book):
            if dst.size:
                dfeat[src] += dcols[dst, tap]
        _accum(feats, dfeat)

    return SparseFeatureMap((n_out, s, h, w), sp.coords.copy(),
                            _finish(node, bwd))


def sparse_maxpool(sp: SparseFeatureMap) -> SparseFeatureMap:
    """2x2 stride-2 max over active sites only.

    A pooled site is active iff any covered input site is; inactive inputs do
    not compete in the max.  Odd extents pool as if padded high with inactive
    sites.  Ties go to the first site in row-major window order.
    """
    c, s, h, w = sp.extents
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    s0 = sp.coords[:, 0]
    ph, pw = sp.coords[:, 1] // 2, sp.coords[:, 2] // 2
    keys = (s0 * h2 + ph) * w2 + pw
    ukeys, inv = np.unique(keys, return_inverse=True)
    n_pooled = ukeys.size
    out_coords = np.stack([ukeys // (h2 * w2),
                           (ukeys % (h2 * w2)) // w2,
                           ukeys % w2], axis=1)
    slot = (sp.coords[:, 1] % 2) * 2 + (sp.coords[:, 2] % 2)
    vals = np.full((n_pooled, c), -np.inf)
    winner = np.zeros((n_pooled, c), dtype=np.int64)
    for k in range(4):  # row-major within the window; first strict max wins
        rows = np.nonzero(slot == k)[0]
        if not rows.size:
            continue
        cells = inv[rows]
        f = sp.features.data[rows]
        better = f > vals[cells]
        vals[cells] = np.where(better, f, vals[cells])
        winner[cells] = np.where(better, rows[:, None], winner[cells])
    node = _node(vals, (sp.features,), "sparse_maxpool")

    def bwd(g):
        dfeat = np.zeros_like(sp.features.data)
        cols = np.broadcast_to(np.arange(c), (n_pooled, c))
        np.add.at(dfeat, (winner, cols), g)
        _accum(sp.features, dfeat)

    return SparseFeatureMap((c, s, h2, w2), out_coords, _finish(node, bwd))


# ----------------------------------------------------------------------
# MAC ledger
# ----------------------------------------------------------------------

@dataclass
class LayerCost:
    dense: int = 0
    executed: int = 0


class FlopsLedger:
    """Per-layer tally of dense-equivalent vs actually-executed MACs."""

    def __init__(self):
        self._records: dict[str, LayerCost] = {}

    def add(self, layer: str, dense: int, executed: int) -> None:
        dense, executed = int(dense), int(executed)
        if dense < 0 or executed < 0:
            raise ValueError("MAC counts must be nonnegative")
        if executed > dense:
            raise ValueError(
                f"layer {layer!r}: executed {executed} exceeds dense {dense}")
        rec = self._records.setdefault(layer, LayerCost())
        rec.dense += dense
        rec.executed += executed

    def merge(self, other: "FlopsLedger") -> None:
        for layer, rec in other._records.items():
            self.add(layer, rec.dense, rec.executed)

    def records(self) -> dict[str, LayerCost]:
        return dict(self._records)

    def totals(self) -> tuple[int, int]:
        dense = sum(r.dense for r in self._records.values())
        executed = sum(r.executed for r in self._records.values())
        return dense, executed

    def fraction(self) -> float:
        dense, executed = self.totals()
        return executed / dense if dense else 1.0

    def subset(self, predicate) -> "FlopsLedger":
        out = FlopsLedger()
        for layer, rec in self._records.items():
            if predicate(layer):
                out.add(layer, rec.dense, rec.executed)
        return out


def flops_report(ledger: FlopsLedger) -> dict:
    """Totals per layer and overall, plus the executed/dense fraction."""
    layers = {
        layer: {"dense": rec.dense, "executed": rec.executed,
                "fraction": rec.executed / rec.dense if rec.dense else 1.0}
        for layer, rec in sorted(ledger.records().items())
    }
    dense, executed = ledger.totals()
    return {"layers": layers, "total_dense": dense, "total_executed": executed,
            "fraction": executed / dense if dense else 1.0}


def write_sparse_csv(sp: SparseFeatureMap, path) -> None:
    """Debug dump: extents header, then one `s,h,w,c0,...` line per site."""
    c = sp.extents[0]
    buf = io.StringIO()
    buf.write("C,S,H,W\n")
    buf.write(",".join(str(e) for e in sp.extents) + "\n")
    buf.write("s,h,w," + ",".join(f"c{i}" for i in range(c)) + "\n")
    for row, (s0, h0, w0) in enumerate(sp.coords):
        vals = ",".join(repr(float(v)) for v in sp.features.data[row])
        buf.write(f"{s0},{h0},{w0},{vals}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
