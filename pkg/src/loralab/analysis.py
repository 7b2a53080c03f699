"""Weight-space similarity analysis: conversion matrices and subspace overlap.

The similarity measure between matrices X and Y is

    phi(X, Y, i, j) = ||Ux_i^T Uy_j||_F^2 / min(i, j)

where Ux_i holds the top-i left (or right) singular vectors of X. phi is 1
for identical subspaces, 0 for orthogonal ones, and invariant to scaling of
either argument.

Conversion matrices relate a frozen square projection W0 to trained low-rank
factors: conv_A = W0^{-1} A^T and conv_B = W0^{-1} B, each d x r. Layer-wise
grids of phi between conversion matrices, together with a random-matrix
baseline grid of matching shape, quantify how much cross-layer structure a
trained adapter carries. Non-square W0 is rejected: a true inverse is
required, with an SVD pseudoinverse available only behind an explicit flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

from . import _rng, matcore
from .adapters import AdapterParams, AdapterSpec, adapter_factors, as_method, delta_w
from .matcore import ShapeError
from .model import BaseWeights

SIDES = ("left", "right")


def _basis(x: np.ndarray, count: int, side: str) -> np.ndarray:
    """Top ``count`` singular vectors as columns of an orthonormal matrix."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    x = matcore.as_matrix(x)
    available = min(x.shape)
    if not 1 <= count <= available:
        raise ValueError(
            f"requested {count} singular vectors, {x.shape[0]}x{x.shape[1]} has {available}"
        )
    result = matcore.svd(x)
    if side == "left":
        return result.u[:, :count]
    return result.vt[:count, :].T


def subspace_similarity(x, y, i: int, j: int, side: str = "left") -> float:
    """phi(X, Y, i, j) over top singular-vector subspaces; clamped to [0, 1]."""
    bx = _basis(x, i, side)
    by = _basis(y, j, side)
    if bx.shape[0] != by.shape[0]:
        raise ShapeError(
            f"{side} singular vectors live in different spaces: "
            f"dim {bx.shape[0]} vs {by.shape[0]}"
        )
    overlap = float(np.linalg.norm(bx.T @ by) ** 2) / min(i, j)
    if overlap > 1.0 + 1e-9 or overlap < -1e-9:
        raise matcore.NumericError(f"similarity {overlap} outside [0, 1] tolerance")
    return min(max(overlap, 0.0), 1.0)


def _conversion(w0: np.ndarray, rhs: np.ndarray, pseudoinverse: bool) -> np.ndarray:
    w0 = matcore.as_matrix(w0, "W0")
    if w0.shape[0] != w0.shape[1]:
        raise ShapeError(f"conversion requires square W0, got {w0.shape[0]}x{w0.shape[1]}")
    inv = matcore.pseudo_invert(w0) if pseudoinverse else matcore.invert(w0)
    return matcore.matmul(inv, rhs)


def conversion_a(w0, a, pseudoinverse: bool = False) -> np.ndarray:
    """W0^{-1} A^T, the map satisfying W0 @ result = A^T."""
    a = matcore.as_matrix(a, "A")
    return _conversion(w0, a.T, pseudoinverse)


def conversion_b(w0, b, pseudoinverse: bool = False) -> np.ndarray:
    """W0^{-1} B, the map satisfying W0 @ result = B."""
    b = matcore.as_matrix(b, "B")
    return _conversion(w0, b, pseudoinverse)


@dataclass
class SimilarityGrid:
    labels: list[str]
    values: np.ndarray
    side: str
    i: int
    j: int

    @property
    def average_offdiagonal(self) -> float:
        n = self.values.shape[0]
        if n < 2:
            return 0.0
        off = ~np.eye(n, dtype=bool)
        return float(self.values[off].mean())


def layer_similarity_grid(matrices, i: int, j: int, side: str = "left",
                          labels: list[str] | None = None) -> SimilarityGrid:
    """Pairwise phi over an ordered list of same-shape matrices."""
    mats = [matcore.as_matrix(m) for m in matrices]
    if len(mats) < 1:
        raise ValueError("need at least one matrix")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"grid matrices must share a shape: {shape} vs {m.shape}")
    bases = [_basis(m, i, side) for m in mats]
    bases_j = bases if i == j else [_basis(m, j, side) for m in mats]
    n = len(mats)
    values = np.empty((n, n))
    for p in range(n):
        for q in range(n):
            overlap = float(np.linalg.norm(bases[p].T @ bases_j[q]) ** 2) / min(i, j)
            values[p, q] = min(max(overlap, 0.0), 1.0)
    if labels is None:
        labels = [str(idx + 1) for idx in range(n)]
    return SimilarityGrid(list(labels), values, side, i, j)


def random_baseline_grid(rows: int, cols: int, n: int, i: int, j: int,
                         side: str = "left", seed: int = 0) -> SimilarityGrid:
    """Grid over n independent Gaussian rows x cols matrices."""
    if n < 2:
        raise ValueError(f"baseline grid needs n >= 2, got {n}")
    mats = [
        matcore.gaussian(rows, cols, 0.0, 1.0, _rng.derive_seed(seed, f"baseline.{idx}"))
        for idx in range(n)
    ]
    return layer_similarity_grid(mats, i, j, side)


def conversion_grid(weights: BaseWeights, params: AdapterParams, spec: AdapterSpec,
                    module: str, which: str, i: int | None = None, j: int | None = None,
                    side: str = "left", pseudoinverse: bool = False) -> SimilarityGrid:
    """Layer-pair grid of phi between one module's conversion matrices."""
    if which not in ("A", "B"):
        raise ValueError(f"which must be 'A' or 'B', got {which!r}")
    i = spec.rank if i is None else i
    j = spec.rank if j is None else j
    mats = []
    labels = []
    for layer in spec.target_layers:
        w0 = weights.projection(module, layer)
        a, b = adapter_factors(params, spec, w0, module, layer)
        if which == "A":
            mats.append(conversion_a(w0, a, pseudoinverse))
        else:
            mats.append(conversion_b(w0, b, pseudoinverse))
        labels.append(str(layer))
    return layer_similarity_grid(mats, i, j, side, labels)


@dataclass
class ComparisonRow:
    """phi between one layer's lora and condlora factors and deltas."""

    module: str
    layer: int
    phi_a: float
    phi_b: float
    phi_delta: float


def compare_lora_condlora(lora_params, cond_params, weights: BaseWeights,
                          spec: AdapterSpec) -> list[ComparisonRow]:
    """Per-target similarity rows: A on the right side, B and delta on the left."""
    lora_spec = as_method(spec, "lora")
    cond_spec = as_method(spec, "condlora")
    r = spec.rank
    rows = []
    for m, l in spec.targets():
        w0 = weights.projection(m, l)
        a_l, b_l = adapter_factors(lora_params, lora_spec, w0, m, l)
        a_c, b_c = adapter_factors(cond_params, cond_spec, w0, m, l)
        dw_l = delta_w(lora_params, lora_spec, w0, m, l)
        dw_c = delta_w(cond_params, cond_spec, w0, m, l)
        rows.append(
            ComparisonRow(
                module=m,
                layer=l,
                phi_a=subspace_similarity(a_l, a_c, r, r, side="right"),
                phi_b=subspace_similarity(b_l, b_c, r, r, side="left"),
                phi_delta=subspace_similarity(dw_l, dw_c, r, r, side="left"),
            )
        )
    return rows


# --- csv output ---------------------------------------------------------------

def write_grid_csv(fh: IO[str], grid: SimilarityGrid) -> None:
    fh.write("labels," + ",".join(grid.labels) + "\n")
    for label, row in zip(grid.labels, grid.values):
        fh.write(label + "," + ",".join(f"{v:.9f}" for v in row) + "\n")
    fh.write(
        f"# side={grid.side} i={grid.i} j={grid.j} "
        f"avg_offdiag={grid.average_offdiagonal:.9f}\n"
    )


def write_comparison_csv(fh: IO[str], rows: list[ComparisonRow]) -> None:
    fh.write("module,layer,phi_A,phi_B,phi_dW\n")
    for row in rows:
        fh.write(f"{row.module},{row.layer},{row.phi_a:.9f},{row.phi_b:.9f},{row.phi_delta:.9f}\n")
