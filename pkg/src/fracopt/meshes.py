"""Tensor-product meshes of the truncated cylinder (0,1)^n x (0,Y).

The base domain carries a uniform partition into intervals (n=1) or squares
(n=2); the extended direction carries the graded partition
y_k = (k/M)^gamma * Y whose small first layers compensate the y -> 0 blowup
of second derivatives.  Degrees of freedom are numbered layer-major so the
trace at y=0 is the leading contiguous block of the free unknowns.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .spectral import ConfigurationError

__all__ = [
    "BasePartition",
    "GradedPartition",
    "MeshRegularityReport",
    "TensorMesh",
    "balanced_resolution",
    "choose_truncation",
    "default_grading",
    "first_eigenvalue",
    "make_graded_partition",
    "make_tensor_mesh",
    "regularity_report",
]


def first_eigenvalue(n: int, c: float = 0.0) -> float:
    """Smallest Dirichlet eigenvalue on (0,1)^n: n*pi^2 (+ shift c)."""
    if n not in (1, 2):
        raise ConfigurationError(f"dimension n must be 1 or 2, got {n}")
    return n * math.pi**2 + c


def default_grading(s: float) -> float:
    # strict inequality gamma > 3/(2s) required; 0.1 is the chosen offset
    return 3.0 / (2.0 * s) + 0.1


class BasePartition:
    """Uniform structured partition of (0,1)^n, n in {1, 2}."""

    def __init__(self, n: int, cells_per_side: int):
        if n not in (1, 2):
            raise ConfigurationError(f"dimension n must be 1 or 2, got {n}")
        if cells_per_side < 1:
            raise ConfigurationError(f"cells_per_side must be >= 1, got {cells_per_side}")
        self.n = n
        self.cells_per_side = cells_per_side
        self.h = 1.0 / cells_per_side

        N = cells_per_side
        grid = np.arange(N + 1) / N
        if n == 1:
            self.node_coords = grid[:, None].copy()
            interior = (np.arange(N + 1) > 0) & (np.arange(N + 1) < N)
            self.cells = np.stack([np.arange(N), np.arange(N) + 1], axis=1)
            self.cell_origins = grid[:-1][:, None].copy()
        else:
            xi, xj = np.meshgrid(grid, grid, indexing="xy")  # node idx = j*(N+1)+i
            self.node_coords = np.stack([xi.ravel(), xj.ravel()], axis=1)
            ii, jj = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="xy")
            onbnd = (ii.ravel() == 0) | (ii.ravel() == N) | (jj.ravel() == 0) | (jj.ravel() == N)
            interior = ~onbnd
            ci, cj = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
            ci, cj = ci.ravel(), cj.ravel()
            sw = cj * (N + 1) + ci
            # corner order (00, 10, 01, 11) matches the bilinear shape functions
            self.cells = np.stack([sw, sw + 1, sw + (N + 1), sw + (N + 2)], axis=1)
            self.cell_origins = np.stack([ci / N, cj / N], axis=1)
        self.interior_mask = interior
        self.interior_nodes = np.flatnonzero(interior)
        self.n_nodes = len(self.node_coords)
        self.n_interior = len(self.interior_nodes)
        self.n_cells = len(self.cells)
        self.cell_volume = self.h**self.n


class GradedPartition:
    """Partition of [0, Y] with nodes y_k = (k/M)^gamma * Y."""

    def __init__(self, M: int, gamma: float, Y: float):
        if M < 1:
            raise ConfigurationError(f"number of intervals M must be >= 1, got {M}")
        if Y <= 0.0:
            raise ConfigurationError(f"truncation height Y must be > 0, got {Y}")
        if gamma < 1.0:
            raise ConfigurationError(f"grading exponent must be >= 1, got {gamma}")
        self.M = M
        self.gamma = gamma
        self.Y = Y
        self.nodes = Y * (np.arange(M + 1) / M) ** gamma
        self.widths = np.diff(self.nodes)
        assert np.all(self.widths > 0.0)

    def sigma(self) -> float:
        """Largest ratio of widths of neighboring intervals."""
        if self.M == 1:
            return 1.0
        r = self.widths[1:] / self.widths[:-1]
        return float(max(r.max(), (1.0 / r).max()))


def make_graded_partition(M: int, gamma: float, Y: float, s: float | None = None) -> GradedPartition:
    """Build the graded partition; warns if gamma is too weak for the given s."""
    part = GradedPartition(M, gamma, Y)
    if s is not None and gamma <= 3.0 / (2.0 * s):
        warnings.warn(
            f"grading gamma={gamma:.3g} does not exceed 3/(2s)={3/(2*s):.3g}; "
            "the graded-mesh convergence rate is not guaranteed",
            stacklevel=2,
        )
    return part


class TensorMesh:
    """Tensor product of a base partition and a graded interval partition.

    Global node index = layer * (#base nodes) + base index (layer-major).
    Dirichlet nodes: lateral boundary (boundary base nodes, every layer) and
    the full top layer y = Y.  Free nodes are therefore the interior base
    nodes on layers 0..M-1, and the trace unknowns at y=0 occupy the slice
    [0 : n_trace] of the free vector.
    """

    def __init__(self, base: BasePartition, extended: GradedPartition):
        self.base = base
        self.extended = extended
        nb, M = base.n_nodes, extended.M
        self.n_nodes = nb * (M + 1)
        self.n_cells = base.n_cells * M

        layer_dirichlet = np.tile(~base.interior_mask, M + 1)
        layer_dirichlet[M * nb :] = True  # top layer y = Y
        self.dirichlet_mask = layer_dirichlet
        self.free_nodes = np.flatnonzero(~layer_dirichlet)
        self.n_free = len(self.free_nodes)
        self.n_trace = base.n_interior
        self.global_to_free = np.full(self.n_nodes, -1, dtype=int)
        self.global_to_free[self.free_nodes] = np.arange(self.n_free)

    @property
    def n(self) -> int:
        return self.base.n

    def node_coordinates(self) -> np.ndarray:
        """(n_nodes, n+1) array of (x', y) per global node."""
        nb = self.base.n_nodes
        xs = np.tile(self.base.node_coords, (self.extended.M + 1, 1))
        ys = np.repeat(self.extended.nodes, nb)
        return np.column_stack([xs, ys])

    def summary(self) -> dict:
        return {
            "n": self.base.n,
            "cells_per_side": self.base.cells_per_side,
            "M": self.extended.M,
            "gamma": self.extended.gamma,
            "Y": self.extended.Y,
            "n_cells": self.n_cells,
            "n_nodes": self.n_nodes,
            "n_free_dofs": self.n_free,
            "n_trace_dofs": self.n_trace,
            "sigma_Y": self.extended.sigma(),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def make_tensor_mesh(base: BasePartition, extended: GradedPartition) -> TensorMesh:
    return TensorMesh(base, extended)


@dataclass(frozen=True)
class MeshRegularityReport:
    sigma_Y: float
    gamma: float
    gamma_min: float
    gamma_ok: bool


def regularity_report(mesh: TensorMesh, s: float) -> MeshRegularityReport:
    """Neighbor width ratio sigma_Y and whether gamma > 3/(2s) holds strictly."""
    gamma_min = 3.0 / (2.0 * s)
    gamma = mesh.extended.gamma
    return MeshRegularityReport(
        sigma_Y=mesh.extended.sigma(),
        gamma=gamma,
        gamma_min=gamma_min,
        gamma_ok=gamma > gamma_min,
    )


def balanced_resolution(target_dofs: int, n: int) -> Tuple[int, int]:
    """Pick (cells_per_side, M) with M^(n+1) ~ target, balancing base and layers."""
    if n not in (1, 2):
        raise ConfigurationError(f"dimension n must be 1 or 2, got {n}")
    if target_dofs < 2 ** (n + 1):
        raise ConfigurationError(f"target_dofs must be >= {2**(n+1)} for n={n}")
    M = max(1, round(target_dofs ** (1.0 / (n + 1))))
    return M, M


def choose_truncation(s: float, lambda1: float, target_dofs: int, n: int) -> float:
    """Truncation height growing like log(#cells), never below 1.

    Y = max(1, (4/sqrt(lambda1)) * ((1+s)/(n+1)) * log(target)) makes the
    exp(-sqrt(lambda1) Y / 4) truncation error decay at least as fast as the
    target^(-(1+s)/(n+1)) discretization error.
    """
    if target_dofs < 2:
        raise ConfigurationError(f"target_dofs must be >= 2, got {target_dofs}")
    if lambda1 <= 0.0:
        raise ConfigurationError(f"lambda1 must be positive, got {lambda1}")
    Y = (4.0 / math.sqrt(lambda1)) * ((1.0 + s) / (n + 1)) * math.log(target_dofs)
    return max(1.0, Y)
