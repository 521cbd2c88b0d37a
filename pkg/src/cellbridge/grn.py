"""Binary gene-gene adjacency from co-expression plus an optional prior.

An edge appears where |pearson(i, j)| clears the threshold; elsewhere the
prior entry (default 0) is used. Self-loops are always forced so attention
neighborhoods are never empty. The co-expression branch is symmetric by
construction; a prior may be asymmetric and is used entrywise as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError


@dataclass
class Grn:
    adjacency: np.ndarray  # [N, N] with entries in {0, 1}
    includes_self_loops: bool = True

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        self.adjacency = a.astype(np.int64)

    @property
    def n_genes(self) -> int:
        return self.adjacency.shape[0]


def pearson_matrix(values: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations across gene columns.

    Genes with zero variance get correlation 0 everywhere, including on
    the diagonal, so degenerate columns never create edges.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise InsufficientDataError("pearson_matrix needs >= 2 cells")
    # a column is constant iff max == min; centering noise must not leak edges
    constant = values.max(axis=0) == values.min(axis=0)
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered * centered).sum(axis=0))
    safe = np.where(constant | (norms == 0.0), 1.0, norms)
    constant = constant | (norms == 0.0)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, np.where(constant, 0.0, 1.0))
    return corr


def build_grn(pcc: np.ndarray, prior: "np.ndarray | None" = None, eps_co: float = 0.3) -> Grn:
    """Threshold |pcc| >= eps_co, fall back to the prior, force self-loops."""
    pcc = np.asarray(pcc, dtype=np.float64)
    n = pcc.shape[0]
    if pcc.ndim != 2 or pcc.shape != (n, n):
        raise ValueError("pcc must be a square matrix")
    if not 0.0 < eps_co <= 1.0:
        raise ValueError("eps_co must be in (0, 1]")
    if prior is None:
        prior = np.zeros((n, n), dtype=np.int64)
    else:
        prior = np.asarray(prior)
        if prior.shape != (n, n):
            raise ValueError("prior shape does not match pcc")
        if not np.isin(prior, (0, 1)).all():
            raise ValueError("prior entries must be 0 or 1")
        prior = prior.astype(np.int64)
    adjacency = np.where(np.abs(pcc) >= eps_co, 1, prior).astype(np.int64)
    np.fill_diagonal(adjacency, 1)
    return Grn(adjacency=adjacency)
