"""Expression datasets, perturbation conditions and preprocessing.

The on-disk interchange formats are deliberately plain: expression matrices
are UTF-8 CSV with two leading metadata columns (cell_type, condition_id)
followed by one column per gene, and the condition registry is a JSON file
mapping condition_id to a tagged perturbation description. Molecule
embeddings may be inlined in the registry or joined from a separate CSV
keyed by molecule id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from .errors import InsufficientDataError, InvalidDataError

CONTROL_ID = "control"

META_COLUMNS = ("cell_type", "condition_id")


@dataclass(frozen=True)
class Control:
    kind: str = "control"


@dataclass(frozen=True)
class GeneKnockout:
    """Knockout of one or two distinct genes, identified by column index."""

    targets: tuple[int, ...]
    kind: str = "gene_knockout"

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if not 1 <= len(self.targets) <= 2:
            raise ValueError("gene knockout takes 1 or 2 targets")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("knockout targets must be distinct")


@dataclass(frozen=True)
class Molecule:
    """Small-molecule treatment: a fixed-length embedding plus a dose >= 0."""

    embedding: tuple[float, ...]
    dose: float
    kind: str = "molecule"

    def __post_init__(self):
        object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))
        object.__setattr__(self, "dose", float(self.dose))
        if self.dose < 0:
            raise ValueError("dose must be >= 0")
        if len(self.embedding) == 0:
            raise ValueError("molecule embedding must be non-empty")

    @property
    def embedding_array(self) -> np.ndarray:
        return np.asarray(self.embedding, dtype=np.float64)


PerturbationCondition = Union[Control, GeneKnockout, Molecule]


@dataclass
class ControlStats:
    """Per-gene mean and population std of the unperturbed group of one cell type."""

    cell_type: str
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma must be 1-D vectors of equal length")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be elementwise >= 0")


@dataclass
class ExpressionDataset:
    """cells x genes non-negative expression with per-cell metadata.

    ``conditions`` maps condition ids to their descriptions; ``condition_ids``
    assigns one id per cell. ``scale_max`` records the divisor applied by
    :func:`scale_unit` (1.0 while unscaled).
    """

    values: np.ndarray
    gene_names: list[str]
    cell_types: np.ndarray
    condition_ids: np.ndarray
    conditions: dict[str, PerturbationCondition]
    scale_max: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.cell_types = np.asarray(self.cell_types, dtype=object)
        self.condition_ids = np.asarray(self.condition_ids, dtype=object)
        self.gene_names = [str(g) for g in self.gene_names]
        if self.values.ndim != 2:
            raise InvalidDataError("expression values must be a 2-D matrix")
        n_cells, n_genes = self.values.shape
        if n_genes < 2:
            raise InvalidDataError("a dataset needs at least 2 genes")
        if len(self.gene_names) != n_genes:
            raise InvalidDataError("gene name count does not match matrix width")
        if len(set(self.gene_names)) != n_genes:
            raise InvalidDataError("gene names must be unique")
        if len(self.cell_types) != n_cells or len(self.condition_ids) != n_cells:
            raise InvalidDataError("per-cell metadata length does not match cell count")
        if np.any(self.values < 0):
            raise InvalidDataError("expression values must be non-negative")
        if float(self.scale_max) <= 0:
            raise InvalidDataError("scale_max must be positive")
        unknown = set(self.condition_ids) - set(self.conditions)
        if unknown:
            raise InvalidDataError(f"cells reference unknown conditions: {sorted(unknown)[:5]}")
        mol_dims = set()
        for cid, cond in self.conditions.items():
            if isinstance(cond, GeneKnockout):
                for t in cond.targets:
                    if not 0 <= t < n_genes:
                        raise InvalidDataError(f"condition '{cid}' targets gene index {t} out of range")
            elif isinstance(cond, Molecule):
                mol_dims.add(len(cond.embedding))
        if len(mol_dims) > 1:
            raise InvalidDataError(f"inconsistent molecule embedding dims: {sorted(mol_dims)}")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    @property
    def molecule_dim(self) -> Optional[int]:
        for cond in self.conditions.values():
            if isinstance(cond, Molecule):
                return len(cond.embedding)
        return None

    def cell_type_labels(self) -> list[str]:
        return sorted(set(self.cell_types))

    def condition_of(self, cell_index: int) -> PerturbationCondition:
        return self.conditions[self.condition_ids[cell_index]]

    def cells_where(self, cell_type: Optional[str] = None, condition_id: Optional[str] = None) -> np.ndarray:
        mask = np.ones(self.n_cells, dtype=bool)
        if cell_type is not None:
            mask &= self.cell_types == cell_type
        if condition_id is not None:
            mask &= self.condition_ids == condition_id
        return np.flatnonzero(mask)

    def subset_cells(self, indices: np.ndarray) -> "ExpressionDataset":
        # the full registry is kept: a condition's description is prediction
        # input, only its cells are split
        idx = np.asarray(indices)
        return ExpressionDataset(
            values=self.values[idx].copy(),
            gene_names=list(self.gene_names),
            cell_types=self.cell_types[idx].copy(),
            condition_ids=self.condition_ids[idx].copy(),
            conditions=dict(self.conditions),
            scale_max=self.scale_max,
        )


# ---------------------------------------------------------------------------
# preprocessing operations


def log1p_normalize(ds: ExpressionDataset) -> ExpressionDataset:
    """Replace every value v by ln(1 + v); zeros stay exactly zero."""
    if np.any(ds.values < 0):
        raise InvalidDataError("log1p requires non-negative expression")
    return replace(ds, values=np.log1p(ds.values))


def hvg_indices(values: np.ndarray, n_top: int) -> np.ndarray:
    """Column indices of the n_top highest-variance genes, ties to the lower
    index, returned in their original column order."""
    values = np.asarray(values, dtype=np.float64)
    n_genes = values.shape[1]
    if n_top <= 0:
        raise ValueError("n_top must be positive")
    if n_top > n_genes:
        raise ValueError(f"n_top={n_top} exceeds gene count {n_genes}")
    var = values.var(axis=0)
    order = np.lexsort((np.arange(n_genes), -var))
    return np.sort(order[:n_top])


def select_hvg(ds: ExpressionDataset, n_top: int) -> tuple[ExpressionDataset, np.ndarray]:
    """Keep the n_top genes with the largest variance across all cells.

    Ties break toward the lower gene index; surviving columns keep their
    original relative order (n_top >= 2, since datasets carry at least two
    genes). Knockout targets are remapped to the new indices; a condition
    whose target is dropped is invalid data.
    """
    kept = hvg_indices(ds.values, n_top)
    remap = {int(old): new for new, old in enumerate(kept)}
    conditions: dict[str, PerturbationCondition] = {}
    for cid, cond in ds.conditions.items():
        if isinstance(cond, GeneKnockout):
            missing = [t for t in cond.targets if t not in remap]
            if missing:
                raise InvalidDataError(
                    f"condition '{cid}' targets dropped gene index {missing[0]}"
                )
            conditions[cid] = GeneKnockout(tuple(remap[t] for t in cond.targets))
        else:
            conditions[cid] = cond
    out = ExpressionDataset(
        values=ds.values[:, kept].copy(),
        gene_names=[ds.gene_names[i] for i in kept],
        cell_types=ds.cell_types.copy(),
        condition_ids=ds.condition_ids.copy(),
        conditions=conditions,
        scale_max=ds.scale_max,
    )
    return out, kept


def scale_unit(ds: ExpressionDataset, x_max: float) -> ExpressionDataset:
    """Divide values by x_max and remember it; multiply back to invert."""
    if x_max <= 0:
        raise ValueError("x_max must be positive")
    return replace(ds, values=ds.values / x_max, scale_max=float(x_max))


def rescale(ds: ExpressionDataset) -> ExpressionDataset:
    """Invert :func:`scale_unit` (multiplication by the stored scale_max)."""
    return replace(ds, values=ds.values * ds.scale_max, scale_max=1.0)


def control_stats(ds: ExpressionDataset, cell_type: str) -> ControlStats:
    idx = ds.cells_where(cell_type=cell_type, condition_id=CONTROL_ID)
    if len(idx) < 2:
        raise InsufficientDataError(
            f"need >= 2 control cells of type '{cell_type}', found {len(idx)}"
        )
    sub = ds.values[idx]
    return ControlStats(cell_type=cell_type, mu=sub.mean(axis=0), sigma=sub.std(axis=0))


def noisy_control(stats: ControlStats, rng: np.random.Generator) -> np.ndarray:
    """mu + sigma * eps with eps ~ N(0, I); never clamped."""
    return stats.mu + stats.sigma * rng.standard_normal(stats.mu.shape[0])


# ---------------------------------------------------------------------------
# on-disk formats


def save_expression_csv(ds: ExpressionDataset, path) -> None:
    frame = pd.DataFrame(ds.values, columns=ds.gene_names)
    frame.insert(0, "condition_id", ds.condition_ids)
    frame.insert(0, "cell_type", ds.cell_types)
    frame.to_csv(path, index=False)


def load_expression_csv(path, conditions: dict[str, PerturbationCondition],
                        scale_max: float = 1.0) -> ExpressionDataset:
    frame = pd.read_csv(path)
    for col in META_COLUMNS:
        if col not in frame.columns:
            raise InvalidDataError(f"{path}: missing required column '{col}'")
    gene_names = [c for c in frame.columns if c not in META_COLUMNS]
    values = frame[gene_names].to_numpy(dtype=np.float64)
    return ExpressionDataset(
        values=values,
        gene_names=gene_names,
        cell_types=frame["cell_type"].astype(str).to_numpy(dtype=object),
        condition_ids=frame["condition_id"].astype(str).to_numpy(dtype=object),
        conditions=conditions,
        scale_max=scale_max,
    )


def condition_to_dict(cond: PerturbationCondition) -> dict:
    if isinstance(cond, Control):
        return {"type": "control"}
    if isinstance(cond, GeneKnockout):
        return {"type": "gene_knockout", "targets": list(cond.targets)}
    if isinstance(cond, Molecule):
        return {"type": "molecule", "dose": cond.dose, "embedding": list(cond.embedding)}
    raise TypeError(f"unknown condition type {type(cond)!r}")


def condition_from_dict(entry: dict, molecule_embeddings: Optional[dict[str, np.ndarray]] = None) -> PerturbationCondition:
    kind = entry.get("type")
    if kind == "control":
        return Control()
    if kind == "gene_knockout":
        return GeneKnockout(tuple(entry["targets"]))
    if kind == "molecule":
        if "embedding" in entry:
            emb = entry["embedding"]
        elif "molecule_id" in entry:
            if not molecule_embeddings or entry["molecule_id"] not in molecule_embeddings:
                raise InvalidDataError(
                    f"molecule id '{entry.get('molecule_id')}' has no embedding; "
                    "pass a molecule embeddings CSV"
                )
            emb = molecule_embeddings[entry["molecule_id"]]
        else:
            raise InvalidDataError("molecule condition needs 'embedding' or 'molecule_id'")
        return Molecule(tuple(np.asarray(emb, dtype=float)), dose=entry.get("dose", 0.0))
    raise InvalidDataError(f"unknown condition type '{kind}'")


def save_conditions_json(conditions: dict[str, PerturbationCondition], path) -> None:
    payload = {cid: condition_to_dict(cond) for cid, cond in sorted(conditions.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_conditions_json(path, molecule_embeddings_csv=None) -> dict[str, PerturbationCondition]:
    payload = json.loads(Path(path).read_text())
    embeddings = None
    if molecule_embeddings_csv is not None:
        embeddings = load_molecule_embeddings_csv(molecule_embeddings_csv)
    return {cid: condition_from_dict(entry, embeddings) for cid, entry in payload.items()}


def load_molecule_embeddings_csv(path) -> dict[str, np.ndarray]:
    """CSV with a leading molecule_id column followed by embedding columns."""
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise InvalidDataError(f"{path}: molecule embeddings need id + feature columns")
    id_col = frame.columns[0]
    out = {}
    for _, row in frame.iterrows():
        out[str(row[id_col])] = row.iloc[1:].to_numpy(dtype=np.float64)
    return out


def save_matrix_csv(matrix: np.ndarray, path, fmt: str = "%.17g") -> None:
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt=fmt)


def load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
