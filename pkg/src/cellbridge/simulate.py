"""Synthetic perturbation benchmark generator with known ground truth.

Genes are organized into co-regulated modules driven by shared lognormal
activities, which makes the true regulatory structure recoverable from
co-expression. Perturbations act through that structure: knocking out a
gene suppresses it to a small residual (CRISPRi-style knockdown) and
shifts its module partners, molecules scale a target module up or down as
a function of dose, and each module carries one designated fragile gene
whose expression drops to exactly zero in any condition hitting the
module — these fragile genes form the deterministic per-condition silent
sets. Designated heterogeneous genes respond stochastically per cell
(probability p_resp lands in a high mode, otherwise the control mode),
producing bimodal marginals under affected conditions. Control and
perturbed cells are always drawn independently — there is no hidden
pairing to recover.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CONTROL_ID, Control, ExpressionDataset, GeneKnockout, Molecule
from .errors import InvalidDataError


@dataclass
class SimulatorConfig:
    n_genes: int = 40
    n_cell_types: int = 2
    n_knockout_conditions: int = 15
    n_molecule_conditions: int = 8
    cells_per_condition: int = 150
    control_cells_per_type: int = 200
    module_size: int = 5
    molecule_embedding_dim: int = 16
    bimodal_fraction: float = 0.25
    sparsity: float = 0.08
    base_off_fraction: float = 0.0
    p_resp: float = 0.5
    knockout_partner_scale: float = 0.35
    knockdown_residual: float = 0.02
    bimodal_high_scale: float = 5.0
    mol_effect_scale: float = 0.8
    doses: tuple = (0.1, 1.0)
    module_activity_sigma: float = 0.8
    gene_noise_sigma: float = 0.1

    def __post_init__(self):
        self.doses = tuple(float(d) for d in self.doses)
        if self.n_genes < 4 or self.module_size < 2:
            raise ValueError("need n_genes >= 4 and module_size >= 2")
        if self.n_cell_types < 1 or self.cells_per_condition < 2:
            raise ValueError("need >= 1 cell type and >= 2 cells per condition")
        if not 0 <= self.sparsity < 1 or not 0 < self.p_resp <= 1:
            raise ValueError("sparsity in [0, 1), p_resp in (0, 1]")
        if self.molecule_embedding_dim < self.n_modules + 2:
            raise ValueError("molecule embedding dim too small for the module code")

    @property
    def n_modules(self) -> int:
        return int(np.ceil(self.n_genes / self.module_size))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_json(path) -> "SimulatorConfig":
        payload = json.loads(Path(path).read_text())
        return SimulatorConfig(**payload)


@dataclass
class SyntheticTruth:
    """Ground truth for verification: structure, silencing, per-condition rules."""

    true_grn: np.ndarray
    silent_sets: dict[str, list[int]]  # key: "<cell_type>|<condition_id>"
    response_rules: dict[str, dict[int, dict]]  # condition_id -> gene -> rule
    bimodal_genes: list[int]
    modules: list[int]
    fragile_genes: list[int] = field(default_factory=list)

    def silent_set(self, cell_type: str, condition_id: str) -> set[int]:
        return set(self.silent_sets.get(f"{cell_type}|{condition_id}", []))

    def to_json(self, path) -> None:
        payload = {
            "true_grn": self.true_grn.astype(int).tolist(),
            "silent_sets": {k: sorted(v) for k, v in sorted(self.silent_sets.items())},
            "response_rules": {
                cid: {str(g): rule for g, rule in sorted(rules.items())}
                for cid, rules in sorted(self.response_rules.items())
            },
            "bimodal_genes": sorted(self.bimodal_genes),
            "modules": list(self.modules),
            "fragile_genes": sorted(self.fragile_genes),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_json(path) -> "SyntheticTruth":
        payload = json.loads(Path(path).read_text())
        return SyntheticTruth(
            true_grn=np.asarray(payload["true_grn"], dtype=np.int64),
            silent_sets={k: list(v) for k, v in payload["silent_sets"].items()},
            response_rules={
                cid: {int(g): rule for g, rule in rules.items()}
                for cid, rules in payload["response_rules"].items()
            },
            bimodal_genes=list(payload["bimodal_genes"]),
            modules=list(payload["modules"]),
            fragile_genes=list(payload.get("fragile_genes", [])),
        )


def bimodal_mixture(rng: np.random.Generator, low: np.ndarray, high: np.ndarray,
                    p_resp: float) -> np.ndarray:
    """Each entry takes its high value with probability p_resp, else its low value."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    respond = rng.uniform(size=low.shape) < p_resp
    return np.where(respond, high, low)


def _draw_block(
    rng: np.random.Generator,
    n_cells: int,
    cfg: SimulatorConfig,
    modules: np.ndarray,
    basal: np.ndarray,  # [N] for this cell type
    dropout: np.ndarray,  # [N]
    silent: set[int],
    rules: dict[int, dict],
) -> np.ndarray:
    n = cfg.n_genes
    activity = np.exp(rng.normal(0.0, cfg.module_activity_sigma, size=(n_cells, cfg.n_modules)))
    noise = np.exp(rng.normal(0.0, cfg.gene_noise_sigma, size=(n_cells, n)))
    resp_u = rng.uniform(size=(n_cells, n))
    high_noise = np.exp(rng.normal(0.0, 0.1, size=(n_cells, n)))
    drop_u = rng.uniform(size=(n_cells, n))

    mean = basal.copy()
    for g, rule in rules.items():
        if rule["kind"] == "scale":
            mean[g] *= rule["factor"]
    values = activity[:, modules] * mean[None, :] * noise

    for g, rule in rules.items():
        if rule["kind"] == "bimodal":
            responding = resp_u[:, g] < rule["p_resp"]
            values[:, g] = np.where(responding, rule["high"] * high_noise[:, g], values[:, g])

    values[drop_u < dropout[None, :]] = 0.0
    if silent:
        values[:, sorted(silent)] = 0.0
    return values


def simulate_dataset(cfg: SimulatorConfig, rng: np.random.Generator) -> tuple[ExpressionDataset, SyntheticTruth]:
    """Generate an unpaired control/perturbed expression dataset plus its truth."""
    n = cfg.n_genes
    modules = np.minimum(np.arange(n) // cfg.module_size, cfg.n_modules - 1)
    gene_names = [f"G{i:03d}" for i in range(n)]
    cell_types = [f"ct{i}" for i in range(cfg.n_cell_types)]

    true_grn = (modules[:, None] == modules[None, :]).astype(np.int64)

    # one heterogeneous (bimodal-capable) gene per module, then extras
    n_bimodal = int(round(cfg.bimodal_fraction * n))
    bimodal: list[int] = []
    for m in range(cfg.n_modules):
        members = np.flatnonzero(modules == m)
        bimodal.append(int(rng.choice(members)))
    others = np.setdiff1d(np.arange(n), bimodal)
    extra = max(0, n_bimodal - len(bimodal))
    if extra > 0:
        bimodal.extend(int(g) for g in rng.choice(others, size=extra, replace=False))
    bimodal = sorted(set(bimodal))
    non_bimodal = np.setdiff1d(np.arange(n), bimodal)

    # one fragile gene per module: silenced outright whenever its module is hit
    fragile: list[int] = []
    for m in range(cfg.n_modules):
        candidates = np.setdiff1d(np.flatnonzero(modules == m), bimodal)
        if len(candidates) > 0:
            fragile.append(int(rng.choice(candidates)))
    fragile_by_module = {int(modules[g]): g for g in fragile}

    # always-off genes per cell type (shared core + per-type extras)
    n_off = int(round(cfg.base_off_fraction * n))
    n_shared = max(0, int(round(0.6 * n_off)))
    off_pool = np.setdiff1d(non_bimodal, fragile)
    shared_off = rng.choice(off_pool, size=min(n_shared, len(off_pool)), replace=False)
    base_off: dict[str, set[int]] = {}
    pool = np.setdiff1d(off_pool, shared_off)
    for ct in cell_types:
        extra_off = rng.choice(pool, size=min(max(0, n_off - len(shared_off)), len(pool)), replace=False)
        base_off[ct] = set(int(g) for g in shared_off) | set(int(g) for g in extra_off)

    off_anywhere = set().union(*base_off.values()) if base_off else set()
    eligible_targets = [int(g) for g in non_bimodal
                        if int(g) not in off_anywhere and int(g) not in fragile]
    if len(eligible_targets) < cfg.n_knockout_conditions:
        raise InvalidDataError(
            f"only {len(eligible_targets)} eligible knockout targets for "
            f"{cfg.n_knockout_conditions} conditions; lower base_off/bimodal fractions"
        )

    basal = np.where(np.isin(np.arange(n), bimodal),
                     rng.uniform(0.4, 1.0, size=n), rng.uniform(1.0, 4.0, size=n))
    type_factor = {ct: rng.uniform(0.8, 1.25, size=n) for ct in cell_types}
    dropout = np.where(np.isin(np.arange(n), bimodal),
                       rng.uniform(0.0, 0.05, size=n), rng.uniform(0.0, cfg.sparsity, size=n))

    conditions = {CONTROL_ID: Control()}
    response_rules: dict[str, dict[int, dict]] = {}
    silent_sets: dict[str, list[int]] = {}

    def module_rules(affected: np.ndarray, factor: float) -> dict[int, dict]:
        rules: dict[int, dict] = {}
        for g in affected:
            g = int(g)
            if g in bimodal:
                rules[g] = {"kind": "bimodal", "p_resp": cfg.p_resp,
                            "high": float(basal[g] * cfg.bimodal_high_scale)}
            else:
                rules[g] = {"kind": "scale", "factor": float(factor)}
        return rules

    # spread perturbations round-robin over modules so every module's
    # response machinery appears in training even after a condition holdout
    hit_module: dict[str, int] = {}
    pools = {m: [g for g in eligible_targets if modules[g] == m] for m in range(cfg.n_modules)}
    targets: list[int] = []
    cursor = 0
    while len(targets) < cfg.n_knockout_conditions:
        pool = pools[cursor % cfg.n_modules]
        if pool:
            pick = int(rng.choice(pool))
            pool.remove(pick)
            targets.append(pick)
        cursor += 1
    for k in targets:
        k = int(k)
        cid = f"ko_{gene_names[k]}"
        conditions[cid] = GeneKnockout((k,))
        hit_module[cid] = int(modules[k])
        partners = np.setdiff1d(np.flatnonzero(modules == modules[k]),
                                [k, fragile_by_module.get(int(modules[k]), -1)])
        rules = module_rules(partners, cfg.knockout_partner_scale)
        # CRISPRi-style knockdown: residual target expression, not an exact zero
        rules[k] = {"kind": "scale", "factor": float(cfg.knockdown_residual)}
        response_rules[cid] = rules

    for j in range(cfg.n_molecule_conditions):
        m_star = j % cfg.n_modules
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        dose = float(cfg.doses[int(rng.integers(len(cfg.doses)))])
        factor = float(np.exp(direction * cfg.mol_effect_scale * np.log1p(dose) / np.log(2.0)))
        emb = np.zeros(cfg.molecule_embedding_dim)
        emb[:cfg.n_modules] = 0.05 * rng.standard_normal(cfg.n_modules)
        emb[m_star] += 1.0
        emb[cfg.n_modules] = direction
        emb[cfg.n_modules + 1:] = 0.3 * rng.standard_normal(cfg.molecule_embedding_dim - cfg.n_modules - 1)
        cid = f"mol_{j:02d}"
        conditions[cid] = Molecule(tuple(emb), dose=dose)
        hit_module[cid] = m_star
        affected = np.setdiff1d(np.flatnonzero(modules == m_star),
                                [fragile_by_module.get(m_star, -1)])
        response_rules[cid] = module_rules(affected, factor)

    values_blocks: list[np.ndarray] = []
    ct_blocks: list[np.ndarray] = []
    cond_blocks: list[np.ndarray] = []
    per_type = {cid: cfg.cells_per_condition // cfg.n_cell_types for cid in conditions if cid != CONTROL_ID}

    for ct in cell_types:
        for cid in sorted(conditions):
            if cid == CONTROL_ID:
                n_cells = cfg.control_cells_per_type
                rules: dict[int, dict] = {}
                silent = set(base_off[ct])
            else:
                n_cells = per_type[cid]
                rules = response_rules[cid]
                silent = set(base_off[ct])
                frag = fragile_by_module.get(hit_module[cid])
                if frag is not None:
                    silent.add(int(frag))
            silent_sets[f"{ct}|{cid}"] = sorted(silent)
            block = _draw_block(rng, n_cells, cfg, modules, basal * type_factor[ct],
                                dropout, silent, rules)
            values_blocks.append(block)
            ct_blocks.append(np.full(n_cells, ct, dtype=object))
            cond_blocks.append(np.full(n_cells, cid, dtype=object))

    ds = ExpressionDataset(
        values=np.concatenate(values_blocks, axis=0),
        gene_names=gene_names,
        cell_types=np.concatenate(ct_blocks),
        condition_ids=np.concatenate(cond_blocks),
        conditions=conditions,
    )
    truth = SyntheticTruth(
        true_grn=true_grn,
        silent_sets=silent_sets,
        response_rules=response_rules,
        bimodal_genes=bimodal,
        modules=[int(m) for m in modules],
        fragile_genes=sorted(fragile),
    )
    return ds, truth
