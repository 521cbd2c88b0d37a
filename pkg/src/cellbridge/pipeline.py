"""End-to-end orchestration: splits, preprocessing, training runs, prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, SplitSpec
from .data import (CONTROL_ID, Control, ControlStats, ExpressionDataset, Molecule,
                   control_stats, log1p_normalize, scale_unit, select_hvg)
from .denoiser import Denoiser, predict, train_step
from .diffusion import SamplerConfig, make_schedule
from .errors import InsufficientDataError, InvalidDataError
from .grn import Grn, build_grn, pearson_matrix
from .maskmodel import MaskModel, mask_train_step
from .nn.optim import Adam

log = logging.getLogger("cellbridge")


def make_split(ds: ExpressionDataset, spec: SplitSpec) -> tuple[ExpressionDataset, ExpressionDataset]:
    """Condition-level split; control cells always land in the training side."""
    perturbed_ids = sorted(cid for cid in ds.conditions if cid != CONTROL_ID)
    if len(perturbed_ids) < 2:
        raise ValueError("need at least 2 perturbation conditions to split")

    if spec.mode == "holdout_perturbations":
        rng = np.random.default_rng(spec.seed)
        order = rng.permutation(len(perturbed_ids))
        n_train = int(round(spec.fraction * len(perturbed_ids)))
        n_train = min(max(n_train, 1), len(perturbed_ids) - 1)
        train_ids = {perturbed_ids[i] for i in order[:n_train]}
        test_ids = set(perturbed_ids) - train_ids
    elif spec.mode == "holdout_ood_list":
        test_ids = set(spec.ood_ids)
        unknown = test_ids - set(perturbed_ids)
        if unknown:
            raise ValueError(f"held-out conditions not in dataset: {sorted(unknown)}")
        train_ids = set(perturbed_ids) - test_ids
        if not train_ids:
            raise ValueError("holdout list leaves no training conditions")
    else:  # holdout_doses
        test_ids = {
            cid for cid in perturbed_ids
            if isinstance(ds.conditions[cid], Molecule)
            and any(np.isclose(ds.conditions[cid].dose, d) for d in spec.doses)
        }
        if not test_ids:
            raise ValueError("no molecule condition matches the held-out doses")
        train_ids = set(perturbed_ids) - test_ids
        if not train_ids:
            raise ValueError("dose holdout leaves no training conditions")

    is_test = np.isin(ds.condition_ids, sorted(test_ids))
    train = ds.subset_cells(np.flatnonzero(~is_test))
    test = ds.subset_cells(np.flatnonzero(is_test))
    return train, test


def compute_x_max(train: ExpressionDataset, test: ExpressionDataset, source: str) -> float:
    if source == "train":
        value = train.values.max()
    elif source == "test":
        value = test.values.max()
    elif source == "all":
        value = max(train.values.max(), test.values.max())
    else:
        raise ValueError(f"unknown scale source '{source}'")
    if value <= 0:
        raise InvalidDataError("cannot scale a dataset whose maximum is 0")
    return float(value)


@dataclass
class PreprocessResult:
    train: ExpressionDataset  # log1p scale, not unit-scaled
    test: ExpressionDataset
    x_max: float
    kept_genes: np.ndarray


def preprocess(ds: ExpressionDataset, n_top: int, split: SplitSpec,
               scale_source: str = "train") -> PreprocessResult:
    """log1p -> HVG selection -> split -> scaling constant."""
    logged = log1p_normalize(ds)
    reduced, kept = select_hvg(logged, n_top)
    train, test = make_split(reduced, split)
    x_max = compute_x_max(train, test, scale_source)
    return PreprocessResult(train=train, test=test, x_max=x_max, kept_genes=kept)


def grn_from_dataset(ds: ExpressionDataset, eps_co: float,
                     prior: Optional[np.ndarray] = None) -> Grn:
    return build_grn(pearson_matrix(ds.values), prior, eps_co)


def _control_stats_by_type(scaled: ExpressionDataset) -> dict[str, ControlStats]:
    stats = {}
    for ct in scaled.cell_type_labels():
        try:
            stats[ct] = control_stats(scaled, ct)
        except InsufficientDataError:
            continue
    return stats


def _sample_batch(scaled: ExpressionDataset, rng: np.random.Generator, batch: int) -> dict:
    idx = rng.integers(0, scaled.n_cells, size=batch)
    return {
        "x0": scaled.values[idx],
        "cell_types": [scaled.cell_types[i] for i in idx],
        "conditions": [scaled.condition_of(i) for i in idx],
    }


def _cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    if total <= 1:
        return base
    frac = step / (total - 1)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def fit_denoiser(train: ExpressionDataset, grn: Grn, config: RunConfig, x_max: float,
                 rng: np.random.Generator, log_every: int = 200) -> Denoiser:
    """Train the unified source/target denoiser on a log1p-scale dataset."""
    scaled = scale_unit(train, x_max)
    stats = _control_stats_by_type(scaled) if not config.no_ctrl_stats else None
    model = Denoiser(
        n_genes=scaled.n_genes,
        cell_types=scaled.cell_type_labels(),
        T=config.T,
        emb_dim=config.D,
        block_dim=config.D_B,
        n_heads=config.H,
        n_gat_layers=config.L,
        molecule_dim=scaled.molecule_dim,
        rng=rng,
    )
    opt = Adam(model.parameters(), lr=config.lr)
    sched = make_schedule(config.T)
    for step in range(config.train_steps):
        opt.state.lr = _cosine_lr(config.lr, step, config.train_steps)
        batch = _sample_batch(scaled, rng, config.batch)
        loss = train_step(model, batch, sched, rng, opt, grn.adjacency, stats=stats,
                          no_grn=config.no_grn, no_ctrl_stats=config.no_ctrl_stats)
        if log_every and (step % log_every == 0 or step == config.train_steps - 1):
            log.info("denoiser step %d/%d loss %.5f", step, config.train_steps, loss)
    return model


def fit_mask_model(train: ExpressionDataset, grn: Grn, config: RunConfig, x_max: float,
                   rng: np.random.Generator, log_every: int = 200) -> MaskModel:
    scaled = scale_unit(train, x_max)
    stats = _control_stats_by_type(scaled)
    model = MaskModel(
        n_genes=scaled.n_genes,
        cell_types=scaled.cell_type_labels(),
        emb_dim=config.D,
        n_heads=config.H,
        n_gat_layers=config.L,
        molecule_dim=scaled.molecule_dim,
        rng=rng,
    )
    opt = Adam(model.parameters(), lr=config.lr)
    for step in range(config.mask_train_steps):
        opt.state.lr = _cosine_lr(config.lr, step, config.mask_train_steps)
        batch = _sample_batch(scaled, rng, config.batch)
        loss = mask_train_step(model, batch, rng, opt, grn, stats=stats)
        if log_every and (step % log_every == 0 or step == config.mask_train_steps - 1):
            log.info("mask step %d/%d bce %.5f", step, config.mask_train_steps, loss)
    return model


def predict_condition(
    model: Denoiser,
    mask_model: Optional[MaskModel],
    train: ExpressionDataset,
    condition_id: str,
    config: RunConfig,
    grn: Grn,
    x_max: float,
    rng: Optional[np.random.Generator] = None,
    cells_per_type: Optional[int] = None,
    cell_types: Optional[Sequence[str]] = None,
) -> ExpressionDataset:
    """Bridge control cells of every requested cell type through a condition.

    ``train`` is the log1p-scale training dataset holding the control cells;
    outputs are on the same log1p scale (mask applied, rescaled by x_max).
    """
    if condition_id not in train.conditions:
        raise InvalidDataError(f"unknown condition '{condition_id}'")
    cond = train.conditions[condition_id]
    scaled = scale_unit(train, x_max)
    sched = make_schedule(config.T)
    cfg = SamplerConfig(num_steps=config.ddim_substeps, eta=0.0)
    if rng is None:
        rng = np.random.default_rng(config.seed)

    values, types, conds = [], [], []
    for ct in (cell_types if cell_types is not None else scaled.cell_type_labels()):
        ctrl_idx = scaled.cells_where(cell_type=ct, condition_id=CONTROL_ID)
        if len(ctrl_idx) == 0:
            raise InsufficientDataError(f"no control cells for cell type '{ct}'")
        if cells_per_type is not None:
            ctrl_idx = ctrl_idx[:cells_per_type]
        x_c = scaled.values[ctrl_idx]
        out = predict(
            model, mask_model, x_c, ct, cond, cfg, sched, x_max, grn,
            mask_control_samples=x_c[:config.K],
            tau=config.tau,
            no_mask=config.no_mask,
            random_latent=config.random_latent,
            no_grn=config.no_grn,
            no_ctrl_stats=config.no_ctrl_stats,
            rng=rng,
        )
        values.append(np.atleast_2d(out))
        types.extend([ct] * len(ctrl_idx))
        conds.extend([condition_id] * len(ctrl_idx))

    return ExpressionDataset(
        values=np.concatenate(values, axis=0),
        gene_names=list(train.gene_names),
        cell_types=np.array(types, dtype=object),
        condition_ids=np.array(conds, dtype=object),
        conditions={condition_id: cond, CONTROL_ID: Control()},
    )
