"""Command-line interface.

Subcommands: simulate, preprocess, build-grn, train, train-mask, predict,
evaluate. Exit codes: 0 success, 1 data/runtime errors, 2 usage errors.
All randomness derives from --seed; rerunning a subcommand with identical
inputs and seed reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as dataio
from .config import RunConfig, SplitSpec
from .data import (CONTROL_ID, ExpressionDataset, load_conditions_json,
                   load_expression_csv, load_matrix_csv, save_conditions_json,
                   save_expression_csv, save_matrix_csv, scale_unit)
from .denoiser import Denoiser
from .errors import CellBridgeError
from .grn import Grn, build_grn, pearson_matrix
from .maskmodel import MaskModel
from .metrics import evaluate_prediction
from .nn.checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .pipeline import fit_denoiser, fit_mask_model, predict_condition, preprocess
from .report import render_report_figures
from .simulate import SimulatorConfig, simulate_dataset

log = logging.getLogger("cellbridge")


def _load_config(path: "str | None", seed: "int | None") -> RunConfig:
    config = RunConfig.from_json(path) if path else RunConfig()
    if seed is not None:
        config.seed = seed
    return config


def _load_dataset(data_path: str, conditions_path: str,
                  molecule_embeddings: "str | None" = None) -> ExpressionDataset:
    conditions = load_conditions_json(conditions_path, molecule_embeddings)
    return load_expression_csv(data_path, conditions)


def _save_model(path: str, model, x_max: float) -> None:
    tensors = dict(model.named_parameters())
    payload = {"_x_max": np.array([x_max])}
    payload.update(tensors)
    save_checkpoint(path, payload)


def _load_model_tensors(path: str) -> tuple[dict, float]:
    stored = load_checkpoint(path)
    x_max = float(stored.pop("_x_max", np.array([1.0]))[0])
    return stored, x_max


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_simulate(args) -> int:
    cfg = SimulatorConfig.from_json(args.config) if args.config else SimulatorConfig()
    rng = np.random.default_rng(args.seed)
    ds, truth = simulate_dataset(cfg, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_expression_csv(ds, out / "expression.csv")
    save_conditions_json(ds.conditions, out / "conditions.json")
    truth.to_json(out / "truth.json")
    cfg.to_json(out / "simulator_config.json")
    log.info("simulated %d cells x %d genes -> %s", ds.n_cells, ds.n_genes, out)
    return 0


def cmd_preprocess(args) -> int:
    ds = _load_dataset(args.data, args.conditions, args.molecule_embeddings)
    split = SplitSpec.from_json(args.split) if args.split else SplitSpec(seed=args.seed)
    if args.split is None:
        split.seed = args.seed
    n_top = args.n_top if args.n_top is not None else ds.n_genes
    result = preprocess(ds, n_top, split, scale_source=args.scale_source)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_expression_csv(result.train, out / "train.csv")
    save_expression_csv(result.test, out / "test.csv")
    save_conditions_json(result.train.conditions | result.test.conditions,
                         out / "conditions.json")
    meta = {
        "x_max": result.x_max,
        "scale_source": args.scale_source,
        "kept_genes": [int(i) for i in result.kept_genes],
        "train_conditions": sorted(set(result.train.condition_ids) - {CONTROL_ID}),
        "test_conditions": sorted(set(result.test.condition_ids) - {CONTROL_ID}),
    }
    (out / "preprocess_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("preprocess: kept %d genes, x_max=%.6f, %d train / %d test cells",
             len(result.kept_genes), result.x_max, result.train.n_cells, result.test.n_cells)
    return 0


def cmd_build_grn(args) -> int:
    ds = _load_dataset(args.data, args.conditions, args.molecule_embeddings)
    prior = load_matrix_csv(args.prior) if args.prior else None
    grn = build_grn(pearson_matrix(ds.values), prior, args.eps_co)
    save_matrix_csv(grn.adjacency, args.out, fmt="%d")
    log.info("grn: %d genes, %d edges -> %s", grn.n_genes, int(grn.adjacency.sum()), args.out)
    return 0


def _resolve_x_max(args, ds: ExpressionDataset) -> float:
    if args.x_max is not None:
        return args.x_max
    if getattr(args, "meta", None):
        return float(json.loads(Path(args.meta).read_text())["x_max"])
    return float(ds.values.max())


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed)
    ds = _load_dataset(args.data, args.conditions, args.molecule_embeddings)
    grn = Grn(load_matrix_csv(args.grn).astype(np.int64))
    x_max = _resolve_x_max(args, ds)
    rng = np.random.default_rng(config.seed)
    log.info("training denoiser: %d steps, config %s", config.train_steps, config.config_hash())
    model = fit_denoiser(ds, grn, config, x_max, rng)
    _save_model(args.out, model, x_max)
    log.info("checkpoint -> %s", args.out)
    return 0


def cmd_train_mask(args) -> int:
    config = _load_config(args.config, args.seed)
    ds = _load_dataset(args.data, args.conditions, args.molecule_embeddings)
    grn = Grn(load_matrix_csv(args.grn).astype(np.int64))
    x_max = _resolve_x_max(args, ds)
    rng = np.random.default_rng(config.seed)
    log.info("training mask model: %d steps, config %s", config.mask_train_steps, config.config_hash())
    model = fit_mask_model(ds, grn, config, x_max, rng)
    _save_model(args.out, model, x_max)
    log.info("checkpoint -> %s", args.out)
    return 0


def cmd_predict(args) -> int:
    config = _load_config(args.config, args.seed)
    if args.no_mask:
        config.no_mask = True
    if args.random_latent:
        config.random_latent = True
    ds = _load_dataset(args.data, args.conditions, args.molecule_embeddings)
    grn = Grn(load_matrix_csv(args.grn).astype(np.int64))

    stored, x_max = _load_model_tensors(args.denoiser)
    if args.x_max is not None:
        x_max = args.x_max
    model = Denoiser(
        n_genes=ds.n_genes, cell_types=ds.cell_type_labels(), T=config.T,
        emb_dim=config.D, block_dim=config.D_B, n_heads=config.H,
        n_gat_layers=config.L, molecule_dim=ds.molecule_dim,
    )
    restore_parameters(model.named_parameters(), stored)

    mask_model = None
    if not config.no_mask:
        if not args.mask:
            raise CellBridgeError("predict needs --mask (or --no-mask for the ablation)")
        mask_stored, _ = _load_model_tensors(args.mask)
        mask_model = MaskModel(
            n_genes=ds.n_genes, cell_types=ds.cell_type_labels(), emb_dim=config.D,
            n_heads=config.H, n_gat_layers=config.L, molecule_dim=ds.molecule_dim,
        )
        restore_parameters(mask_model.named_parameters(), mask_stored)

    rng = np.random.default_rng(config.seed)
    predictions = []
    for cid in args.condition:
        pred = predict_condition(
            model, mask_model, ds, cid, config, grn, x_max, rng=rng,
            cells_per_type=args.cells_per_type,
            cell_types=args.cell_type if args.cell_type else None,
        )
        predictions.append(pred)
        log.info("predicted %d cells for condition '%s'", pred.n_cells, cid)
    merged = predictions[0]
    if len(predictions) > 1:
        conditions = {}
        for p in predictions:
            conditions |= p.conditions
        merged = ExpressionDataset(
            values=np.concatenate([p.values for p in predictions]),
            gene_names=merged.gene_names,
            cell_types=np.concatenate([p.cell_types for p in predictions]),
            condition_ids=np.concatenate([p.condition_ids for p in predictions]),
            conditions=conditions,
        )
    save_expression_csv(merged, args.out)
    log.info("predictions -> %s", args.out)
    return 0


def cmd_evaluate(args) -> int:
    pred = pd.read_csv(args.pred)
    truth = pd.read_csv(args.truth)
    control = pd.read_csv(args.control)
    gene_names = [c for c in pred.columns if c not in dataio.META_COLUMNS]
    for name, frame in (("truth", truth), ("control", control)):
        other = [c for c in frame.columns if c not in dataio.META_COLUMNS]
        if other != gene_names:
            raise CellBridgeError(f"gene columns of {name} do not match the prediction file")
    ctrl_mask = control["condition_id"].astype(str) == CONTROL_ID if "condition_id" in control else None
    control_values = control.loc[ctrl_mask, gene_names] if ctrl_mask is not None and ctrl_mask.any() else control[gene_names]

    report = evaluate_prediction(
        pred[gene_names].to_numpy(dtype=np.float64),
        truth[gene_names].to_numpy(dtype=np.float64),
        control_values.to_numpy(dtype=np.float64),
    )
    config = _load_config(args.config, args.seed)
    payload = {"config_hash": config.config_hash(), "de_source": "truth_vs_control"}
    payload.update(report.to_dict())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    emd_csv = Path(args.emd_csv) if args.emd_csv else out.with_suffix("").with_name(out.stem + "_per_gene_emd.csv")
    pd.DataFrame({"gene": gene_names, "emd": report.per_gene_emd}).to_csv(emd_csv, index=False)

    if not args.no_figures:
        figures = render_report_figures(
            report,
            pred[gene_names].to_numpy(dtype=np.float64),
            truth[gene_names].to_numpy(dtype=np.float64),
            control_values.to_numpy(dtype=np.float64),
            gene_names,
            out.parent,
            out.stem,
        )
        for p in figures:
            log.info("figure -> %s", p)
    log.info("report -> %s (E-distance all=%.4f, EMD all=%.4f)",
             out, report.e_distance["all"], report.emd["all"])
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellbridge",
                                     description="Diffusion-bridge prediction of single-cell perturbation responses")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_data(p, grn=False):
        p.add_argument("--data", required=True, help="expression CSV")
        p.add_argument("--conditions", required=True, help="condition registry JSON")
        p.add_argument("--molecule-embeddings", help="molecule embeddings CSV (id + features)")
        if grn:
            p.add_argument("--grn", required=True, help="adjacency CSV")

    p = sub.add_parser("simulate", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", help="simulator config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("preprocess", help="log1p, HVG selection, split, scaling constant")
    add_common_data(p)
    p.add_argument("--n-top", type=int, help="number of highly variable genes to keep")
    p.add_argument("--scale-source", choices=("train", "all", "test"), default="train")
    p.add_argument("--split", help="split spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("build-grn", help="co-expression adjacency from a dataset")
    add_common_data(p)
    p.add_argument("--prior", help="prior adjacency CSV (0/1)")
    p.add_argument("--eps-co", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_grn)

    p = sub.add_parser("train", help="train the denoiser")
    add_common_data(p, grn=True)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--x-max", type=float, help="override the scaling constant")
    p.add_argument("--meta", help="preprocess_meta.json carrying x_max")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("train-mask", help="train the silencing mask model")
    add_common_data(p, grn=True)
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--x-max", type=float)
    p.add_argument("--meta", help="preprocess_meta.json carrying x_max")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_mask)

    p = sub.add_parser("predict", help="bridge control cells through a condition")
    add_common_data(p, grn=True)
    p.add_argument("--denoiser", required=True, help="denoiser checkpoint")
    p.add_argument("--mask", help="mask model checkpoint")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--x-max", type=float, help="override the checkpoint scaling constant")
    p.add_argument("--condition", action="append", required=True, help="condition id (repeatable)")
    p.add_argument("--cell-type", action="append", help="restrict to cell types (repeatable)")
    p.add_argument("--cells-per-type", type=int, help="max control cells per type")
    p.add_argument("--no-mask", action="store_true", help="skip silencing mask (ablation)")
    p.add_argument("--random-latent", action="store_true", help="decode random latents (ablation)")
    p.add_argument("--out", required=True, help="prediction CSV")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", help="distribution metrics + figures for predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--control", required=True)
    p.add_argument("--config", help="run config JSON (hash is logged into the report)")
    p.add_argument("--seed", type=int)
    p.add_argument("--emd-csv", help="per-gene EMD CSV path")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(handler=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except (CellBridgeError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
