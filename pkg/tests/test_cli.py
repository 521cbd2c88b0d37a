import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from cellbridge.cli import main
from cellbridge.config import RunConfig, SplitSpec
from cellbridge.simulate import SimulatorConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end workspace driven purely through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    sim_cfg = SimulatorConfig(
        n_genes=14, n_cell_types=1, n_knockout_conditions=4, n_molecule_conditions=2,
        cells_per_condition=24, control_cells_per_type=30, module_size=4,
        molecule_embedding_dim=10, base_off_fraction=0.1,
    )
    sim_cfg.to_json(root / "sim.json")
    assert main(["simulate", "--config", str(root / "sim.json"), "--seed", "1",
                 "--out-dir", str(root / "data")]) == 0

    split = SplitSpec(mode="holdout_perturbations", fraction=0.7, seed=1)
    split.to_json(root / "split.json")
    assert main(["preprocess", "--data", str(root / "data/expression.csv"),
                 "--conditions", str(root / "data/conditions.json"),
                 "--split", str(root / "split.json"),
                 "--out-dir", str(root / "prep")]) == 0

    assert main(["build-grn", "--data", str(root / "prep/train.csv"),
                 "--conditions", str(root / "prep/conditions.json"),
                 "--eps-co", "0.3", "--out", str(root / "grn.csv")]) == 0

    config = RunConfig(T=50, ddim_substeps=8, train_steps=12, mask_train_steps=12,
                       batch=8, D=12, D_B=16, K=3, seed=7)
    config.to_json(root / "config.json")
    return root


def run_train(root, out, seed=None):
    argv = ["train", "--data", str(root / "prep/train.csv"),
            "--conditions", str(root / "prep/conditions.json"),
            "--grn", str(root / "grn.csv"), "--config", str(root / "config.json"),
            "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


def test_simulate_outputs_exist_and_reproducible(workspace, tmp_path):
    data = workspace / "data"
    assert (data / "expression.csv").exists()
    assert (data / "conditions.json").exists()
    assert (data / "truth.json").exists()
    assert main(["simulate", "--config", str(workspace / "sim.json"), "--seed", "1",
                 "--out-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again/expression.csv").read_bytes() == (data / "expression.csv").read_bytes()
    assert (tmp_path / "again/conditions.json").read_bytes() == (data / "conditions.json").read_bytes()


def test_preprocess_meta_and_split_disjointness(workspace):
    meta = json.loads((workspace / "prep/preprocess_meta.json").read_text())
    assert meta["x_max"] > 0
    assert not set(meta["train_conditions"]) & set(meta["test_conditions"])
    train = pd.read_csv(workspace / "prep/train.csv")
    test = pd.read_csv(workspace / "prep/test.csv")
    assert set(train["condition_id"]) & set(test["condition_id"]) == set()
    assert "control" in set(train["condition_id"])


def test_grn_is_binary_with_self_loops(workspace):
    grn = np.loadtxt(workspace / "grn.csv", delimiter=",")
    assert np.isin(grn, (0, 1)).all()
    assert np.all(np.diagonal(grn) == 1)


def test_train_checkpoints_are_byte_identical(workspace, tmp_path):
    ck1, ck2 = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run_train(workspace, ck1) == 0
    assert run_train(workspace, ck2) == 0
    assert ck1.read_bytes() == ck2.read_bytes()
    ck3 = tmp_path / "c.bin"
    assert run_train(workspace, ck3, seed=8) == 0
    assert ck3.read_bytes() != ck1.read_bytes()


def test_full_predict_evaluate_flow(workspace, tmp_path):
    root = workspace
    ck = tmp_path / "denoiser.bin"
    mask_ck = tmp_path / "mask.bin"
    assert run_train(root, ck) == 0
    assert main(["train-mask", "--data", str(root / "prep/train.csv"),
                 "--conditions", str(root / "prep/conditions.json"),
                 "--grn", str(root / "grn.csv"), "--config", str(root / "config.json"),
                 "--out", str(mask_ck)]) == 0

    meta = json.loads((root / "prep/preprocess_meta.json").read_text())
    held_out = meta["test_conditions"][0]
    pred_csv = tmp_path / "pred.csv"
    argv = ["predict", "--data", str(root / "prep/train.csv"),
            "--conditions", str(root / "prep/conditions.json"),
            "--grn", str(root / "grn.csv"), "--config", str(root / "config.json"),
            "--denoiser", str(ck), "--mask", str(mask_ck),
            "--condition", held_out, "--cells-per-type", "6",
            "--out", str(pred_csv)]
    assert main(argv) == 0
    pred = pd.read_csv(pred_csv)
    assert set(pred["condition_id"]) == {held_out}
    assert len(pred) == 6

    # byte-identical on rerun
    pred_csv2 = tmp_path / "pred2.csv"
    argv2 = list(argv)
    argv2[argv2.index(str(pred_csv))] = str(pred_csv2)
    assert main(argv2) == 0
    assert pred_csv.read_bytes() == pred_csv2.read_bytes()

    # evaluation report with all blocks + figures + per-gene CSV
    report_path = tmp_path / "report.json"
    assert main(["evaluate", "--pred", str(pred_csv),
                 "--truth", str(root / "prep/test.csv"),
                 "--control", str(root / "prep/train.csv"),
                 "--out", str(report_path)]) == 0
    payload = json.loads(report_path.read_text())
    assert set(payload["e_distance"]) == {"all", "de20", "de40"}
    assert set(payload["emd"]) == {"all", "de20", "de40"}
    assert "config_hash" in payload
    assert (tmp_path / "report_per_gene_emd.csv").exists()
    assert (tmp_path / "report_emd_per_gene.png").exists()
    assert (tmp_path / "report_de_histograms.png").exists()

    # reports are byte-identical across reruns
    report2 = tmp_path / "r2" / "report.json"
    assert main(["evaluate", "--pred", str(pred_csv),
                 "--truth", str(root / "prep/test.csv"),
                 "--control", str(root / "prep/train.csv"),
                 "--out", str(report2)]) == 0
    assert report_path.read_bytes() == report2.read_bytes()


def test_predict_no_mask_flag(workspace, tmp_path):
    root = workspace
    ck = tmp_path / "d.bin"
    assert run_train(root, ck) == 0
    meta = json.loads((root / "prep/preprocess_meta.json").read_text())
    held_out = meta["test_conditions"][0]
    out = tmp_path / "nomask.csv"
    assert main(["predict", "--data", str(root / "prep/train.csv"),
                 "--conditions", str(root / "prep/conditions.json"),
                 "--grn", str(root / "grn.csv"), "--config", str(root / "config.json"),
                 "--denoiser", str(ck), "--no-mask",
                 "--condition", held_out, "--cells-per-type", "4",
                 "--out", str(out)]) == 0
    # without --no-mask a mask checkpoint is mandatory
    assert main(["predict", "--data", str(root / "prep/train.csv"),
                 "--conditions", str(root / "prep/conditions.json"),
                 "--grn", str(root / "grn.csv"), "--config", str(root / "config.json"),
                 "--denoiser", str(ck),
                 "--condition", held_out, "--out", str(tmp_path / "x.csv")]) == 1


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as err:
        main(["no-such-command"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--bogus-flag"])
    assert err.value.code == 2


def test_data_errors_exit_one(workspace, tmp_path):
    missing = str(tmp_path / "missing.csv")
    assert main(["build-grn", "--data", missing,
                 "--conditions", str(workspace / "data/conditions.json"),
                 "--out", str(tmp_path / "g.csv")]) == 1
