"""Run configuration and experiment split specifications."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCALE_SOURCES = ("train", "all", "test")
SPLIT_MODES = ("holdout_perturbations", "holdout_ood_list", "holdout_doses")


@dataclass
class RunConfig:
    """All training/inference hyperparameters with reproducible defaults."""

    T: int = 500
    ddim_substeps: int = 50
    H: int = 2
    L: int = 2
    eps_co: float = 0.3
    batch: int = 32
    D: int = 64
    D_B: int = 128
    lr: float = 1e-3
    train_steps: int = 3000
    mask_train_steps: int = 800
    tau: float = 0.5
    K: int = 16
    seed: int = 0
    scale_source: str = "train"
    no_ctrl_stats: bool = False
    random_latent: bool = False
    no_mask: bool = False
    no_grn: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 1 <= self.ddim_substeps <= self.T:
            raise ValueError("ddim_substeps must be in [1, T]")
        if self.H < 1 or self.L < 1:
            raise ValueError("H and L must be >= 1")
        if not 0.0 < self.eps_co <= 1.0:
            raise ValueError("eps_co must be in (0, 1]")
        if self.batch < 1 or self.D < 1 or self.D_B < 1:
            raise ValueError("batch, D and D_B must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.train_steps < 0 or self.mask_train_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be inside (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.scale_source not in SCALE_SOURCES:
            raise ValueError(f"scale_source must be one of {SCALE_SOURCES}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_dict(payload: dict) -> "RunConfig":
        return RunConfig(**payload)

    @staticmethod
    def from_json(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


@dataclass
class SplitSpec:
    """How to carve conditions into train/test (control cells always train).

    holdout_perturbations keeps ``fraction`` of the perturbation conditions
    for training; holdout_ood_list holds out the listed condition ids;
    holdout_doses holds out molecule conditions at the listed dose levels.
    """

    mode: str = "holdout_perturbations"
    fraction: float = 0.7
    ood_ids: list = field(default_factory=list)
    doses: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"mode must be one of {SPLIT_MODES}")
        if self.mode == "holdout_perturbations" and not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must be inside (0, 1)")
        if self.mode == "holdout_ood_list" and not self.ood_ids:
            raise ValueError("holdout_ood_list needs at least one condition id")
        if self.mode == "holdout_doses" and not self.doses:
            raise ValueError("holdout_doses needs at least one dose level")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_json(path) -> "SplitSpec":
        return SplitSpec(**json.loads(Path(path).read_text()))
