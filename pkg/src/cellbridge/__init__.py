"""cellbridge: dual conditional diffusion bridges for single-cell perturbation prediction.

Two denoiser roles share one parameter set and one Gaussian prior: the
source role models unperturbed cells, the target role models perturbed
cells conditioned on the perturbation and a control signal. Deterministic
DDIM inversion encodes a control cell into the shared prior and decodes it
under the target conditioning, turning unpaired control/perturbed data
into per-cell predictions. A gene-adjacency attention block propagates
perturbation information, a separate mask model predicts silent genes, and
evaluation uses distribution-aware metrics (energy distance, per-gene
Wasserstein).
"""

from .config import RunConfig, SplitSpec
from .data import (Control, ControlStats, ExpressionDataset, GeneKnockout, Molecule,
                   control_stats, log1p_normalize, noisy_control, scale_unit, select_hvg)
from .diffusion import (DiffusionSchedule, SamplerConfig, ddim_step, forward_noise,
                        make_schedule, ode_decode, ode_encode)
from .grn import Grn, build_grn, pearson_matrix
from .metrics import EvalReport, de_genes, emd, energy_distance, evaluate_prediction, wasserstein_1d
from .simulate import SimulatorConfig, SyntheticTruth, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "SplitSpec",
    "Control", "ControlStats", "ExpressionDataset", "GeneKnockout", "Molecule",
    "control_stats", "log1p_normalize", "noisy_control", "scale_unit", "select_hvg",
    "DiffusionSchedule", "SamplerConfig", "ddim_step", "forward_noise",
    "make_schedule", "ode_decode", "ode_encode",
    "Grn", "build_grn", "pearson_matrix",
    "EvalReport", "de_genes", "emd", "energy_distance", "evaluate_prediction", "wasserstein_1d",
    "SimulatorConfig", "SyntheticTruth", "simulate_dataset",
    "__version__",
]
