"""Per-gene silencing predictor (a GRN block without the diffusion inputs).

The model scores each gene's probability of being ACTIVE (non-zero) under a
(cell type, perturbation) pair: the binary cross-entropy targets are 1 for
expressed genes, and thresholding at tau labels a gene active when the
probability clears it. Prediction feeds several observed control cells
through the model and takes a majority vote across the resulting binary
calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Optional, Sequence

import numpy as np

from .data import Control, ControlStats, GeneKnockout, Molecule, PerturbationCondition, noisy_control
from .denoiser import BatchGroup, CELL_DIM, EMB_INIT_STD, HIDDEN, _single_group, groups_from_conditions
from .grn import Grn
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import GatHead, MLP, gat_layer_forward
from .nn.optim import Adam

PROB_CLAMP = 1e-7


@dataclass
class MaskPrediction:
    prob: np.ndarray  # mean active-probability over the K votes, entries in (0, 1)
    binary: np.ndarray  # final mask: 1 = active, 0 = silenced
    agg_count: np.ndarray  # number of active votes per gene, in [0, K]


class MaskModel:
    def __init__(
        self,
        n_genes: int,
        cell_types: Sequence[str],
        emb_dim: int = 64,
        n_heads: int = 2,
        n_gat_layers: int = 2,
        molecule_dim: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        if rng is None:
            rng = np.random.default_rng(0)
        self.n_genes = n_genes
        self.cell_types = sorted(cell_types)
        self.cell_index = {c: i for i, c in enumerate(self.cell_types)}
        self.emb_dim = emb_dim
        self.molecule_dim = molecule_dim

        d = emb_dim
        self.gene_emb = ad.param(rng.normal(0.0, EMB_INIT_STD, size=(n_genes, d)))
        self.cell_emb = ad.param(rng.normal(0.0, EMB_INIT_STD, size=(len(self.cell_types), CELL_DIM)))
        self.phi = MLP.create(rng, d + CELL_DIM, d, hidden=HIDDEN)
        self.psi_ctrl = MLP.create(rng, 1, d, hidden=HIDDEN)
        if molecule_dim is not None:
            self.psi_mole = MLP.create(rng, molecule_dim + 1, d, hidden=HIDDEN)
            self.phi_f = MLP.create(rng, 2 * d, d, hidden=HIDDEN)
        else:
            self.psi_mole = None
            self.phi_f = None
        self.gat = [[GatHead.create(rng, d, d) for _ in range(n_heads)]
                    for _ in range(n_gat_layers)]
        # aligned rows: silencing signatures generalize to unseen target genes
        shared_row = rng.uniform(-1, 1, size=d) * np.sqrt(6.0 / (d + 1))
        self.readout_w = ad.param(np.tile(shared_row, (n_genes, 1)))
        self.readout_b = ad.param(np.zeros(n_genes))

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"gene_emb": self.gene_emb, "cell_emb": self.cell_emb}
        for name, mlp in (("phi", self.phi), ("psi_ctrl", self.psi_ctrl),
                          ("psi_mole", self.psi_mole), ("phi_f", self.phi_f)):
            if mlp is None:
                continue
            for i, layer in enumerate(mlp.layers):
                out[f"{name}.{i}.weight"] = layer.weight
                out[f"{name}.{i}.bias"] = layer.bias
        for l, heads in enumerate(self.gat):
            for h, head in enumerate(heads):
                out[f"gat.{l}.{h}.weight"] = head.weight
                out[f"gat.{l}.{h}.attn"] = head.attn
        out["readout_w"] = self.readout_w
        out["readout_b"] = self.readout_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def _condition_rows(self, group: BatchGroup, c_emb: Tensor) -> Tensor:
        b, n, d = group.size, self.n_genes, self.emb_dim
        base = ad.broadcast_to(ad.reshape(self.gene_emb, (1, n, d)), (b, n, d))
        c_b = ad.broadcast_to(ad.reshape(c_emb, (b, 1, CELL_DIM)), (b, n, CELL_DIM))

        if group.kind == "control":
            return self.phi(ad.concat([base, c_b], axis=-1))
        if group.kind == "knockout":
            masked = ad.mul(base, ad.as_tensor(group.ko_mask[..., None]))
            return self.phi(ad.concat([masked, c_b], axis=-1))
        if group.kind == "molecule":
            if self.psi_mole is None:
                raise ValueError("model was built without molecule support")
            fused_cond = self.psi_mole(ad.as_tensor(
                np.concatenate([group.mol_emb, np.log1p(group.mol_dose)[:, None]], axis=1)))
            cond_rows = ad.broadcast_to(ad.reshape(fused_cond, (b, 1, d)), (b, n, d))
            rows = self.phi_f(ad.concat([self.phi(ad.concat([base, c_b], axis=-1)), cond_rows], axis=-1))
            return ad.add(rows, self.psi_ctrl(ad.as_tensor(group.ctrl[..., None])))
        raise ValueError(f"unknown group kind '{group.kind}'")

    def forward_logits(self, cell_idx: np.ndarray, groups: list[BatchGroup],
                       adjacency: np.ndarray) -> Tensor:
        c_emb = ad.gather_rows(self.cell_emb, np.asarray(cell_idx, dtype=np.int64))
        parts = []
        for g in groups:
            rows = self._condition_rows(g, ad.slice0(c_emb, g.start, g.stop))
            for heads in self.gat:
                rows = gat_layer_forward(adjacency, rows, heads)
            parts.append(rows)
        mixed = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        b = mixed.shape[0]
        rw = ad.broadcast_to(ad.reshape(self.readout_w, (1, self.n_genes, self.emb_dim)), mixed.shape)
        return ad.add(ad.sumt(ad.mul(rw, mixed), axis=-1), self.readout_b)


def mask_forward(model: MaskModel, cell_type: str, ctrl_input: np.ndarray,
                 P: PerturbationCondition, grn: Grn) -> np.ndarray:
    """Active-probability per gene; sigmoid keeps every entry inside (0, 1)."""
    ctrl_input = np.asarray(ctrl_input, dtype=np.float64)
    if ctrl_input.shape != (model.n_genes,):
        raise ValueError(f"ctrl_input must have length {model.n_genes}")
    group = _single_group(P, model.n_genes, ctrl_input)
    cell_idx = np.array([model.cell_index[cell_type]], dtype=np.int64)
    with ad.no_grad():
        logits = model.forward_logits(cell_idx, [group], grn.adjacency)
    return 1.0 / (1.0 + np.exp(-logits.data[0]))


def build_bce_loss(model: MaskModel, x0: np.ndarray, cell_idx: np.ndarray,
                   conditions: Sequence[PerturbationCondition],
                   ctrl_signals: "dict[int, np.ndarray] | None",
                   adjacency: np.ndarray) -> Tensor:
    """Binary cross-entropy graph with targets M = (x0 != 0)."""
    order, groups = groups_from_conditions(conditions, model.n_genes, ctrl_signals)
    x0_s = np.asarray(x0, dtype=np.float64)[order]
    cell_s = np.asarray(cell_idx)[order]
    target = (x0_s != 0.0).astype(np.float64)
    logits = model.forward_logits(cell_s, groups, adjacency)
    probs = ad.clip(ad.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    term = ad.add(
        ad.mul(ad.as_tensor(target), ad.log(probs)),
        ad.mul(ad.as_tensor(1.0 - target), ad.log(ad.sub(1.0, probs))),
    )
    # per-sample loss is -(1/N) sum_i; the batch mean equals the grand mean
    return ad.neg(ad.meant(term))


def mask_train_step(model: MaskModel, batch: dict, rng: np.random.Generator, opt: Adam,
                    grn: Grn, stats: "dict[str, ControlStats] | None" = None) -> float:
    """One Adam update on the silencing objective; returns the BCE loss."""
    x0 = np.asarray(batch["x0"], dtype=np.float64)
    conditions = batch["conditions"]
    cell_labels = batch["cell_types"]
    cell_idx = np.array([model.cell_index[c] for c in cell_labels], dtype=np.int64)
    ctrl_signals: dict[int, np.ndarray] = {}
    for i, cond in enumerate(conditions):
        if isinstance(cond, Molecule):
            if stats is None or cell_labels[i] not in stats:
                raise ValueError(f"missing control stats for cell type '{cell_labels[i]}'")
            ctrl_signals[i] = noisy_control(stats[cell_labels[i]], rng)
    loss = build_bce_loss(model, x0, cell_idx, conditions, ctrl_signals, grn.adjacency)
    opt.zero_grad()
    ad.backward(loss)
    opt.step()
    return loss.item()


def mask_predict(model: MaskModel, control_samples: np.ndarray, cell_type: str,
                 P: PerturbationCondition, tau: float, grn: Grn,
                 vote_fraction: float = 0.5) -> MaskPrediction:
    """Threshold each of K control-sample passes at tau, then majority-vote."""
    samples = np.atleast_2d(np.asarray(control_samples, dtype=np.float64))
    k = samples.shape[0]
    if k < 1:
        raise ValueError("mask_predict needs at least one control sample")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be inside (0, 1)")
    probs = np.stack([mask_forward(model, cell_type, samples[i], P, grn) for i in range(k)])
    votes = (probs >= tau).astype(np.int64)
    agg = votes.sum(axis=0)
    threshold = max(1, ceil(k * vote_fraction))
    return MaskPrediction(
        prob=probs.mean(axis=0),
        binary=(agg >= threshold).astype(np.int64),
        agg_count=agg,
    )
