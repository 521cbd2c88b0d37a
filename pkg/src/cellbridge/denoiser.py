"""Conditional x0-predicting denoiser with a GRN attention block.

One parameter set serves two roles. In the source role (no perturbation)
each gene embedding is fused with the diffusion time and the cell type and
shifted by an encoding of its own noisy value. In the target role the fused
embedding additionally carries the perturbation: knockouts zero the
embedding rows of the targeted genes before fusion, molecules mix a drug
embedding and log-dose into every gene row and add an encoding of a noisy
control signal. The per-gene rows are then mixed by multi-head attention
along the gene adjacency, read out gene-wise to a length-N summary, and
decoded together with an encoding of the noisy sample into the clean
expression prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import (Control, ControlStats, GeneKnockout, Molecule,
                   PerturbationCondition, noisy_control)
from .diffusion import DiffusionSchedule, SamplerConfig, forward_noise, ode_decode, ode_encode
from .errors import TrainingStepError
from .grn import Grn
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.layers import Dense, GatHead, MLP, gat_layer_forward, time_embedding
from .nn.optim import Adam

TIME_DIM = 64
CELL_DIM = 32
HIDDEN = 128
EMB_INIT_STD = 0.02


@dataclass
class BatchGroup:
    """A contiguous run of same-kind samples inside a (pre-sorted) batch."""

    kind: str  # "control" | "knockout" | "molecule"
    start: int
    stop: int
    ko_mask: Optional[np.ndarray] = None  # [b, N]; 0 at knocked-out rows
    mol_emb: Optional[np.ndarray] = None  # [b, D_S]
    mol_dose: Optional[np.ndarray] = None  # [b]
    ctrl: Optional[np.ndarray] = None  # [b, N]

    @property
    def size(self) -> int:
        return self.stop - self.start


def groups_from_conditions(
    conditions: Sequence[PerturbationCondition],
    n_genes: int,
    ctrl_signals: "dict[int, np.ndarray] | None" = None,
) -> tuple[np.ndarray, list[BatchGroup]]:
    """Stable-sort batch positions by condition kind and describe the runs.

    Returns the permutation applied to the batch plus the group layout in
    sorted order. ``ctrl_signals`` maps original positions to noisy-control
    vectors and is required for molecule samples.
    """
    rank = {"control": 0, "gene_knockout": 1, "molecule": 2}
    order = np.argsort([rank[c.kind] for c in conditions], kind="stable")
    groups: list[BatchGroup] = []
    pos = 0
    for kind in ("control", "gene_knockout", "molecule"):
        members = [int(i) for i in order if conditions[i].kind == kind]
        if not members:
            continue
        start, stop = pos, pos + len(members)
        pos = stop
        if kind == "control":
            groups.append(BatchGroup("control", start, stop))
        elif kind == "gene_knockout":
            ko = np.ones((len(members), n_genes))
            for row, i in enumerate(members):
                ko[row, list(conditions[i].targets)] = 0.0
            groups.append(BatchGroup("knockout", start, stop, ko_mask=ko))
        else:
            embs = np.stack([conditions[i].embedding_array for i in members])
            doses = np.array([conditions[i].dose for i in members])
            if ctrl_signals is None or any(i not in ctrl_signals for i in members):
                raise ValueError("molecule conditions require a control signal per sample")
            ctrl = np.stack([ctrl_signals[i] for i in members])
            groups.append(BatchGroup("molecule", start, stop, mol_emb=embs,
                                     mol_dose=doses, ctrl=ctrl))
    return order, groups


class Denoiser:
    def __init__(
        self,
        n_genes: int,
        cell_types: Sequence[str],
        T: int,
        emb_dim: int = 64,
        block_dim: int = 128,
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
        self.T = T
        self.emb_dim = emb_dim
        self.block_dim = block_dim
        self.n_heads = n_heads
        self.n_gat_layers = n_gat_layers
        self.molecule_dim = molecule_dim

        d = emb_dim
        self.gene_emb = ad.param(rng.normal(0.0, EMB_INIT_STD, size=(n_genes, d)))
        self.cell_emb = ad.param(rng.normal(0.0, EMB_INIT_STD, size=(len(self.cell_types), CELL_DIM)))
        self.time_proj = Dense.create(rng, TIME_DIM, TIME_DIM, activation="silu")
        self.phi = MLP.create(rng, d + TIME_DIM + CELL_DIM, d, hidden=HIDDEN)
        self.psi_xt = MLP.create(rng, 1, d, hidden=HIDDEN)
        self.psi_ctrl = MLP.create(rng, 1, d, hidden=HIDDEN)
        if molecule_dim is not None:
            self.psi_mole = MLP.create(rng, molecule_dim + 1, d, hidden=HIDDEN)
            self.phi_f = MLP.create(rng, 2 * d, d, hidden=HIDDEN)
        else:
            self.psi_mole = None
            self.phi_f = None
        self.gat = [[GatHead.create(rng, d, d) for _ in range(n_heads)]
                    for _ in range(n_gat_layers)]
        # one shared row repeated: per-gene readouts start aligned so signatures
        # learned on training perturbations transfer to unseen target genes
        shared_row = rng.uniform(-1, 1, size=d) * np.sqrt(6.0 / (d + 1))
        self.readout_w = ad.param(np.tile(shared_row, (n_genes, 1)))
        self.readout_b = ad.param(np.zeros(n_genes))
        self.block = MLP.create(rng, n_genes + TIME_DIM + CELL_DIM, block_dim, hidden=HIDDEN)
        self.decoder = MLP.create(rng, block_dim + n_genes + TIME_DIM + CELL_DIM, n_genes, hidden=HIDDEN)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"gene_emb": self.gene_emb, "cell_emb": self.cell_emb}
        out["time_proj.weight"] = self.time_proj.weight
        out["time_proj.bias"] = self.time_proj.bias
        for name, mlp in (("phi", self.phi), ("psi_xt", self.psi_xt), ("psi_ctrl", self.psi_ctrl),
                          ("psi_mole", self.psi_mole), ("phi_f", self.phi_f),
                          ("block", self.block), ("decoder", self.decoder)):
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

    # -- forward pieces ------------------------------------------------------

    def _time_cell(self, t: np.ndarray, cell_idx: np.ndarray) -> tuple[Tensor, Tensor]:
        t_raw = time_embedding(np.asarray(t, dtype=np.float64) / self.T, TIME_DIM)
        t_emb = self.time_proj(ad.as_tensor(t_raw))
        c_emb = ad.gather_rows(self.cell_emb, np.asarray(cell_idx, dtype=np.int64))
        return t_emb, c_emb

    def _phi_rows(self, gene_rows: Tensor, t_emb: Tensor, c_emb: Tensor) -> Tensor:
        b, n = gene_rows.shape[0], self.n_genes
        t_b = ad.broadcast_to(ad.reshape(t_emb, (b, 1, TIME_DIM)), (b, n, TIME_DIM))
        c_b = ad.broadcast_to(ad.reshape(c_emb, (b, 1, CELL_DIM)), (b, n, CELL_DIM))
        return self.phi(ad.concat([gene_rows, t_b, c_b], axis=-1))

    def _condition_rows(
        self,
        group: BatchGroup,
        x_t: np.ndarray,
        t_emb: Tensor,
        c_emb: Tensor,
        no_ctrl_stats: bool = False,
    ) -> Tensor:
        """Per-gene embedding rows [b, N, D] for one same-kind slice."""
        b, n, d = group.size, self.n_genes, self.emb_dim
        base = ad.broadcast_to(ad.reshape(self.gene_emb, (1, n, d)), (b, n, d))
        xt_term = self.psi_xt(ad.as_tensor(x_t[..., None]))

        if group.kind == "control":
            return ad.add(self._phi_rows(base, t_emb, c_emb), xt_term)
        if group.kind == "knockout":
            masked = ad.mul(base, ad.as_tensor(group.ko_mask[..., None]))
            return ad.add(self._phi_rows(masked, t_emb, c_emb), xt_term)
        if group.kind == "molecule":
            if self.psi_mole is None:
                raise ValueError("model was built without molecule support")
            fused_cond = self.psi_mole(ad.as_tensor(
                np.concatenate([group.mol_emb, np.log1p(group.mol_dose)[:, None]], axis=1)))
            cond_rows = ad.broadcast_to(ad.reshape(fused_cond, (b, 1, d)), (b, n, d))
            mole_rows = self.phi_f(ad.concat([self._phi_rows(base, t_emb, c_emb), cond_rows], axis=-1))
            out = ad.add(mole_rows, xt_term)
            if not no_ctrl_stats:
                out = ad.add(out, self.psi_ctrl(ad.as_tensor(group.ctrl[..., None])))
            return out
        raise ValueError(f"unknown group kind '{group.kind}'")

    def _gene_readout(self, rows: Tensor) -> Tensor:
        b = rows.shape[0]
        rw = ad.broadcast_to(ad.reshape(self.readout_w, (1, self.n_genes, self.emb_dim)), rows.shape)
        return ad.add(ad.sumt(ad.mul(rw, rows), axis=-1), self.readout_b)

    def _grn_rows(self, rows: Tensor, adjacency: np.ndarray) -> Tensor:
        for heads in self.gat:
            rows = gat_layer_forward(adjacency, rows, heads)
        return rows

    def forward(
        self,
        x_t: np.ndarray,
        t: np.ndarray,
        cell_idx: np.ndarray,
        groups: list[BatchGroup],
        adjacency: np.ndarray,
        no_grn: bool = False,
        no_ctrl_stats: bool = False,
    ) -> Tensor:
        """Batched clean-data prediction [B, N]; batch must be group-sorted."""
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        t_emb, c_emb = self._time_cell(t, cell_idx)
        parts = []
        for g in groups:
            rows = self._condition_rows(
                g, x_t[g.start:g.stop],
                ad.slice0(t_emb, g.start, g.stop), ad.slice0(c_emb, g.start, g.stop),
                no_ctrl_stats=no_ctrl_stats,
            )
            if no_grn and g.kind == "molecule":
                parts.append(rows)  # perturbation effect not propagated along the graph
            else:
                parts.append(self._grn_rows(rows, adjacency))
        mixed = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        f_gw = self._gene_readout(mixed)

        block_out = self.block(ad.concat([ad.as_tensor(x_t), t_emb, c_emb], axis=-1))
        dec_in = ad.concat([block_out, f_gw, t_emb, c_emb], axis=-1)
        return self.decoder(dec_in)

    # -- single-sample views (used by tests and small callers) ---------------

    def condition_embed(
        self,
        P: PerturbationCondition,
        t: int,
        cell_type: str,
        x_t: np.ndarray,
        ctrl_signal: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Condition-specific gene embedding matrix [N, D] before mixing."""
        group = _single_group(P, self.n_genes, ctrl_signal)
        t_emb, c_emb = self._time_cell(np.array([t]), np.array([self.cell_index[cell_type]]))
        rows = self._condition_rows(group, np.asarray(x_t)[None, :], t_emb, c_emb)
        return rows.data[0]

    def grn_block(self, gene_rows: np.ndarray, grn: Grn) -> np.ndarray:
        """Attention mixing plus gene-wise readout of a single [N, D] matrix."""
        rows = ad.as_tensor(gene_rows[None, ...])
        mixed = self._grn_rows(rows, grn.adjacency)
        return self._gene_readout(mixed).data[0]

    def denoise(
        self,
        x_t: np.ndarray,
        t: int,
        cell_type: str,
        grn: Grn,
        ctrl_signal: Optional[np.ndarray] = None,
        P: Optional[PerturbationCondition] = None,
    ) -> np.ndarray:
        """Single-sample x0 prediction. Source role: P and ctrl_signal absent."""
        cond = P if P is not None else Control()
        if isinstance(cond, Molecule) and ctrl_signal is None:
            raise ValueError("molecule conditioning requires a control signal")
        if cond.kind == "control" and ctrl_signal is not None:
            raise ValueError("the source role takes no control signal")
        group = _single_group(cond, self.n_genes, ctrl_signal)
        out = self.forward(
            np.asarray(x_t)[None, :], np.array([t]),
            np.array([self.cell_index[cell_type]]), [group], grn.adjacency,
        )
        return out.data[0]


def _single_group(P: PerturbationCondition, n_genes: int,
                  ctrl_signal: Optional[np.ndarray]) -> BatchGroup:
    if isinstance(P, Control):
        return BatchGroup("control", 0, 1)
    if isinstance(P, GeneKnockout):
        ko = np.ones((1, n_genes))
        ko[0, list(P.targets)] = 0.0
        return BatchGroup("knockout", 0, 1, ko_mask=ko)
    if isinstance(P, Molecule):
        if ctrl_signal is None:
            raise ValueError("molecule conditioning requires a control signal")
        return BatchGroup("molecule", 0, 1, mol_emb=P.embedding_array[None, :],
                          mol_dose=np.array([P.dose]), ctrl=np.asarray(ctrl_signal)[None, :])
    raise TypeError(f"unknown condition {type(P)!r}")


# ---------------------------------------------------------------------------
# training


def masked_loss(x0_hat: Tensor, x0: np.ndarray) -> tuple[Tensor, int]:
    """Mean over kept samples of sum(M * (x0 - x0_hat)^2) / sum(M).

    M marks expressed genes (x0 != 0); samples with an all-zero mask are
    skipped. Raises :class:`TrainingStepError` when every sample is skipped.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    mask = (x0 != 0.0).astype(np.float64)
    counts = mask.sum(axis=1)
    kept = counts > 0
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise TrainingStepError("all samples in the batch have empty expression masks")
    weights = np.where(kept, 1.0 / np.maximum(counts, 1.0), 0.0)
    diff = ad.sub(x0_hat, ad.as_tensor(x0))
    per_sample = ad.sumt(ad.mul(ad.mul(diff, diff), ad.as_tensor(mask)), axis=1)
    total = ad.sumt(ad.mul(per_sample, ad.as_tensor(weights)))
    return ad.mul(total, 1.0 / n_kept), n_kept


def build_training_loss(
    model: Denoiser,
    x0: np.ndarray,
    cell_idx: np.ndarray,
    conditions: Sequence[PerturbationCondition],
    t: np.ndarray,
    eps: np.ndarray,
    ctrl_signals: "dict[int, np.ndarray] | None",
    sched: DiffusionSchedule,
    adjacency: np.ndarray,
    no_grn: bool = False,
    no_ctrl_stats: bool = False,
) -> Tensor:
    """Deterministic loss graph for a batch with pre-drawn noise (gradient-checkable)."""
    order, groups = groups_from_conditions(conditions, model.n_genes, ctrl_signals)
    x0_s = np.asarray(x0, dtype=np.float64)[order]
    t_s = np.asarray(t)[order]
    eps_s = np.asarray(eps)[order]
    cell_s = np.asarray(cell_idx)[order]
    ab = sched.alpha_bar[t_s][:, None]
    x_t = np.sqrt(ab) * x0_s + np.sqrt(1.0 - ab) * eps_s
    x0_hat = model.forward(x_t, t_s, cell_s, groups, adjacency,
                           no_grn=no_grn, no_ctrl_stats=no_ctrl_stats)
    loss, _ = masked_loss(x0_hat, x0_s)
    return loss


def train_step(
    model: Denoiser,
    batch: dict,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
    opt: Adam,
    adjacency: np.ndarray,
    stats: "dict[str, ControlStats] | None" = None,
    no_grn: bool = False,
    no_ctrl_stats: bool = False,
) -> float:
    """One optimization step; returns the batch loss.

    ``batch`` carries x0 (scaled to [0, 1]), cell_types (labels) and
    conditions (one per sample). Timesteps, noise and per-sample noisy
    control signals are drawn here from the caller's rng.
    """
    x0 = np.asarray(batch["x0"], dtype=np.float64)
    conditions = batch["conditions"]
    cell_labels = batch["cell_types"]
    b = x0.shape[0]
    cell_idx = np.array([model.cell_index[c] for c in cell_labels], dtype=np.int64)

    t = rng.integers(1, model.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    ctrl_signals: dict[int, np.ndarray] = {}
    for i, cond in enumerate(conditions):
        if isinstance(cond, Molecule) and not no_ctrl_stats:
            if stats is None or cell_labels[i] not in stats:
                raise ValueError(f"missing control stats for cell type '{cell_labels[i]}'")
            ctrl_signals[i] = noisy_control(stats[cell_labels[i]], rng)
        elif isinstance(cond, Molecule):
            ctrl_signals[i] = np.zeros(model.n_genes)

    # fail before touching parameters if no sample survives masking
    if not np.any((x0 != 0.0).any(axis=1)):
        raise TrainingStepError("all samples in the batch have empty expression masks")

    loss = build_training_loss(model, x0, cell_idx, conditions, t, eps, ctrl_signals,
                               sched, adjacency, no_grn=no_grn, no_ctrl_stats=no_ctrl_stats)
    opt.zero_grad()
    ad.backward(loss)
    opt.step()
    return loss.item()


# ---------------------------------------------------------------------------
# prediction


def _source_fn(model: Denoiser, cell_idx: np.ndarray, adjacency: np.ndarray):
    def fn(x: np.ndarray, t: int) -> np.ndarray:
        b = x.shape[0]
        groups = [BatchGroup("control", 0, b)]
        with ad.no_grad():
            out = model.forward(x, np.full(b, t), cell_idx, groups, adjacency)
        return out.data

    return fn


def _target_fn(model: Denoiser, cell_idx: np.ndarray, P: PerturbationCondition,
               ctrl: np.ndarray, adjacency: np.ndarray,
               no_grn: bool = False, no_ctrl_stats: bool = False):
    def fn(x: np.ndarray, t: int) -> np.ndarray:
        b = x.shape[0]
        if isinstance(P, Control):
            groups = [BatchGroup("control", 0, b)]
        elif isinstance(P, GeneKnockout):
            ko = np.ones((b, model.n_genes))
            ko[:, list(P.targets)] = 0.0
            groups = [BatchGroup("knockout", 0, b, ko_mask=ko)]
        else:
            groups = [BatchGroup(
                "molecule", 0, b,
                mol_emb=np.repeat(P.embedding_array[None, :], b, axis=0),
                mol_dose=np.full(b, P.dose), ctrl=ctrl,
            )]
        with ad.no_grad():
            out = model.forward(x, np.full(b, t), cell_idx, groups, adjacency,
                                no_grn=no_grn, no_ctrl_stats=no_ctrl_stats)
        return out.data

    return fn


def predict(
    model: Denoiser,
    mask_model,
    x_c: np.ndarray,
    cell_type: str,
    P: PerturbationCondition,
    cfg: SamplerConfig,
    sched: DiffusionSchedule,
    x_max: float,
    grn: Grn,
    mask_control_samples: Optional[np.ndarray] = None,
    tau: float = 0.5,
    vote_count: int = 16,
    no_mask: bool = False,
    random_latent: bool = False,
    no_grn: bool = False,
    no_ctrl_stats: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Bridge control cells to predicted perturbed expression.

    Encode each control cell with the source role, decode the latent with
    the target role (the raw control sample stands in for the control
    statistics), clamp to [0, 1], apply the silencing mask, then undo the
    unit scaling. ``x_c`` may be one cell [N] or a stack [n, N].
    """
    from .maskmodel import mask_predict  # local import to avoid a cycle

    x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    n_cells = x.shape[0]
    cell_idx = np.full(n_cells, model.cell_index[cell_type], dtype=np.int64)

    if not no_mask and mask_model is None:
        raise ValueError("prediction needs a trained mask model (or no_mask=True)")

    if random_latent:
        if rng is None:
            raise ValueError("random_latent requires an rng")
        latent = rng.standard_normal(x.shape)
    else:
        latent = ode_encode(_source_fn(model, cell_idx, grn.adjacency), x, cfg, sched)

    decoded = ode_decode(
        _target_fn(model, cell_idx, P, x, grn.adjacency,
                   no_grn=no_grn, no_ctrl_stats=no_ctrl_stats),
        latent, cfg, sched,
    )
    decoded = np.clip(decoded, 0.0, 1.0)

    if not no_mask:
        samples = mask_control_samples if mask_control_samples is not None else x[:vote_count]
        pred = mask_predict(mask_model, samples, cell_type, P, tau, grn)
        decoded = decoded * pred.binary[None, :]

    out = decoded * x_max
    return out[0] if np.asarray(x_c).ndim == 1 else out
