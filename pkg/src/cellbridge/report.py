"""Matplotlib rendering for evaluation reports.

Figures land next to the delimited outputs of `evaluate`: a per-gene EMD
profile and distribution overlays for the strongest DE genes (the overlay
is where bimodal responses are visible, which summary statistics hide).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport

_SAVE_KW = dict(dpi=120, metadata={"Software": "cellbridge"})


def render_report_figures(
    report: EvalReport,
    pred: np.ndarray,
    truth: np.ndarray,
    control: np.ndarray,
    gene_names: list[str],
    out_dir: Path,
    stem: str,
    n_hist_genes: int = 4,
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    order = np.argsort(-report.per_gene_emd)
    de20 = set(int(i) for i in report.de20)
    colors = ["#c44e52" if int(g) in de20 else "#4c72b0" for g in order]

    fig, ax = plt.subplots(figsize=(max(6.0, 0.22 * len(order)), 3.2))
    ax.bar(np.arange(len(order)), report.per_gene_emd[order], color=colors, width=0.8)
    ax.set_xticks(np.arange(len(order)))
    ax.set_xticklabels([gene_names[g] for g in order], rotation=90, fontsize=6)
    ax.set_ylabel("per-gene EMD")
    ax.set_title(f"EMD by gene (all={report.emd['all']:.4f}, DE20={report.emd['de20']:.4f})")
    ax.margins(x=0.01)
    fig.tight_layout()
    p = out_dir / f"{stem}_emd_per_gene.png"
    fig.savefig(p, **_SAVE_KW)
    plt.close(fig)
    paths.append(p)

    top = [int(g) for g in report.de20[:n_hist_genes]]
    if top:
        fig, axes = plt.subplots(1, len(top), figsize=(3.0 * len(top), 2.8), squeeze=False)
        for ax, g in zip(axes[0], top):
            lo = min(pred[:, g].min(), truth[:, g].min(), control[:, g].min())
            hi = max(pred[:, g].max(), truth[:, g].max(), control[:, g].max())
            bins = np.linspace(lo, hi + 1e-9, 30)
            ax.hist(truth[:, g], bins=bins, density=True, alpha=0.55, label="observed", color="#55a868")
            ax.hist(pred[:, g], bins=bins, density=True, alpha=0.55, label="predicted", color="#4c72b0")
            ax.hist(control[:, g], bins=bins, density=True, histtype="step", label="control", color="#8c8c8c")
            ax.set_title(gene_names[g], fontsize=9)
            ax.tick_params(labelsize=7)
        axes[0][0].legend(fontsize=7)
        fig.suptitle("top DE gene marginals", fontsize=10)
        fig.tight_layout()
        p = out_dir / f"{stem}_de_histograms.png"
        fig.savefig(p, **_SAVE_KW)
        plt.close(fig)
        paths.append(p)
    return paths
