"""Plain-loop oracles kept independent of the library's vectorized paths."""

import numpy as np


def brute_force_attention(adj, feats, head):
    """One attention head, node by node."""
    n = adj.shape[0]
    w = head.weight.data
    a = head.attn.data
    d = w.shape[0]
    h = feats @ w.T
    out = np.zeros((n, d))
    for i in range(n):
        neigh = np.flatnonzero(adj[i])
        scores = []
        for j in neigh:
            e = float(a[:d] @ h[i] + a[d:] @ h[j])
            scores.append(e if e > 0 else head.leaky_slope * e)
        scores = np.asarray(scores)
        weights = np.exp(scores - scores.max())
        weights = weights / weights.sum()
        for wgt, j in zip(weights, neigh):
            out[i] += wgt * h[j]
    return out


def brute_force_grn_block(model, rows, adj):
    """Stacked mean-over-heads attention rounds plus the gene-wise readout."""
    feats = np.asarray(rows, dtype=float)
    for heads in model.gat:
        feats = np.mean([brute_force_attention(adj, feats, h) for h in heads], axis=0)
    return (model.readout_w.data * feats).sum(axis=1) + model.readout_b.data
