import numpy as np
import pytest

from cellbridge.data import Control, ControlStats, GeneKnockout, Molecule
from cellbridge.grn import Grn, build_grn
from cellbridge.maskmodel import (MaskModel, build_bce_loss, mask_forward, mask_predict,
                                  mask_train_step)
from cellbridge.nn import autodiff as ad
from cellbridge.nn.optim import Adam


@pytest.fixture
def setup():
    rng = np.random.default_rng(0)
    n, ds_dim = 8, 5
    model = MaskModel(n_genes=n, cell_types=["ct0", "ct1"], emb_dim=10, n_heads=2,
                      n_gat_layers=2, molecule_dim=ds_dim, rng=rng)
    pcc = np.corrcoef(rng.normal(size=(30, n)), rowvar=False)
    grn = build_grn(pcc, eps_co=0.35)
    return model, grn, ds_dim, np.random.default_rng(1)


def test_mask_forward_probabilities_strictly_inside_unit_interval(setup):
    model, grn, ds_dim, rng = setup
    ctrl = rng.uniform(size=model.n_genes)
    for P in (Control(), GeneKnockout((2,)), Molecule(tuple(rng.normal(size=ds_dim)), 1.0)):
        prob = mask_forward(model, "ct0", ctrl, P, grn)
        assert prob.shape == (model.n_genes,)
        assert np.all(prob > 0.0) and np.all(prob < 1.0)


def test_mask_forward_sigmoid_anchors(setup):
    model, grn, ds_dim, rng = setup
    # zero readout -> probability exactly 0.5; huge bias -> saturates toward 1
    model.readout_w.data[:] = 0.0
    model.readout_b.data[:] = 0.0
    prob = mask_forward(model, "ct0", rng.uniform(size=model.n_genes), Control(), grn)
    np.testing.assert_allclose(prob, 0.5, atol=1e-12)
    model.readout_b.data[:] = 40.0
    prob = mask_forward(model, "ct0", rng.uniform(size=model.n_genes), Control(), grn)
    assert np.all(prob > 1.0 - 1e-12)


def test_mask_forward_deterministic_and_validates_shape(setup):
    model, grn, ds_dim, rng = setup
    ctrl = rng.uniform(size=model.n_genes)
    a = mask_forward(model, "ct1", ctrl, GeneKnockout((1,)), grn)
    b = mask_forward(model, "ct1", ctrl, GeneKnockout((1,)), grn)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        mask_forward(model, "ct0", ctrl[:-1], Control(), grn)


def test_bce_uniform_prediction_is_log_two(setup):
    model, grn, ds_dim, rng = setup
    model.readout_w.data[:] = 0.0
    model.readout_b.data[:] = 0.0
    x0 = (rng.uniform(size=(6, model.n_genes)) > 0.4).astype(float)
    loss = build_bce_loss(model, x0, np.zeros(6, dtype=int), [Control()] * 6, {}, grn.adjacency)
    assert abs(loss.item() - np.log(2.0)) < 1e-12


def test_bce_perfect_prediction_is_tiny(setup):
    model, grn, ds_dim, rng = setup
    x0 = (rng.uniform(size=(1, model.n_genes)) > 0.5).astype(float)
    target = x0[0]
    model.readout_w.data[:] = 0.0
    model.readout_b.data[:] = np.where(target > 0, 40.0, -40.0)
    loss = build_bce_loss(model, x0, np.zeros(1, dtype=int), [Control()], {}, grn.adjacency)
    assert loss.item() <= 1e-6


def test_bce_gradients_match_finite_differences(setup):
    model, grn, ds_dim, rng = setup
    from cellbridge.nn.gradcheck import grad_check

    x0 = np.abs(rng.normal(size=(5, model.n_genes)))
    x0[rng.uniform(size=x0.shape) < 0.3] = 0.0
    conds = [Control(), GeneKnockout((1,)), Molecule(tuple(rng.normal(size=ds_dim)), 0.5),
             Control(), GeneKnockout((0, 4))]
    ctrl = {2: rng.uniform(size=model.n_genes)}
    cells = rng.integers(0, 2, size=5)

    def loss_fn():
        return build_bce_loss(model, x0, cells, conds, ctrl, grn.adjacency)

    assert grad_check(loss_fn, model.parameters(), n_coords=200, rng=rng) <= 1e-4


def test_mask_train_step_learns_constant_pattern(setup):
    model, grn, ds_dim, rng = setup
    opt = Adam(model.parameters(), lr=5e-3)
    pattern = (rng.uniform(size=model.n_genes) > 0.4).astype(float)
    x0 = np.tile(pattern, (8, 1)) * rng.uniform(0.5, 1.5, size=(8, model.n_genes))
    batch = {"x0": x0, "cell_types": ["ct0"] * 8, "conditions": [Control()] * 8}
    losses = [mask_train_step(model, batch, rng, opt, grn) for _ in range(60)]
    assert losses[-1] < losses[0]
    prob = mask_forward(model, "ct0", pattern, Control(), grn)
    acc = np.mean((prob >= 0.5) == (pattern > 0))
    assert acc == 1.0


def test_mask_train_step_molecule_requires_stats(setup):
    model, grn, ds_dim, rng = setup
    opt = Adam(model.parameters(), lr=1e-3)
    batch = {
        "x0": np.ones((2, model.n_genes)),
        "cell_types": ["ct0", "ct0"],
        "conditions": [Molecule(tuple(np.zeros(ds_dim)), 1.0)] * 2,
    }
    with pytest.raises(ValueError):
        mask_train_step(model, batch, rng, opt, grn, stats=None)
    stats = {"ct0": ControlStats("ct0", np.full(model.n_genes, 0.5), np.full(model.n_genes, 0.1))}
    assert np.isfinite(mask_train_step(model, batch, rng, opt, grn, stats=stats))


def test_mask_predict_vote_mechanics(setup):
    model, grn, ds_dim, rng = setup
    samples = rng.uniform(size=(1, model.n_genes))
    single = mask_predict(model, samples, "ct0", Control(), tau=0.5, grn=grn)
    prob = mask_forward(model, "ct0", samples[0], Control(), grn)
    np.testing.assert_array_equal(single.binary, (prob >= 0.5).astype(int))
    np.testing.assert_array_equal(single.agg_count, single.binary)

    # boundary: probability exactly tau counts as an active vote
    model.readout_w.data[:] = 0.0
    model.readout_b.data[:] = 0.0
    at_tau = mask_predict(model, samples, "ct0", Control(), tau=0.5, grn=grn)
    np.testing.assert_array_equal(at_tau.binary, np.ones(model.n_genes, dtype=int))


def test_mask_predict_majority_rule():
    # stub model: votes depend on the control sample's first entry
    class Stub:
        n_genes = 4

        def __init__(self):
            self.cell_index = {"ct0": 0}

    import cellbridge.maskmodel as mm

    stub = Stub()
    probs = {0.0: np.array([0.9, 0.9, 0.1, 0.4]),
             1.0: np.array([0.9, 0.1, 0.1, 0.6]),
             2.0: np.array([0.1, 0.9, 0.1, 0.7])}

    def fake_forward(model, ct, ctrl, P, grn):
        return probs[float(ctrl[0])]

    orig = mm.mask_forward
    mm.mask_forward = fake_forward
    try:
        samples = np.array([[0.0] * 4, [1.0] * 4, [2.0] * 4])
        out = mm.mask_predict(stub, samples, "ct0", Control(), tau=0.5, grn=None)
        # votes per gene: [1,1,0]=2 -> 1; [1,0,1]=2 -> 1; [0,0,0]=0 -> 0; [0,1,1]=2 -> 1
        np.testing.assert_array_equal(out.agg_count, [2, 2, 0, 2])
        np.testing.assert_array_equal(out.binary, [1, 1, 0, 1])
    finally:
        mm.mask_forward = orig


def test_mask_predict_validation(setup):
    model, grn, ds_dim, rng = setup
    with pytest.raises(ValueError):
        mask_predict(model, np.empty((0, model.n_genes)), "ct0", Control(), 0.5, grn)
    with pytest.raises(ValueError):
        mask_predict(model, rng.uniform(size=(2, model.n_genes)), "ct0", Control(), 1.0, grn)


def test_raising_tau_never_flips_vote_to_active(setup):
    model, grn, ds_dim, rng = setup
    samples = rng.uniform(size=(4, model.n_genes))
    lo = mask_predict(model, samples, "ct0", GeneKnockout((3,)), tau=0.3, grn=grn)
    hi = mask_predict(model, samples, "ct0", GeneKnockout((3,)), tau=0.7, grn=grn)
    assert np.all(hi.agg_count <= lo.agg_count)
    assert np.all(hi.binary <= lo.binary)
