import numpy as np
import pytest
from scipy.optimize import linprog

from cellbridge.metrics import (de_genes, emd, energy_distance, evaluate_prediction,
                                per_gene_emd, wasserstein_1d)


def w1_linear_program(x, y):
    """Optimal-transport LP between empirical measures with cost |x_i - y_j|."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n, m = x.size, y.size
    cost = np.abs(x[:, None] - y[None, :]).ravel()
    a_eq = []
    b_eq = []
    for i in range(n):  # row sums = 1/n
        row = np.zeros(n * m)
        row[i * m:(i + 1) * m] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / n)
    for j in range(m):  # column sums = 1/m
        col = np.zeros(n * m)
        col[j::m] = 1.0
        a_eq.append(col)
        b_eq.append(1.0 / m)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None),
                  method="highs")
    assert res.success
    return res.fun


# -- energy distance ------------------------------------------------------------


def test_energy_distance_identical_sets_is_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 5))
    assert abs(energy_distance(x, x)) <= 1e-10


def test_energy_distance_point_mass_case():
    # singletons (0,0) and (3,4): 2 * 5 - 0 - 0 = 10
    assert energy_distance(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == pytest.approx(10.0)


def test_energy_distance_symmetry_and_nonnegativity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=(rng.integers(2, 10), 4))
        y = rng.normal(size=(rng.integers(2, 10), 4)) + rng.normal()
        d_xy = energy_distance(x, y)
        d_yx = energy_distance(y, x)
        assert d_xy == pytest.approx(d_yx, abs=1e-12)
        assert d_xy >= -1e-9


def test_energy_distance_argument_errors():
    with pytest.raises(ValueError):
        energy_distance(np.zeros((0, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        energy_distance(np.zeros((2, 3)), np.ones((2, 4)))


# -- 1-D Wasserstein --------------------------------------------------------------


def test_wasserstein_translation_examples():
    assert wasserstein_1d([0.0, 1.0], [1.0, 2.0]) == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    x = rng.normal(size=17)
    d = 0.731
    assert wasserstein_1d(x, x + d) == pytest.approx(d, abs=1e-12)


def test_wasserstein_quantile_integration_by_hand():
    # x = {0, 0, 1}, y = {1}: CDF gap is 2/3 on [0, 1) -> W1 = 2/3
    assert wasserstein_1d([0.0, 0.0, 1.0], [1.0]) == pytest.approx(2.0 / 3.0)


def test_wasserstein_translation_covariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=9)
    y = rng.normal(size=13)
    base = wasserstein_1d(x, y)
    assert wasserstein_1d(x + 4.2, y + 4.2) == pytest.approx(base, abs=1e-12)


def test_wasserstein_empty_raises():
    with pytest.raises(ValueError):
        wasserstein_1d([], [1.0])


def test_wasserstein_matches_transport_lp():
    rng = np.random.default_rng(4)
    for _ in range(120):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        x = rng.normal(scale=rng.uniform(0.5, 3.0), size=n)
        y = rng.normal(loc=rng.normal(), size=m)
        assert wasserstein_1d(x, y) == pytest.approx(w1_linear_program(x, y), abs=1e-9)


# -- EMD over genes ----------------------------------------------------------------


def test_emd_reductions():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 3))
    y = rng.normal(size=(14, 3))
    assert emd(x, y, [1]) == pytest.approx(wasserstein_1d(x[:, 1], y[:, 1]))
    assert emd(x, x) == pytest.approx(0.0, abs=1e-12)
    per = per_gene_emd(x, y)
    assert emd(x, y) == pytest.approx(per.mean())


def test_emd_is_arithmetic_mean():
    x = np.array([[0.0, 0.0], [0.0, 0.0]])
    y = np.array([[1.0, 3.0], [1.0, 3.0]])  # per-gene distances 1 and 3
    assert emd(x, y) == pytest.approx(2.0)


def test_emd_permutation_invariance():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 6))
    y = rng.normal(size=(11, 6))
    perm = rng.permutation(6)
    assert emd(x[:, perm], y[:, perm]) == pytest.approx(emd(x, y), abs=1e-12)


def test_emd_argument_errors():
    x = np.zeros((2, 3))
    with pytest.raises(ValueError):
        emd(x, x, [])
    with pytest.raises(ValueError):
        emd(x, x, [7])


# -- DE genes -------------------------------------------------------------------


def test_de_genes_single_shift():
    rng = np.random.default_rng(7)
    control = rng.normal(size=(30, 5))
    perturbed = control + 0.01 * rng.normal(size=(30, 5))
    perturbed[:, 3] += 5.0
    np.testing.assert_array_equal(de_genes(control, perturbed, 1), [3])


def test_de_genes_hand_built_ranking():
    control = np.zeros((4, 5))
    shifts = np.array([0.0, 0.1, 0.5, 0.3, 0.0])
    perturbed = np.tile(shifts, (4, 1))
    np.testing.assert_array_equal(sorted(de_genes(control, perturbed, 2)), [2, 3])
    # k = N returns every gene ordered by rank, ties to the lower index
    np.testing.assert_array_equal(de_genes(control, perturbed, 5), [2, 3, 1, 0, 4])


def test_de_genes_argument_errors():
    x = np.zeros((3, 4))
    with pytest.raises(ValueError):
        de_genes(x, x, 0)
    with pytest.raises(ValueError):
        de_genes(x, x, 5)


# -- report ----------------------------------------------------------------------


def test_evaluate_prediction_report_blocks():
    rng = np.random.default_rng(8)
    control = np.abs(rng.normal(size=(25, 30)))
    truth = control.copy()
    truth[:, :4] += 1.0
    pred = truth + 0.05 * rng.normal(size=truth.shape)
    report = evaluate_prediction(pred, truth, control)
    assert set(report.e_distance) == {"all", "de20", "de40"}
    assert set(report.emd) == {"all", "de20", "de40"}
    assert report.per_gene_emd.shape == (30,)
    assert set(report.de20[:4]) >= {0, 1, 2, 3} or all(g in report.de20 for g in range(4))
    payload = report.to_dict()
    assert len(payload["de20_genes"]) == 20 and len(payload["de40_genes"]) == 30
