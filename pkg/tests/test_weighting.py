from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from owrf.core import BootstrapSample, Dataset, Forest, HatMatrix, RegressionTree, equal_weights
from owrf.simplex import grid_simplex
from owrf.weighting import (
    CriterionContext,
    NoOOBError,
    c_dprime_qp,
    c_zero_qp,
    cesaro_weights,
    crf_weights,
    crf_weights_from_tpe,
    criterion_c_dprime,
    criterion_c_prime,
    criterion_c_zero,
    grad_c_prime,
    oob_errors,
    solve_one_step,
    solve_two_steps,
    tpe_ranks,
    tpe_star,
    wrf_weights,
    wrf_weights_from_tpe,
)

from conftest import toy_forest

Y4 = np.array([1.0, 3.0, 10.0, 14.0])
# tree A: leaves {0,1} {2,3}; tree B: leaves {0} {1,2,3}
PA = np.array([[.5, .5, 0, 0], [.5, .5, 0, 0], [0, 0, .5, .5], [0, 0, .5, .5]])
PB = np.array([[1, 0, 0, 0], [0, 1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 1 / 3, 1 / 3], [0, 1 / 3, 1 / 3, 1 / 3]])


def hat(P):
    return HatMatrix(sp.csr_matrix(P), np.diag(P).copy())


@pytest.fixture
def ctx4():
    return CriterionContext.from_hats([hat(PA), hat(PB)], Y4)


def dense_c_prime(Ps, y, w):
    P = sum(wm * Pm for wm, Pm in zip(w, Ps))
    e = y - P @ y
    return float(e @ e + 2 * np.sum(e ** 2 * np.diag(P)))


def grid_values(ctx, grid, G, b):
    return np.einsum("ij,jk,ik->i", grid, G, grid) + grid @ b


# --- criteria --------------------------------------------------------------

def test_c_prime_hand_expansion(ctx4):
    # r = (-0.5, -2.5, -0.5, 3.5), d = (3/4, 5/12, 5/12, 5/12)
    # |r|^2 = 19, sum r^2 d = 0.1875 + 18.75 * 5/12 = 8
    assert criterion_c_prime(ctx4, [0.5, 0.5]) == pytest.approx(35.0, abs=1e-12)
    assert criterion_c_prime(ctx4, [0.5, 0.5]) == pytest.approx(dense_c_prime([PA, PB], Y4, [0.5, 0.5]))


def test_c_prime_single_tree(ctx4):
    e = Y4 - PA @ Y4
    only = CriterionContext.from_hats([hat(PA)], Y4)
    assert criterion_c_prime(only, [1.0]) == pytest.approx(e @ e + 2 * np.sum(e ** 2 * 0.5))


def test_c_prime_interpolating_trees_vanish():
    y = np.array([1.0, 2.0, 3.0])
    ctx = CriterionContext.from_hats([hat(np.eye(3)), hat(np.eye(3))], y)
    assert criterion_c_prime(ctx, [0.3, 0.7]) == 0.0
    rep = solve_two_steps(ctx)
    assert rep.objective == 0.0 and rep.extra["sigma2"] == 0.0
    assert abs(rep.w.sum() - 1) < 1e-12


def test_c_zero_hand_value(ctx4):
    # equal-weight residual (-0.5, -2.5, -0.5, 3.5): sigma2 = 19/4; traces (2, 2)
    s2 = ctx4.sigma2_equal()
    assert s2 == pytest.approx(19 / 4)
    w = np.array([0.25, 0.75])
    r = 0.25 * (Y4 - PA @ Y4) + 0.75 * (Y4 - PB @ Y4)
    assert criterion_c_zero(ctx4, w, s2) == pytest.approx(r @ r + 2 * s2 * 2.0)
    assert criterion_c_zero(ctx4, w, 0.0) == pytest.approx(r @ r)
    with pytest.raises(ValueError):
        criterion_c_zero(ctx4, w, -1.0)


def test_c_dprime_cases(ctx4):
    w = np.array([0.3, 0.7])
    r = ctx4.residual(w)
    assert criterion_c_dprime(ctx4, w, np.zeros(4)) == pytest.approx(r @ r)
    assert criterion_c_dprime(ctx4, w, r) == pytest.approx(criterion_c_prime(ctx4, w))
    e = np.array([1.0, -2.0, 0.5, 0.0])
    d = 0.3 * np.diag(PA) + 0.7 * np.diag(PB)
    assert criterion_c_dprime(ctx4, w, e) == pytest.approx(r @ r + 2 * np.sum(e ** 2 * d))
    with pytest.raises(ValueError):
        criterion_c_dprime(ctx4, w, np.zeros(3))


def test_qp_forms_match_criteria():
    data, forest = toy_forest(n=25, m=4, seed=2)
    ctx = CriterionContext.from_forest(forest, data)
    rng = np.random.default_rng(0)
    e = rng.normal(size=25)
    G0, b0 = c_zero_qp(ctx, 1.7)
    G2, b2 = c_dprime_qp(ctx, e)
    for w in rng.dirichlet(np.ones(4), size=10):
        assert w @ G0 @ w + b0 @ w == pytest.approx(criterion_c_zero(ctx, w, 1.7), rel=1e-12)
        assert w @ G2 @ w + b2 @ w == pytest.approx(criterion_c_dprime(ctx, w, e), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_quadratic_criteria_convex(seed, a):
    data, forest = toy_forest(n=20, m=3, seed=seed % 7)
    ctx = CriterionContext.from_forest(forest, data)
    rng = np.random.default_rng(seed)
    w1, w2 = rng.dirichlet(np.ones(3), size=2)
    e = rng.normal(size=20)
    mid = a * w1 + (1 - a) * w2
    for f in (lambda w: criterion_c_zero(ctx, w, 0.8), lambda w: criterion_c_dprime(ctx, w, e)):
        assert f(mid) <= a * f(w1) + (1 - a) * f(w2) + 1e-9


def test_gradient_matches_central_differences():
    data, forest = toy_forest(n=30, m=5, seed=4)
    ctx = CriterionContext.from_forest(forest, data)
    rng = np.random.default_rng(0)
    h = 1e-6
    for w in rng.dirichlet(np.ones(5), size=20):
        g = grad_c_prime(ctx, w)
        fd = np.array([(criterion_c_prime(ctx, w + h * ei) - criterion_c_prime(ctx, w - h * ei)) / (2 * h)
                       for ei in np.eye(5)])
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_degenerate_dominance():
    # same residual vector, smaller trace on tree 0
    e = np.array([1.0, -1.0, 2.0])
    ctx = CriterionContext(np.zeros(3), np.column_stack([e, e]),
                           np.column_stack([np.full(3, 0.2), np.full(3, 0.5)]), np.array([0.6, 1.5]))
    rep = solve_two_steps(ctx)
    assert rep.extra["w_star"].tolist() == [1.0, 0.0]


# --- solvers ---------------------------------------------------------------

def test_single_tree_solvers():
    data, forest = toy_forest(n=15, m=1)
    ctx = CriterionContext.from_forest(forest, data)
    assert solve_two_steps(ctx).w.tolist() == [1.0]
    assert solve_one_step(ctx).w.tolist() == [1.0]


def test_identical_trees_one_step():
    data, forest = toy_forest(n=20, m=1, seed=3)
    ctx1 = CriterionContext.from_forest(forest, data)
    ctx2 = CriterionContext.from_hats([forest.hats[0], forest.hats[0]], data.y)
    rep = solve_one_step(ctx2)
    assert rep.objective == pytest.approx(criterion_c_prime(ctx1, [1.0]), rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_two_steps_vs_grid(seed):
    data, forest = toy_forest(n=25, m=3, seed=seed)
    ctx = CriterionContext.from_forest(forest, data)
    rep = solve_two_steps(ctx)
    grid = grid_simplex(3, 0.01)
    G, b = c_dprime_qp(ctx, rep.extra["e_tilde"])
    vals = grid_values(ctx, grid, G, b)
    assert rep.objective <= vals.min() + 1e-6
    # the minimiser is unique when G is non-singular; compare coordinates then
    if np.linalg.eigvalsh(G)[0] > 1e-6 * np.abs(G).max():
        assert np.abs(rep.w - grid[np.argmin(vals)]).max() <= 0.02
    G0, b0 = c_zero_qp(ctx, rep.extra["sigma2"])
    assert rep.extra["objective_c0"] <= grid_values(ctx, grid, G0, b0).min() + 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_one_step_vs_grid(seed):
    data, forest = toy_forest(n=25, m=3, seed=seed)
    ctx = CriterionContext.from_forest(forest, data)
    rep = solve_one_step(ctx)
    vals = [criterion_c_prime(ctx, w) for w in grid_simplex(3, 0.01)]
    assert rep.objective <= min(vals) + 1e-6
    assert rep.objective <= criterion_c_prime(ctx, equal_weights(3)) + 1e-10


# --- OOB based weightings --------------------------------------------------

def oob_forest():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0.0, 1.0, 10.0, 13.0])
    t = RegressionTree.from_dict({"kind": "cart", "n_features": 1, "root": {
        "feature": 0, "cut": 2.5,
        "left": {"members": [[0, 2]], "mean": 0.0},
        "right": {"members": [[2, 2]], "mean": 10.0}}})
    return Dataset(X, y), Forest([t], [BootstrapSample(np.array([2, 0, 2, 0]))], [1.0])


def test_tpe_star_hand_enumeration():
    data, forest = oob_forest()
    # OOB rows 1 and 3 with errors |0 - 1| = 1 and |10 - 13| = 3
    assert tpe_star(0, forest, data) == 2.0


def test_tpe_star_without_oob():
    data, forest = toy_forest(n=6, m=1)
    forest.samples[0] = BootstrapSample(np.ones(6, dtype=int))
    with pytest.raises(NoOOBError):
        tpe_star(0, forest, data)
    assert np.isnan(oob_errors(forest, data)[0])


def test_tpe_star_matches_manual_loop():
    data, forest = toy_forest(n=40, m=5, seed=1)
    for m, (t, s) in enumerate(zip(forest.trees, forest.samples)):
        errs = [abs(t.predict(data.X[i:i + 1])[0] - data.y[i]) for i in range(40) if s.counts[i] == 0]
        assert tpe_star(m, forest, data) == pytest.approx(sum(errs) / len(errs), rel=1e-12)


@pytest.mark.parametrize("tpe, lam, expected", [
    ((1.0, 2.0), 1.0, (2 / 3, 1 / 3)),
    ((1.0, 2.0, 4.0), 2.0, (16 / 21, 4 / 21, 1 / 21)),
    ((0.7, 0.7, 0.7), 3.0, (1 / 3, 1 / 3, 1 / 3)),
    ((0.0, 2.0, 0.0), 1.0, (0.5, 0.0, 0.5)),
    ((1.0, np.nan, 3.0), 1.0, (1 / (1 + 0.5 + 1 / 3), 0.5 / (1 + 0.5 + 1 / 3), 1 / 3 / (1 + 0.5 + 1 / 3))),
])
def test_wrf_weights(tpe, lam, expected):
    np.testing.assert_allclose(wrf_weights_from_tpe(tpe, lam), expected, atol=1e-14)


def test_wrf_extreme_lambda_is_stable():
    w = wrf_weights_from_tpe([1e-3, 1e3], lam=200)
    assert np.isfinite(w).all() and w.tolist() == [1.0, 0.0]


def test_wrf_variants():
    np.testing.assert_allclose(wrf_weights_from_tpe([0.2, 0.6], variant="linear"), [8 / 12, 4 / 12])
    e = np.exp([5.0, 2.0])
    np.testing.assert_allclose(wrf_weights_from_tpe([0.2, 0.5], variant="exp"), e / e.sum())
    with pytest.raises(ValueError):
        wrf_weights_from_tpe([1.0], variant="nope")


def test_cesaro_exact():
    assert cesaro_weights([1, 2, 3]) == [Fraction(11, 18), Fraction(5, 18), Fraction(2, 18)]
    assert cesaro_weights([1]) == [Fraction(1)]
    w = cesaro_weights([4, 1, 3, 2, 5])
    assert sum(w) == 1 and w[1] == max(w)


def test_crf_rank_then_weight():
    np.testing.assert_allclose(crf_weights_from_tpe([0.5, 0.2, 0.9]), [5 / 18, 11 / 18, 2 / 18], atol=1e-15)
    # ties broken by tree index
    assert tpe_ranks([0.3, 0.3, 0.1]).tolist() == [2, 3, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=15))
def test_weightings_on_simplex_and_monotone(tpe):
    tpe = np.array(tpe)
    for w in (wrf_weights_from_tpe(tpe, 2.0), crf_weights_from_tpe(tpe)):
        assert w.min() >= 0 and abs(w.sum() - 1) < 1e-12
        order = np.argsort(tpe, kind="stable")
        assert (np.diff(w[order]) <= 1e-15).all()


def test_forest_level_wrappers():
    data, forest = toy_forest(n=40, m=6, seed=2)
    tpe = oob_errors(forest, data)
    np.testing.assert_allclose(wrf_weights(forest, data, 2.0), wrf_weights_from_tpe(tpe, 2.0))
    np.testing.assert_allclose(crf_weights(forest, data), crf_weights_from_tpe(tpe))
