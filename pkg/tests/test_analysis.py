import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vemocp.analysis import (
    CSV_COLUMNS,
    ErrorReport,
    ErrorRow,
    PointLocator,
    ReferenceField,
    control_error,
    energy_error,
    exact_errors,
    fit_rates,
    format_cell,
    l2_error_state,
    projected_fields,
    reference_errors,
)
from vemocp.experiments import make_mesh
from vemocp.mesh import generate_cartesian, generate_star
from vemocp.ocp import constant, control_space, discretize, solve_ocp
from vemocp.presets import TEST1, TEST2
from vemocp.vemspace import interpolate

EX = TEST1.exact
ONE = constant(1.0)


# ---------------------------------------------------------------------------
# closed-form oracles: the zero discrete function against Test 1's data


@pytest.mark.parametrize("k", [1, 2])
def test_zero_function_errors(k):
    mesh = generate_star(4)
    disc = discretize(mesh, k)
    zero = np.zeros(disc.layout.n_dofs)
    # int (1 - x1)^2 sin^2(pi x2) = 1/3 * 1/2
    assert l2_error_state(disc, zero, EX.y) == pytest.approx(math.sqrt(1 / 6), rel=1e-10)
    # + int |grad y|^2 = 1/2 + pi^2/6
    assert energy_error(disc, zero, EX.y, EX.grad_y, ONE, ONE) == pytest.approx(
        math.sqrt(2 / 3 + math.pi**2 / 6), rel=1e-10
    )
    cs = control_space(mesh, k)
    assert control_error(mesh, cs, np.zeros(cs.n_dofs), EX.u) == pytest.approx(math.sqrt(0.5), rel=1e-10)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_polynomial_interpolant_has_zero_error(k):
    mesh = generate_star(3)
    disc = discretize(mesh, k)

    def p(x1, x2):
        return x1**k - 2 * x2 + 0.3

    def grad(x1, x2):
        return k * x1 ** (k - 1), -2.0 + 0 * x2

    v = interpolate(disc.layout, mesh, p, disc.spaces)
    assert l2_error_state(disc, v, p) < 1e-12
    assert energy_error(disc, v, p, grad, ONE, ONE) < 1e-11


def test_error_homogeneity_and_triangle_inequality():
    mesh = generate_cartesian(4)
    disc = discretize(mesh, 2)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, disc.layout.n_dofs))

    def zero(x1, x2):
        return 0 * x1

    def zgrad(x1, x2):
        return 0 * x1, 0 * x2

    def norm(v):
        return energy_error(disc, v, zero, zgrad, ONE, ONE)

    assert norm(3 * a) == pytest.approx(3 * norm(a), rel=1e-12)
    assert norm(a + b) <= norm(a) + norm(b) + 1e-14
    assert l2_error_state(disc, -2 * a, zero) == pytest.approx(2 * l2_error_state(disc, a, zero), rel=1e-12)


def test_projected_fields_match_local_projectors():
    mesh = generate_star(2)
    disc = discretize(mesh, 2)
    v = np.random.default_rng(1).normal(size=disc.layout.n_dofs)
    P0, PN = projected_fields(disc, v)
    for c, space in enumerate(disc.spaces):
        np.testing.assert_allclose(P0.coefs[c], space.proj.Pi0k @ v[disc.layout.cell_dofs[c]])
        pt = space.geom.centroid[None, :] + 0.01
        np.testing.assert_allclose(
            PN.values(np.array([c]), pt),
            (space.proj.PiNabla @ v[disc.layout.cell_dofs[c]]) @ _basis_at(space, pt)[0],
            rtol=1e-12,
        )


def _basis_at(space, pt):
    from vemocp.polybasis import eval_basis

    return eval_basis(space.basis, pt)


def test_exact_errors_keys():
    sol = solve_ocp(generate_cartesian(4), TEST1.config(k=1))
    errs = exact_errors(sol, EX)
    assert set(errs) == set(CSV_COLUMNS[2:])
    assert all(v > 0 for v in errs.values())


# ---------------------------------------------------------------------------
# rate fitting


@pytest.mark.parametrize(
    "h, err, slope",
    [
        ([1.0, 0.5], [1.0, 0.25], 2.0),
        ([1.0, 0.5, 0.25], [1.0, 0.5, 0.25], 1.0),
        ([0.1, 0.05, 0.025, 0.0125], [1e-2, 1.25e-3, 1.5625e-4, 1.953125e-5], 3.0),
    ],
)
def test_fit_rates_examples(h, err, slope):
    fit = fit_rates(h, err)
    assert fit.slope == pytest.approx(slope, rel=1e-12)
    assert all(r == pytest.approx(slope, rel=1e-12) for r in fit.pairwise)


def test_fit_rates_noisy_cubic():
    rng = np.random.default_rng(3)
    h = 0.5 ** np.arange(2, 7)
    err = h**3 * (1 + 0.01 * rng.uniform(-1, 1, h.size))
    assert abs(fit_rates(h, err).slope - 3.0) < 0.05


def test_fit_rates_excludes_floor():
    fit = fit_rates([1, 0.5, 0.25, 0.125], [1e-6, 1.25e-7, 1.5e-8, 5e-12])
    assert fit.excluded == (3,)
    assert fit.used == (0, 1, 2)
    single = fit_rates([1, 0.5], [1e-3, 1e-12])
    assert math.isnan(single.slope)


@pytest.mark.parametrize("h, err", [([1, 0.5], [1.0]), ([0, 1], [1.0, 1.0]), ([[1.0]], [[1.0]])])
def test_fit_rates_rejects(h, err):
    with pytest.raises(ValueError):
        fit_rates(h, err)


@given(st.floats(1e-3, 1e3), st.floats(0.5, 6.0))
def test_fit_rates_invariant_under_h_rescaling(scale, p):
    h = np.array([0.2, 0.1, 0.05])
    err = 0.3 * h**p
    a = fit_rates(h, err, floor=0.0).slope
    b = fit_rates(scale * h, err, floor=0.0).slope
    assert a == pytest.approx(b, rel=1e-9)
    assert a == pytest.approx(p, rel=1e-9)


def _row(h, e):
    return ErrorRow(h, 10, e, e, e, e, e, 0.5, {"k": 1})


def test_report_needs_three_levels():
    rep = ErrorReport([_row(0.5, 1.0), _row(0.25, 0.25)])
    assert all(v is None for v in rep.slopes().values())
    rep.append(_row(0.125, 0.0625))
    assert all(v == pytest.approx(2.0) for v in rep.slopes().values())


def test_report_csv_and_json():
    rep = ErrorReport([_row(0.5, 1.0), _row(0.25, float("nan"))])
    lines = rep.to_csv(extra_columns=("k",)).splitlines()
    assert lines[0] == "k," + ",".join(CSV_COLUMNS)
    assert lines[1].startswith("1,0.5,10,1.0")
    assert "nan" in lines[2]
    assert '"slopes"' in rep.to_json(name="x")


@pytest.mark.parametrize("value, text", [(None, "null"), (0.1, "0.1"), (3, "3"), ("a", "a")])
def test_format_cell(value, text):
    assert format_cell(value) == text


# ---------------------------------------------------------------------------
# reference comparison


def test_point_locator():
    mesh = generate_star(4)
    loc = PointLocator(mesh)
    cells = loc.locate(mesh.centroids)
    np.testing.assert_array_equal(cells, np.arange(mesh.n_cells))
    # vertices are on edges and still located
    assert np.all(loc.locate(mesh.vertices) >= 0)
    with pytest.raises(LookupError):
        loc.locate(np.array([[2.0, 2.0]]))


def test_reference_against_itself_is_zero(tmp_path):
    mesh = make_mesh("cartesian:5", TEST2)
    sol = solve_ocp(mesh, TEST2.config(k=2))
    ref = ReferenceField.from_solution(sol)
    errs = reference_errors(sol, ref)
    assert max(v for k, v in errs.items() if k != "Jh") < 1e-10
    ref.save(tmp_path / "ref")
    again = ReferenceField.load(tmp_path / "ref")
    errs2 = reference_errors(sol, again)
    assert max(v for k, v in errs2.items() if k != "Jh") < 1e-10


def test_reference_errors_shrink_with_refinement():
    fine = solve_ocp(make_mesh("cartesian:20", TEST2), TEST2.config(k=2))
    ref = ReferenceField.from_solution(fine)
    coarse = [reference_errors(solve_ocp(make_mesh(f"cartesian:{n}", TEST2), TEST2.config(k=1)), ref) for n in (5, 10)]
    assert coarse[1]["errY_en"] < coarse[0]["errY_en"]
    assert coarse[1]["errY_L2"] < coarse[0]["errY_L2"]
