from math import factorial

import numpy as np
import pytest
import scipy.sparse as sp

from extform import (
    Coefficient,
    DirichletBC,
    ExternalOperator,
    IdentityOperator,
    Mesh,
    TestFunction,
    TrialFunction,
    apply_dirichlet,
    assemble,
    dx,
    grad,
    inner,
    interpolate,
    replace,
    solve_linear,
    solve_nonlinear,
    unit_interval_mesh,
    unit_square_mesh,
)
from extform.demos import fitted_rate, helmholtz_exact, solve_helmholtz
from extform.errors import FormError, NewtonDivergence, NonConvergence, SingularMatrix
from extform.fem import l2_error, read_field_csv, write_field_csv, write_matrix_coo
from extform.fem.quadrature import interval_rule, make_rule, triangle_rule


class TestQuadrature:
    @pytest.mark.parametrize("degree", [1, 2, 3, 4])
    def test_triangle_monomials(self, degree):
        rule = triangle_rule(degree)
        xi, eta = rule.points.T
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                assert rule.weights @ (xi ** a * eta ** b) == pytest.approx(exact, abs=1e-15, rel=1e-14)

    @pytest.mark.parametrize("degree", [1, 2, 3, 4])
    def test_interval_monomials(self, degree):
        rule = interval_rule(degree)
        x = rule.points[:, 0]
        for k in range(degree + 1):
            assert rule.weights @ x ** k == pytest.approx(1.0 / (k + 1), rel=1e-14)

    def test_weights_sum_to_reference_measure(self):
        for d in (1, 2):
            for deg in range(1, 5):
                expected = 1.0 if d == 1 else 0.5
                assert make_rule(d, deg).weights.sum() == pytest.approx(expected, rel=1e-15)

    def test_degree_clamped(self):
        assert make_rule(2, 9).degree == 4
        assert make_rule(1, 0).degree >= 1


class TestMesh:
    def test_counts(self):
        m = unit_square_mesh(3, 2)
        assert m.num_vertices == 12 and m.num_cells == 12
        assert len(m.boundary_dofs) == 10
        m1 = unit_interval_mesh(5)
        assert m1.num_vertices == 6
        np.testing.assert_array_equal(m1.boundary_dofs, [0, 5])

    @pytest.mark.parametrize("mesh", [unit_interval_mesh(7), unit_square_mesh(10, 10), unit_square_mesh(3, 5)])
    def test_measure(self, mesh):
        one = Coefficient(mesh.function_space())
        assert assemble(1.0 * dx(mesh)) == pytest.approx(1.0, abs=1e-13)
        assert assemble(one * dx, {one: np.ones(mesh.num_vertices)}) == pytest.approx(1.0, abs=1e-13)

    def test_degenerate_cell_rejected(self):
        with pytest.raises(ValueError):
            Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]]))

    def test_h_min(self):
        assert unit_square_mesh(4, 8).h_min == pytest.approx(1 / 8)


@pytest.fixture(scope="module")
def square():
    mesh = unit_square_mesh(4, 4)
    return mesh, mesh.function_space()


class TestAssembly:
    def test_interval_matrices(self):
        mesh = unit_interval_mesh(2)
        V = mesh.function_space()
        u, v = TrialFunction(V), TestFunction(V)
        M = assemble(u * v * dx).toarray()
        K = assemble(inner(grad(u), grad(v)) * dx).toarray()
        np.testing.assert_allclose(M, [[1 / 6, 1 / 12, 0], [1 / 12, 1 / 3, 1 / 12], [0, 1 / 12, 1 / 6]], atol=1e-15)
        np.testing.assert_allclose(K, [[2, -2, 0], [-2, 4, -2], [0, -2, 2]], atol=1e-14)

    def test_reference_triangle_stiffness(self):
        mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        V = mesh.function_space()
        u, v = TrialFunction(V), TestFunction(V)
        K = assemble(inner(grad(u), grad(v)) * dx).toarray()
        M = assemble(u * v * dx).toarray()
        np.testing.assert_allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)
        np.testing.assert_allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24, atol=1e-15)

    def test_gradient_quadratics(self, square, rng):
        mesh, V = square
        x, y = mesh.vertices.T
        f = Coefficient(V)
        xs = interpolate(lambda x, y: x, V)
        ys = interpolate(lambda x, y: y, V)
        assert assemble(inner(grad(f), grad(f)) * dx, {f: xs}) == pytest.approx(1.0, abs=1e-14)
        g = Coefficient(V)
        assert assemble(inner(grad(f), grad(g)) * dx, {f: xs, g: ys}) == pytest.approx(0.0, abs=1e-14)

    def test_symmetric_positive_definite(self, square):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        for form in ((u * v) * dx, (u * v + inner(grad(u), grad(v))) * dx):
            A = assemble(form)
            assert abs(A - A.T).max() < 1e-14
            assert np.linalg.eigvalsh(A.toarray()).min() > 0

    def test_linearity(self, square, rng):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        w = Coefficient(V)
        a, b = w * u * v * dx, inner(grad(u), grad(v)) * dx
        bind = {w: rng.random(V.dimension())}
        assert abs(assemble(a + b, bind) - assemble(a, bind) - assemble(b, bind)).max() < 1e-14

    def test_vector_and_functional(self, square, rng):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        f = Coefficient(V)
        fv = rng.random(V.dimension())
        M = assemble(u * v * dx)
        b = assemble(f * v * dx, {f: fv})
        np.testing.assert_allclose(b.values, M @ fv, atol=1e-15)
        assert assemble(f * f * dx, {f: fv}) == pytest.approx(fv @ (M @ fv), rel=1e-13)

    def test_identity_operator_invariance(self, square, rng):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        c, w = Coefficient(V), Coefficient(V)
        N = ExternalOperator(c, impl=IdentityOperator())
        bind = {c: rng.uniform(0.5, 2.0, V.dimension()), w: rng.random(V.dimension())}
        forms = [
            (c * u * v + c * c * inner(grad(u), grad(v))) * dx,
            (c * w * v + inner(grad(c), grad(v))) * dx,
            (c * c * w + inner(grad(c), grad(w))) * dx,
        ]
        for F in forms:
            plain = assemble(F, bind)
            wrapped = assemble(replace(F, {c: N}), bind)
            if sp.issparse(plain):
                diff = (plain - wrapped).toarray()
            elif isinstance(plain, float):
                diff = plain - wrapped
            else:
                diff = plain.values - wrapped.values
            assert np.max(np.abs(diff)) < 1e-12

    def test_assembly_is_reproducible(self, square, rng):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        c = Coefficient(V)
        bind = {c: rng.random(V.dimension())}
        A1 = assemble(c * inner(grad(u), grad(v)) * dx, bind)
        A2 = assemble(c * inner(grad(u), grad(v)) * dx, bind)
        np.testing.assert_array_equal(A1.data, A2.data)
        np.testing.assert_array_equal(A1.indices, A2.indices)

    def test_unbound_mesh(self):
        from extform import FunctionSpace
        from extform.symbolic import Domain

        V = FunctionSpace(Domain.new(1), "Lagrange", 1)
        with pytest.raises(FormError):
            assemble(TestFunction(V) * dx)


class TestSolvers:
    def test_identity(self, rng):
        b = rng.standard_normal(6)
        np.testing.assert_allclose(solve_linear(sp.identity(6), b).values, b)
        np.testing.assert_allclose(solve_linear(sp.identity(6), b, "cg").values, b)

    def test_mass_solve_matches_dense(self, square, rng):
        mesh, V = square
        u, v = TrialFunction(V), TestFunction(V)
        M = assemble(u * v * dx)
        b = rng.standard_normal(V.dimension())
        dense = np.linalg.solve(M.toarray(), b)
        np.testing.assert_allclose(solve_linear(M, b).values, dense, atol=1e-10)
        cg = solve_linear(M, b, "cg").values
        assert np.linalg.norm(M @ cg - b) <= 1e-10 * np.linalg.norm(b)

    def test_cg_rejects_indefinite(self):
        A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NonConvergence):
            solve_linear(A, np.array([1.0, 0.0]), "cg")

    def test_singular(self):
        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(SingularMatrix):
            solve_linear(A, np.array([1.0, 0.0]))

    def test_dirichlet_matches_interior_solve(self):
        mesh = unit_square_mesh(3, 3)
        V = mesh.function_space()
        u, v = TrialFunction(V), TestFunction(V)
        f = Coefficient(V)
        A = assemble((u * v + inner(grad(u), grad(v))) * dx)
        b = assemble(f * v * dx, {f: np.ones(V.dimension())}).values
        interior = np.setdiff1d(np.arange(V.dimension()), mesh.boundary_dofs)
        dense = np.zeros(V.dimension())
        dense[interior] = np.linalg.solve(A.toarray()[np.ix_(interior, interior)], b[interior])
        for symmetric in (False, True):
            As, bs = apply_dirichlet(A, b, mesh.boundary_dofs, 0.0, symmetric=symmetric)
            np.testing.assert_allclose(solve_linear(As, bs).values, dense, atol=1e-12)
        As, _ = apply_dirichlet(A, b, mesh.boundary_dofs, 0.0, symmetric=True)
        assert abs(As - As.T).max() == 0.0

    def test_newton_linear_residual_one_step(self):
        mesh = unit_square_mesh(6, 6)
        V = mesh.function_space()
        u, f = Coefficient(V), Coefficient(V)
        v = TestFunction(V)
        F = (u * v + inner(grad(u), grad(v)) - f * v) * dx
        res = solve_nonlinear(F, u, {f: interpolate(lambda x, y: 1 + x * y, V)})
        assert res.iterations == 1

    def test_newton_identity_operator_equivalence(self):
        mesh = unit_interval_mesh(16)
        V = mesh.function_space()
        u, f = Coefficient(V), Coefficient(V)
        v = TestFunction(V)
        N = ExternalOperator(u, impl=IdentityOperator())
        fv = interpolate(lambda x: np.sin(3 * x), V)
        plain = solve_nonlinear((u * v - f * v) * dx, u, {f: fv})
        wrapped = solve_nonlinear((N * v - f * v) * dx, u, {f: fv})
        np.testing.assert_allclose(wrapped.solution.values, plain.solution.values, atol=1e-12)
        np.testing.assert_allclose(plain.solution.values, fv.values, atol=1e-12)

    def test_newton_nonlinear(self):
        mesh = unit_interval_mesh(20)
        V = mesh.function_space()
        u = Coefficient(V)
        v = TestFunction(V)
        F = (inner(grad(u), grad(v)) + u * u * u * v - 1.0 * v) * dx
        res = solve_nonlinear(F, u, bcs=[DirichletBC(mesh.boundary_dofs, 0.0)])
        assert 2 <= res.iterations <= 8
        r = assemble(F, {u: res.solution}).values
        r[mesh.boundary_dofs] = 0
        assert np.linalg.norm(r) < 1e-10
        assert res.residuals[-1] < res.residuals[0]

    def test_newton_divergence(self):
        mesh = unit_interval_mesh(4)
        V = mesh.function_space()
        u = Coefficient(V)
        v = TestFunction(V)
        F = (u * u * v + 1.0 * v) * dx  # u^2 = -1 has no real solution
        with pytest.raises(NewtonDivergence) as info:
            solve_nonlinear(F, u, {u: np.ones(5)}, max_iter=15)
        assert len(info.value.trace) >= 2


class TestHelmholtz:
    def test_convergence_order(self):
        sols = [solve_helmholtz(n) for n in (8, 16, 32)]
        rate = fitted_rate([s.h for s in sols], [s.error for s in sols])
        assert 1.9 <= rate <= 2.1

    def test_l2_error_of_exact_interpolant_is_small(self):
        mesh = unit_square_mesh(16, 16)
        V = mesh.function_space()
        assert l2_error(mesh, interpolate(helmholtz_exact, V), helmholtz_exact) < 5e-3
        assert l2_error(mesh, np.zeros(mesh.num_vertices), helmholtz_exact) == pytest.approx(0.5, rel=1e-3)


class TestFieldFiles:
    def test_interpolate_matches_direct_evaluation(self):
        mesh = unit_square_mesh(5, 5)
        V = mesh.function_space()
        f = interpolate(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y), V)
        x, y = mesh.vertices.T
        np.testing.assert_array_equal(f.values, np.sin(np.pi * x) * np.sin(np.pi * y))

    def test_csv_round_trip(self, tmp_path, rng):
        for mesh in (unit_interval_mesh(4), unit_square_mesh(2, 3)):
            vals = rng.standard_normal(mesh.num_vertices)
            path = tmp_path / f"f{mesh.dim}.csv"
            write_field_csv(path, mesh, vals)
            header = path.read_text().splitlines()[0]
            assert header == ("x,value" if mesh.dim == 1 else "x,y,value")
            np.testing.assert_array_equal(read_field_csv(path, mesh), vals)

    def test_csv_rejects_wrong_mesh(self, tmp_path):
        write_field_csv(tmp_path / "f.csv", unit_interval_mesh(4), np.zeros(5))
        with pytest.raises(ValueError):
            read_field_csv(tmp_path / "f.csv", unit_interval_mesh(5))

    def test_matrix_dump(self, tmp_path):
        mesh = unit_interval_mesh(2)
        V = mesh.function_space()
        u, v = TrialFunction(V), TestFunction(V)
        write_matrix_coo(tmp_path / "K.txt", assemble(inner(grad(u), grad(v)) * dx))
        lines = (tmp_path / "K.txt").read_text().splitlines()
        assert lines[0] == "0 0 2.0"
        assert len(lines) == 7
