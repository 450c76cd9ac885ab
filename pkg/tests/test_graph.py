import math

import numpy as np
import pytest

from flexgcn import numerics as nm
from flexgcn.checks import max_relative_error
from flexgcn.graph import (
    DegenerateGraphError,
    PropagationOperator,
    SkeletonGraph,
    h36m_skeleton,
    normalize_adjacency,
    normalize_adjacency_array,
    propagate,
    spectral_radius,
    stability_report,
    symmetrize_modulation,
)
from flexgcn.numerics import DomainError, Matrix, ShapeError, Tape

from helpers import random_connected_graph


class TestSkeletonGraph:
    def test_h36m_default(self):
        g = h36m_skeleton()
        assert g.n_joints == 17
        assert len(g.edges) == 16
        assert g.is_tree()
        assert g.joint_names[0] == "pelvis"

    def test_rejects_self_edge(self):
        with pytest.raises(DomainError):
            SkeletonGraph(3, [(0, 0), (1, 2)])

    def test_rejects_duplicate_edge(self):
        with pytest.raises(DomainError):
            SkeletonGraph(3, [(0, 1), (1, 0), (1, 2)])

    def test_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            SkeletonGraph(3, [(0, 3)])

    def test_rejects_disconnected(self):
        with pytest.raises(DomainError):
            SkeletonGraph(4, [(0, 1), (2, 3)])

    def test_connectivity_check_can_be_deferred(self):
        g = SkeletonGraph(4, [(0, 1), (2, 3)], require_connected=False)
        assert not g.is_connected()

    def test_json_round_trip(self, tmp_path):
        g = h36m_skeleton()
        path = tmp_path / "skel.json"
        g.save_json(path)
        loaded = SkeletonGraph.load_json(path)
        assert loaded.n_joints == g.n_joints
        assert loaded.edges == g.edges
        assert loaded.root == g.root
        assert loaded.joint_names == g.joint_names

    def test_parents_of_tree(self):
        g = SkeletonGraph(4, [(0, 1), (1, 2), (1, 3)])
        assert g.parents() == [-1, 0, 1, 1]


class TestNormalizeAdjacency:
    def test_two_node_edge(self):
        g = SkeletonGraph(2, [(0, 1)])
        a_hat = normalize_adjacency(g)
        assert a_hat.to_numpy().tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_three_node_path(self):
        g = SkeletonGraph(3, [(0, 1), (1, 2)])
        a_hat = normalize_adjacency(g).to_numpy()
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        assert a_hat[0, 1] == pytest.approx(inv_sqrt2, abs=1e-12)
        assert a_hat[1, 2] == pytest.approx(inv_sqrt2, abs=1e-12)
        assert a_hat[0, 2] == 0.0
        # direct 3x3 eigendecomposition oracle
        eig = np.sort(np.linalg.eigvalsh(a_hat))
        assert np.allclose(eig, [-1.0, 0.0, 1.0], atol=1e-12)

    def test_h36m_spot_checks(self):
        g = h36m_skeleton()
        a_hat = normalize_adjacency(g).to_numpy()
        deg = g.degrees()
        # hand computation from the edge list: pelvis(0) has degree 3, right hip(1) degree 2
        assert deg[0] == 3 and deg[1] == 2
        assert a_hat[0, 1] == pytest.approx(1.0 / math.sqrt(6.0), abs=1e-12)
        # row sums bounded by sqrt(deg_i) * max_j deg_j^{-1/2}
        max_inv = np.max(1.0 / np.sqrt(deg))
        for i in range(g.n_joints):
            assert a_hat[i].sum() <= math.sqrt(deg[i]) * max_inv + 1e-12

    def test_symmetric_entries_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            g = random_connected_graph(rng, int(rng.integers(4, 20)))
            a_hat = normalize_adjacency(g).to_numpy()
            assert np.allclose(a_hat, a_hat.T)
            assert a_hat.min() >= 0.0 and a_hat.max() <= 1.0

    def test_isolated_node_raises(self):
        a = np.zeros((3, 3))
        a[0, 1] = a[1, 0] = 1.0
        with pytest.raises(DegenerateGraphError):
            normalize_adjacency_array(a)


class TestSymmetrizeModulation:
    def test_symmetric_fixed_point(self):
        q = Matrix([[0.0, 0.5], [0.5, 0.0]])
        assert symmetrize_modulation(q).equals(q)

    def test_hand_checkable(self):
        q = Matrix([[0.0, 2.0], [0.0, 0.0]])
        assert symmetrize_modulation(q).to_numpy().tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_output_exactly_symmetric(self):
        rng = np.random.default_rng(4)
        q = Matrix(rng.standard_normal((9, 9)))
        out = symmetrize_modulation(q).to_numpy()
        assert np.max(np.abs(out - out.T)) < 1e-12

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            symmetrize_modulation(Matrix.zeros(2, 3))


class TestPropagate:
    def _path3_operator(self, s):
        g = SkeletonGraph(3, [(0, 1), (1, 2)])
        return PropagationOperator(normalize_adjacency(g), s, modulation_enabled=False)

    def test_s_zero_is_single_hop(self):
        op = self._path3_operator(0.0)
        h = Matrix(np.arange(6.0).reshape(3, 2))
        expected = op.a_hat.to_numpy() @ h.to_numpy()
        assert np.array_equal(propagate(op, h).to_numpy(), expected)

    def test_s_one_is_pure_two_hop(self):
        op = self._path3_operator(1.0)
        h = Matrix(np.arange(6.0).reshape(3, 2))
        a = op.a_hat.to_numpy()
        assert np.array_equal(propagate(op, h).to_numpy(), a @ (a @ h.to_numpy()))

    def test_matches_explicit_materialization_on_path(self):
        op = self._path3_operator(0.2)
        h = Matrix.identity(3)
        a = op.a_hat.to_numpy()
        explicit = (0.8 * a + 0.2 * (a @ a)) @ np.eye(3)
        got = propagate(op, h).to_numpy()
        assert np.max(np.abs(got - explicit)) < 1e-10

    def test_matches_explicit_materialization_random_graphs(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            g = random_connected_graph(rng, int(rng.integers(4, 30)))
            s = float(rng.uniform(0.05, 0.95))
            op = PropagationOperator(normalize_adjacency(g), s, modulation_enabled=False)
            h = Matrix(rng.standard_normal((g.n_joints, 5)))
            a = op.a_hat.to_numpy()
            explicit = ((1 - s) * a + s * (a @ a)) @ h.to_numpy()
            assert np.max(np.abs(propagate(op, h).to_numpy() - explicit)) < 1e-10

    def test_row_count_mismatch(self):
        op = self._path3_operator(0.2)
        with pytest.raises(ShapeError):
            propagate(op, Matrix.zeros(4, 2))

    def test_operation_count_has_no_cubic_term(self):
        rng = np.random.default_rng(2)
        g = random_connected_graph(rng, 23)
        f = 7
        op = PropagationOperator(normalize_adjacency(g), 0.2, modulation_enabled=False)
        h = Matrix(rng.standard_normal((23, f)))
        with nm.count_ops() as counts:
            propagate(op, h)
        n = g.n_joints
        assert counts.matmul_madds == 2 * n * n * f
        assert counts.axpy_ops == n * f
        assert counts.matmul_madds < n**3  # would fail if A@A were materialized (f << n)

    def test_modulated_gradient_reaches_q(self):
        g = SkeletonGraph(3, [(0, 1), (1, 2)])
        rng = np.random.default_rng(8)
        q0 = rng.uniform(-0.01, 0.01, size=(3, 3))
        a_hat = normalize_adjacency(g)
        h0 = rng.standard_normal((3, 2))

        def make_loss(ms):
            op = PropagationOperator(a_hat, 0.2, q=ms["q"])
            return nm.sum_all(nm.square(propagate(op, ms["h"])))

        assert max_relative_error(make_loss, {"q": q0, "h": h0}, h=1e-5) < 1e-6


class TestSpectralRadius:
    def test_identity(self):
        r = spectral_radius(Matrix.identity(6))
        assert r.converged
        assert r.value == pytest.approx(1.0, abs=1e-12)

    def test_normalized_adjacency_of_connected_graphs(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            g = random_connected_graph(rng, int(rng.integers(4, 11)))
            a_hat = normalize_adjacency(g).to_numpy()
            r = spectral_radius(a_hat, seed=int(rng.integers(0, 1000)))
            dense = float(np.max(np.abs(np.linalg.eigvalsh(a_hat))))
            assert r.value == pytest.approx(1.0, abs=1e-6)
            assert r.value == pytest.approx(dense, abs=1e-6)

    def test_bipartite_paired_extremes_converge(self):
        # path graphs are bipartite: spectrum contains both +1 and -1
        g = SkeletonGraph(3, [(0, 1), (1, 2)])
        r = spectral_radius(normalize_adjacency(g))
        assert r.converged
        assert r.value == pytest.approx(1.0, abs=1e-9)

    def test_zero_matrix_rejected(self):
        with pytest.raises(DomainError):
            spectral_radius(np.zeros((3, 3)))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((8, 8))
        m = (m + m.T) / 2
        r1 = spectral_radius(m, seed=42)
        r2 = spectral_radius(m, seed=42)
        assert r1 == r2

    def test_non_convergence_flag(self):
        g = h36m_skeleton()
        a_hat = normalize_adjacency(g).to_numpy()
        r = spectral_radius(a_hat, tol=0.0, max_iter=3)
        assert not r.converged
        assert r.iterations == 3

    def test_propagation_radius_bounded_random_sweep(self):
        rng = np.random.default_rng(100)
        for _ in range(25):
            g = random_connected_graph(rng, int(rng.integers(4, 51)))
            a = normalize_adjacency(g).to_numpy()
            p = 0.8 * a + 0.2 * (a @ a)
            r = spectral_radius(p, seed=int(rng.integers(0, 10_000)))
            assert r.value <= 1.0 + 1e-9


class TestStabilityReport:
    def test_bound_holds_each_row(self):
        g = h36m_skeleton()
        report = stability_report(g, [0.1, 0.2, 0.5, 0.9])
        assert all(row.holds for row in report.rows)
        for row in report.rows:
            assert row.rho_p <= row.bound + 1e-9

    def test_bound_is_one_on_connected_graph(self):
        g = h36m_skeleton()
        report = stability_report(g, [0.2])
        assert report.rows[0].bound == pytest.approx(1.0, abs=1e-12)

    def test_adversarial_modulation_flagged_without_error(self):
        g = h36m_skeleton()
        rng = np.random.default_rng(5)
        q = Matrix(rng.choice([-0.5, 0.5], size=(17, 17)))
        report = stability_report(g, [0.2, 0.5], q=q)
        for row in report.rows:
            assert row.rho_modulated is not None
            # dense eigensolve cross-check of the modulated radius
            qs = q.to_numpy()
            a_mod = normalize_adjacency(g).to_numpy() + (qs + qs.T) / 2
            pm = (1 - row.s) * a_mod + row.s * (a_mod @ a_mod)
            dense = float(np.max(np.abs(np.linalg.eigvalsh(pm))))
            assert row.rho_modulated == pytest.approx(dense, rel=1e-6)
        assert any(row.rho_modulated > 1.0 for row in report.rows)

    def test_csv_schema(self, tmp_path):
        g = h36m_skeleton()
        path = tmp_path / "stability.csv"
        stability_report(g, [0.2, 0.5]).write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "s,rho_P,bound,holds,rho_modulated"
        assert len(lines) == 3
        assert lines[1].split(",")[3] == "true"

    def test_s_outside_open_interval_rejected(self):
        with pytest.raises(DomainError):
            stability_report(h36m_skeleton(), [0.0, 0.5])


class TestPropagationOperatorValidation:
    def test_rejects_asymmetric(self):
        with pytest.raises(DomainError):
            PropagationOperator(Matrix([[0.0, 1.0], [0.5, 0.0]]), 0.2)

    def test_rejects_bad_s(self):
        a = normalize_adjacency(SkeletonGraph(2, [(0, 1)]))
        with pytest.raises(DomainError):
            PropagationOperator(a, 1.5)

    def test_rejects_nonzero_diagonal(self):
        with pytest.raises(DomainError):
            PropagationOperator(Matrix([[0.5, 0.5], [0.5, 0.0]]), 0.2)

    def test_effective_adjacency_symmetric_when_enabled(self):
        g = h36m_skeleton()
        rng = np.random.default_rng(0)
        op = PropagationOperator.from_graph(g, 0.2, rng=rng)
        a_eff = op.effective_adjacency().to_numpy()
        assert np.max(np.abs(a_eff - a_eff.T)) < 1e-12
