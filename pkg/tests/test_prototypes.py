import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dglab import diffgraph as dg
from dglab.divergence import cost_matrix
from dglab.prototypes import PrototypeSet, assign, empirical_pi, init_prototypes, projection_loss, subspace_of

from .oracles import central_differences, ot_linprog, relative_error


def unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestInitPrototypes:
    def test_count_is_sixteen_per_class(self):
        assert init_prototypes(C=4, d_z=8).M == 64

    def test_uniform_weights_and_unit_norm(self):
        p = init_prototypes(C=3, d_z=5, seed=2)
        np.testing.assert_allclose(p.weights, np.full(48, 1 / 48))
        np.testing.assert_allclose(np.linalg.norm(p.vectors, axis=1), 1.0, atol=1e-12)

    def test_sample_init(self):
        z = np.random.default_rng(0).standard_normal((10, 4))
        p = init_prototypes(C=2, d_z=4, per_class_factor=2, scheme="sample_init", samples=z)
        assert p.M == 4
        np.testing.assert_allclose(np.linalg.norm(p.vectors, axis=1), 1.0, atol=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            init_prototypes(C=2, d_z=0)
        with pytest.raises(ValueError):
            init_prototypes(C=2, d_z=3, scheme="grid")
        with pytest.raises(ValueError):
            PrototypeSet(np.eye(2), np.array([0.7, 0.7]))


class TestAssign:
    def test_identity_matching(self):
        protos = init_prototypes(C=2, d_z=6, per_class_factor=3, seed=4)
        a = assign(protos.vectors.copy(), protos, eps=1e-3, max_iters=5000)
        np.testing.assert_array_equal(a.hard, np.arange(protos.M))
        assert a.cost < 1e-6

    def test_column_sums(self):
        rng = np.random.default_rng(1)
        protos = PrototypeSet(unit_rows(rng.standard_normal((5, 3))), rng.dirichlet(np.ones(5)))
        a = assign(rng.standard_normal((8, 3)), protos, eps=0.05, max_iters=2000, tol=1e-10)
        np.testing.assert_allclose(a.coupling.sum(0), protos.weights, atol=1e-5)
        np.testing.assert_allclose(a.coupling.sum(1), np.full(8, 1 / 8), atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_three_by_two_against_vertices(self, seed):
        rng = np.random.default_rng(seed)
        protos = PrototypeSet(unit_rows(rng.standard_normal((2, 3))), np.full(2, 0.5))
        z = rng.standard_normal((3, 3))
        a = assign(z, protos, eps=1e-3, max_iters=5000)
        opt = ot_linprog(cost_matrix(z, protos.vectors), np.full(3, 1 / 3), protos.weights)
        assert abs(a.cost - opt) <= 0.02 * opt

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            assign(np.zeros((0, 3)), init_prototypes(2, 3))


class TestProjectionLoss:
    def test_batches_at_prototypes(self):
        protos = init_prototypes(C=2, d_z=4, per_class_factor=2, seed=3)
        z = dg.parameter(protos.vectors.copy())
        loss, _ = projection_loss([z], protos, eps=1e-3, max_iters=5000)
        dg.backward(loss)
        assert loss.item() < 1e-6
        assert np.abs(z.grad).max() < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_with_plan_frozen(self, seed):
        rng = np.random.default_rng(seed)
        protos = PrototypeSet(unit_rows(rng.standard_normal((4, 3))), np.full(4, 0.25))
        zs = [dg.parameter(rng.standard_normal((5, 3))), dg.parameter(rng.standard_normal((6, 3)))]
        P = dg.parameter(protos.vectors.copy())
        loss, _ = projection_loss(zs, protos, P)
        dg.backward(loss)
        analytic = [z.grad for z in zs] + [P.grad]
        plans = [assign(z.value, protos).coupling for z in zs]

        def frozen():
            Pn = unit_rows(P.value)
            return sum((plan * (1.0 - unit_rows(z.value) @ Pn.T)).sum() for z, plan in zip(zs, plans))

        numeric = central_differences(frozen, [z.value for z in zs] + [P.value])
        assert relative_error(analytic, numeric) <= 1e-4

    def test_duplicating_rows(self):
        rng = np.random.default_rng(7)
        protos = PrototypeSet(unit_rows(rng.standard_normal((3, 4))), np.full(3, 1 / 3))
        batches = [rng.standard_normal((4, 4)), rng.standard_normal((5, 4))]
        base, _ = projection_loss([dg.constant(b) for b in batches], protos, max_iters=2000, tol=1e-10)
        doubled, _ = projection_loss([dg.constant(np.vstack([b, b])) for b in batches], protos, max_iters=2000, tol=1e-10)
        assert doubled.item() == pytest.approx(base.item(), rel=1e-8)


class TestSubspaceOf:
    def test_exact_prototype(self):
        protos = init_prototypes(C=2, d_z=5, per_class_factor=5, seed=1)
        assert subspace_of(protos.vectors[5:6], None, protos)[0] == 5

    def test_tie_goes_to_lower_index(self):
        vecs = unit_rows(np.random.default_rng(0).standard_normal((8, 2)))
        vecs[2] = [1.0, 0.0]
        vecs[7] = [0.0, 1.0]
        vecs[[0, 1, 3, 4, 5, 6]] = [-1.0, -1.0] / np.sqrt(2)
        protos = PrototypeSet(vecs, np.full(8, 1 / 8))
        assert subspace_of(np.array([[1.0, 1.0]]), None, protos)[0] == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_partition(self, seed, M):
        rng = np.random.default_rng(seed)
        protos = PrototypeSet(unit_rows(rng.standard_normal((M, 3))), np.full(M, 1 / M))
        idx = subspace_of(rng.standard_normal((50, 3)), None, protos)
        assert idx.shape == (50,) and idx.min() >= 0 and idx.max() < M
        pi = empirical_pi(rng.standard_normal((50, 3)), None, protos)
        assert pi.sum() == pytest.approx(1.0)


class TestEmpiricalPi:
    def test_single_prototype(self):
        protos = PrototypeSet(np.ones((1, 3)), np.ones(1))
        np.testing.assert_array_equal(empirical_pi(np.random.default_rng(0).standard_normal((9, 3)), None, protos), [1.0])

    def test_brute_count(self):
        rng = np.random.default_rng(3)
        protos = PrototypeSet(unit_rows(rng.standard_normal((5, 3))), np.full(5, 0.2))
        W = rng.standard_normal((4, 3))
        x = rng.standard_normal((40, 4))
        counts = np.zeros(5)
        for row in x:
            z = row @ W
            cos = [z @ p / np.linalg.norm(z) for p in protos.vectors]
            counts[int(np.argmax(cos))] += 1
        np.testing.assert_allclose(empirical_pi(x, lambda a: a @ W, protos), counts / 40)

    def test_empty_region(self):
        protos = PrototypeSet(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.full(2, 0.5))
        assert empirical_pi(np.array([[2.0, 0.1], [1.0, -0.3]]), None, protos)[1] == 0.0
