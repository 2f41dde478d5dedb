import numpy as np
import pytest

from dklite.autodiff import (
    Tape,
    backward,
    chol_solve_logdet,
    jittered_cholesky,
    matmul,
)
from dklite.exceptions import DimensionError, NumericalError

from oracles import central_difference, gauss_solve, gradient_close, matmul_loops, random_spd


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        a = tape.constant(np.eye(2))
        b = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).value, [[1.0, 2.0], [3.0, 4.0]])

    def test_orthogonal_vectors(self):
        tape = Tape()
        a = tape.constant([[1.0, 0.0]])
        b = tape.constant([[0.0], [1.0]])
        assert matmul(a, b).value == pytest.approx(0.0)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(7)
        a_val = rng.normal(size=(3, 4))
        b_val = rng.normal(size=(4, 2))
        tape = Tape()
        out = matmul(tape.constant(a_val), tape.constant(b_val))
        np.testing.assert_allclose(out.value, matmul_loops(a_val, b_val), rtol=1e-12)

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


class TestCholSolveLogdet:
    def test_scaled_identity(self):
        tape = Tape()
        x, logdet = chol_solve_logdet(tape.constant(2.0 * np.eye(2)),
                                      tape.constant(np.eye(2)))
        np.testing.assert_allclose(x.value, 0.5 * np.eye(2))
        assert logdet.item() == pytest.approx(2.0 * np.log(2.0))

    def test_diagonal(self):
        tape = Tape()
        x, logdet = chol_solve_logdet(tape.constant([[2.0, 0.0], [0.0, 3.0]]),
                                      tape.constant([[1.0], [1.0]]))
        np.testing.assert_allclose(x.value, [[0.5], [1.0 / 3.0]])
        assert logdet.item() == pytest.approx(np.log(6.0))

    def test_against_elimination_and_eigenvalue_oracles(self):
        rng = np.random.default_rng(21)
        a_val = random_spd(rng, 5)
        b_val = rng.normal(size=(5, 3))
        tape = Tape()
        x, logdet = chol_solve_logdet(tape.constant(a_val), tape.constant(b_val))
        np.testing.assert_allclose(x.value, gauss_solve(a_val, b_val), rtol=1e-9)
        eigen_logdet = float(np.sum(np.log(np.linalg.eigvalsh(a_val))))
        assert logdet.item() == pytest.approx(eigen_logdet, rel=1e-10)

    def test_inverse_reconstructs_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a_val = random_spd(rng, 6)
            tape = Tape()
            x, _ = chol_solve_logdet(tape.constant(a_val), tape.constant(np.eye(6)))
            residual = np.linalg.norm(x.value @ a_val - np.eye(6))
            assert residual <= 1e-8

    def test_residual_tolerance(self):
        rng = np.random.default_rng(11)
        a_val = random_spd(rng, 8)
        b_val = rng.normal(size=(8, 2))
        tape = Tape()
        x, _ = chol_solve_logdet(tape.constant(a_val), tape.constant(b_val))
        rel = np.linalg.norm(a_val @ x.value - b_val) / np.linalg.norm(b_val)
        assert rel <= 1e-10

    def test_jitter_recovers_semidefinite(self):
        # rank-deficient PSD matrix: plain Cholesky fails, jitter succeeds
        v = np.array([[1.0], [1.0]])
        a = v @ v.T
        factor = jittered_cholesky(a)
        recon = factor @ factor.T
        np.testing.assert_allclose(recon, a, atol=1e-6)

    def test_hopeless_matrix_reports_pivot(self):
        with pytest.raises(NumericalError, match="pivot"):
            jittered_cholesky(-np.eye(3))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0, 3.0])
        grads = backward(tape, x.sum())
        np.testing.assert_array_equal(grads[x], np.ones(3))

    def test_quadratic_gradient(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        grads = backward(tape, (x * x).sum())
        np.testing.assert_allclose(grads[x], [2.0, 4.0])

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            tape.backward(x)

    def test_unreached_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0])
        y = tape.leaf([3.0])
        grads = backward(tape, (x * x).sum())
        np.testing.assert_array_equal(grads[y], np.zeros(1))

    def test_replay_is_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            tape = Tape()
            w = tape.leaf(rng.normal(size=(4, 3)))
            x = tape.constant(rng.normal(size=(5, 4)))
            h = matmul(x, w).elu()
            k = tape.leaf(random_spd(np.random.default_rng(1), 3))
            kinv, logdet = chol_solve_logdet(k, tape.constant(np.eye(3)))
            loss = (matmul(h, kinv) * h).sum() + logdet
            grads = tape.backward(loss)
            return grads[w].copy(), grads[k].copy()

        g1_w, g1_k = run()
        g2_w, g2_k = run()
        assert np.array_equal(g1_w, g2_w)
        assert np.array_equal(g1_k, g2_k)


def _primitive_cases():
    # each case: name, prep(rng) -> flat leaf vector, builder(tape, a, b) -> scalar;
    # the builder must call tape.leaf exactly once per input, in order
    from dklite.autodiff import reciprocal

    def prep_plain(rng):
        return rng.normal(size=6), rng.normal(size=6)

    def prep_positive(rng):
        return np.abs(rng.normal(size=6)) + 0.5, rng.normal(size=6)

    cases = [
        ("add", prep_plain,
         lambda t, a, b: (t.leaf(a) + t.leaf(b)).sum()),
        ("mul", prep_plain,
         lambda t, a, b: (t.leaf(a) * t.leaf(b)).sum()),
        ("matmul", prep_plain,
         lambda t, a, b: matmul(t.leaf(a.reshape(2, 3)), t.leaf(b.reshape(3, 2))).sum()),
        ("transpose", prep_plain,
         lambda t, a, b: (t.leaf(a.reshape(2, 3)).T * t.leaf(b.reshape(3, 2))).sum()),
        ("elu", prep_plain,
         lambda t, a, b: (t.leaf(a).elu() * t.leaf(b)).sum()),
        ("softplus", prep_plain,
         lambda t, a, b: (t.leaf(a).softplus() * t.leaf(b)).sum()),
        ("exp", prep_plain,
         lambda t, a, b: (t.leaf(a).exp() * t.leaf(b)).sum()),
        ("log", prep_positive,
         lambda t, a, b: (t.leaf(a).log() * t.leaf(b)).sum()),
        ("reciprocal", prep_positive,
         lambda t, a, b: (reciprocal(t.leaf(a)) * t.leaf(b)).sum()),
        ("chol_solve_logdet", prep_plain, _chol_case),
    ]
    return cases


def _chol_case(tape, a, b):
    mat = tape.leaf(a.reshape(3, 2))
    spd = matmul(mat.T, mat) + tape.constant(np.eye(2) * 2.0)
    x, logdet = chol_solve_logdet(spd, tape.leaf(b.reshape(2, 3)))
    return x.sum() + logdet


@pytest.mark.parametrize("name,prep,builder", _primitive_cases())
def test_primitive_gradients_match_finite_differences(name, prep, builder):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a0, b0 = prep(rng)
        na = a0.size

        def value_at(flat):
            tape = Tape()
            root = builder(tape, flat[:na].copy(), flat[na:].copy())
            return root.item()

        tape = Tape()
        root = builder(tape, a0.copy(), b0.copy())
        tape.backward(root)
        analytic = np.concatenate([leaf.grad.ravel() for leaf in tape.leaves()])
        numeric = central_difference(value_at, np.concatenate([a0, b0]))
        assert gradient_close(analytic, numeric), f"{name} gradient mismatch at seed {seed}"


def test_finite_check_flag():
    tape = Tape(check_finite=True)
    x = tape.leaf([1.0, 2.0])
    big = x * 1e300
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        big * 1e300  # overflow to inf


def test_rank_limit():
    tape = Tape()
    with pytest.raises(DimensionError):
        tape.constant(np.zeros((2, 2, 2)))
