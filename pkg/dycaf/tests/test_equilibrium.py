import numpy as np
from numpy.testing import assert_allclose

from django.test import SimpleTestCase

from dycaf import autodiff as ad
from dycaf import equilibrium as eq
from dycaf.equilibrium import FusionParams, PhiClosure, SolverConfig
from dycaf.exceptions import (ConfigError, ContractionError, ShapeError,
                              SolverDivergenceError)
from dycaf.tensor import ParamStore, Tensor4


def affine(slope, offset):
    return PhiClosure.wrap(lambda f: ad.shift(ad.scale(f, slope), offset))


def contraction_matrix(c, norm=0.5, seed=0):
    a = np.random.default_rng(seed).standard_normal((c, c))
    return a * (norm / np.linalg.norm(a, 2))


def as_weights(a):
    return Tensor4(a.reshape(a.shape + (1, 1)))


def as_bias(b):
    b = np.asarray(b, dtype=np.float64)
    return Tensor4(b.reshape(-1, 1, 1, 1))


def pyramid_levels(c=4, hw=8, seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor4(rng.standard_normal((1, c, hw // 2 ** m, hw // 2 ** m))) for m in range(3)]


class TestSolverConfig(SimpleTestCase):

    def test_defaults(self):
        cfg = SolverConfig()
        self.assertEqual((cfg.alpha, cfg.tol, cfg.max_iter, cfg.memory), (0.1, 1e-6, 50, 20))
        self.assertEqual(cfg.backward_tol, cfg.tol)

    def test_invalid_values_name_their_key(self):
        for kwargs, key in (({'alpha': 0}, 'solver.alpha'), ({'alpha': 1.5}, 'solver.alpha'),
                            ({'tol': 0}, 'solver.tol'), ({'max_iter': 0}, 'solver.max_iter'),
                            ({'memory': 0}, 'solver.memory'), ({'polish_iter': -1}, 'solver.polish_iter')):
            with self.assertRaises(ConfigError) as ctx:
                SolverConfig(**kwargs)
            self.assertEqual(ctx.exception.key, key)

    def test_tightened_never_loosens(self):
        cfg = SolverConfig(tol=1e-8, max_iter=500).tightened(1e-6, 200)
        self.assertEqual((cfg.tol, cfg.max_iter), (1e-8, 500))
        cfg = SolverConfig().tightened(1e-12, 200)
        self.assertEqual((cfg.tol, cfg.max_iter, cfg.backward_tol), (1e-12, 200, 1e-12))

    def test_tightened_keeps_the_longer_polish(self):
        cfg = SolverConfig(polish_iter=5).tightened(1e-11, 200, 1000)
        self.assertEqual((cfg.polish_iter, cfg.backward_max_iter), (1000, 1000))
        self.assertEqual(SolverConfig(polish_iter=5).tightened(1e-11, 200).polish_iter, 5)


class TestBroydenSolve(SimpleTestCase):

    def test_scalar_affine_map(self):
        result = eq.broyden_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)))
        self.assertTrue(result.converged)
        self.assertAlmostEqual(result.f_star.item(), 2.0, places=5)
        self.assertLessEqual(result.residual_norm, 1e-6)
        self.assertEqual(len(result.residual_trace), result.iterations + 1)

    def test_identity_converges_immediately(self):
        f0 = Tensor4(np.random.default_rng(1).standard_normal((1, 2, 3, 3)))
        result = eq.broyden_solve(PhiClosure.wrap(lambda f: f), f0)
        self.assertEqual(result.iterations, 0)
        self.assertTrue(result.converged)
        self.assertTrue(result.f_star.identical(f0))

    def test_linear_contraction_matches_direct_solve(self):
        a = contraction_matrix(6)
        b = np.linspace(-1.0, 1.0, 6)
        closure = PhiClosure.wrap(lambda f: ad.conv1x1(f, as_weights(a), as_bias(b)))
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 6, 1, 1)), SolverConfig(tol=1e-10, max_iter=200))
        self.assertTrue(result.converged)
        expected = np.linalg.solve(np.eye(6) - a, b)
        assert_allclose(result.f_star.data.ravel(), expected, atol=1e-8)

    def test_agrees_with_picard(self):
        a = contraction_matrix(4, seed=2)
        b = as_bias([0.3, -0.2, 0.1, 0.0])
        closure = PhiClosure.wrap(lambda f: ad.silu(ad.conv1x1(f, as_weights(a), b)))
        f0 = Tensor4.zeros((1, 4, 2, 2))
        broyden = eq.broyden_solve(closure, f0, SolverConfig(tol=1e-10, max_iter=200))
        picard = eq.picard_solve(closure, f0, tol=1e-12, max_iter=2000)
        self.assertTrue(broyden.converged and picard.converged)
        self.assertLess(np.abs(broyden.f_star.data - picard.f_star.data).max(), 1e-5)

    def test_tiny_step_makes_no_progress(self):
        cfg = SolverConfig(alpha=1e-9, max_iter=50)
        result = eq.broyden_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 2, 2)), cfg)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 50)
        trace = result.residual_trace
        self.assertTrue(all(b <= a for a, b in zip(trace, trace[1:])))

    def test_returns_best_iterate(self):
        result = eq.broyden_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)),
                                  SolverConfig(max_iter=2))
        self.assertEqual(result.residual_norm, min(result.residual_trace))

    def test_residual_spike_restarts_from_best_iterate(self):
        seen = []

        def spiking(f):
            seen.append(f.item())
            out = ad.shift(ad.scale(f, 0.5), 1.0)
            return ad.shift(out, 1e3) if len(seen) == 3 else out
        result = eq.broyden_solve(PhiClosure.wrap(spiking), Tensor4.zeros((1, 1, 1, 1)),
                                  SolverConfig(tol=1e-10, max_iter=100))
        self.assertTrue(result.converged)
        self.assertAlmostEqual(result.f_star.item(), 2.0, places=9)
        # the spike discards the secant model: the next step is a damped
        # Picard step from the first iterate
        x1 = 0.1
        g1 = (0.5 * x1 + 1.0) - x1
        self.assertAlmostEqual(seen[3], x1 + 0.1 * g1, places=12)

    def test_polish_finishes_an_unconverged_solve(self):
        cfg = SolverConfig(tol=1e-10, max_iter=1, polish_iter=200)
        result = eq.broyden_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)), cfg)
        self.assertTrue(result.converged)
        self.assertEqual(result.iterations, 1)
        self.assertGreater(result.polish_iterations, 0)
        self.assertLess(result.polish_iterations, 200)
        self.assertEqual(len(result.residual_trace), 2 + result.polish_iterations)
        self.assertAlmostEqual(result.f_star.item(), 2.0, places=9)

    def test_polish_is_skipped_once_converged(self):
        cfg = SolverConfig(tol=1e-8, max_iter=100, polish_iter=50)
        result = eq.broyden_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)), cfg)
        self.assertTrue(result.converged)
        self.assertEqual(result.polish_iterations, 0)
        self.assertEqual(result.to_dict()['polish_iterations'], 0)

    def test_round_off_secant_pairs_are_ignored(self):
        x = np.ones(8)
        g = np.full(8, 1e-3)
        self.assertTrue(eq._secant_usable(np.full(8, 1e-2), np.full(8, 1e-4), g, x))
        self.assertFalse(eq._secant_usable(np.full(8, 1e-12), np.full(8, 1e-4), g, x))
        self.assertFalse(eq._secant_usable(np.full(8, 1e-2), np.full(8, 1e-16), g, x))

    def test_unreachable_tolerance_stays_bounded(self):
        # past the round-off floor the residual must not run away
        a = contraction_matrix(4, norm=0.5, seed=5)
        b = as_bias([0.3, -0.2, 0.1, 0.0])
        closure = PhiClosure.wrap(lambda f: ad.silu(ad.conv1x1(f, as_weights(a), b)))
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 4, 2, 2)), SolverConfig(tol=1e-300, max_iter=300))
        self.assertTrue(np.isfinite(result.residual_trace).all())
        self.assertLess(result.residual_norm, 1e-12)

    def test_non_finite_iterate_raises(self):
        with self.assertRaises(SolverDivergenceError) as ctx:
            eq.broyden_solve(affine(1e308, 0.0), Tensor4.full((1, 1, 1, 1), 10.0))
        self.assertEqual(ctx.exception.iteration, 0)


class TestPicardSolve(SimpleTestCase):

    def test_scalar_affine_map(self):
        result = eq.picard_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)), tol=1e-10, max_iter=100)
        self.assertTrue(result.converged)
        self.assertAlmostEqual(result.f_star.item(), 2.0, places=9)

    def test_unconverged_keeps_best(self):
        result = eq.picard_solve(affine(0.5, 1.0), Tensor4.zeros((1, 1, 1, 1)), tol=1e-10, max_iter=3)
        self.assertFalse(result.converged)
        self.assertEqual(result.iterations, 3)


class TestImplicitBackward(SimpleTestCase):

    def setUp(self):
        self.store = ParamStore()
        self.store.register('b', (1, 1, 1, 1), value=1.0)

    def shifted(self, slope):
        store = self.store
        return PhiClosure.wrap(lambda f: ad.add(ad.scale(f, slope), ad.param(store, 'b', like=f)))

    def test_affine_derivative(self):
        closure = self.shifted(0.5)
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 1, 1, 1)))
        grads, inputs = eq.implicit_backward(closure, result.f_star, np.ones((1, 1, 1, 1)))
        self.assertAlmostEqual(grads['b'].item(), 2.0, places=5)
        self.assertEqual(list(inputs), [])

    def test_zero_jacobian(self):
        closure = self.shifted(0.0)
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 1, 1, 1)))
        self.assertAlmostEqual(result.f_star.item(), 1.0, places=6)
        grads, _ = eq.implicit_backward(closure, result.f_star, np.full((1, 1, 1, 1), 3.0))
        self.assertEqual(grads['b'].item(), 3.0)

    def test_matches_linear_algebra(self):
        a = contraction_matrix(4, seed=3)
        closure = PhiClosure.wrap(lambda f: ad.conv1x1(f, as_weights(a), as_bias(np.ones(4))))
        f_star = Tensor4(np.linalg.solve(np.eye(4) - a, np.ones(4)).reshape(1, 4, 1, 1))
        g = np.arange(1.0, 5.0).reshape(1, 4, 1, 1)
        lin = closure.linearize(f_star)
        u, _ = eq.solve_adjoint(lin, g, SolverConfig(tol=1e-12, backward_max_iter=500))
        expected = np.linalg.solve(np.eye(4) - a.T, g.ravel())
        assert_allclose(u.ravel(), expected, atol=1e-10)

    def test_expanding_operator_raises(self):
        closure = self.shifted(2.0)
        with self.assertRaises(ContractionError) as ctx:
            eq.implicit_backward(closure, Tensor4.full((1, 1, 1, 1), -1.0), np.ones((1, 1, 1, 1)))
        norms = ctx.exception.update_norms
        self.assertTrue(all(b > a for a, b in zip(norms, norms[1:])))

    def test_recorded_node_differentiates_implicitly(self):
        store = self.store
        tape = ad.Tape()
        x = tape.input('x', Tensor4.zeros((1, 1, 1, 1)))
        closure = PhiClosure(lambda f, inputs: ad.add(ad.add(ad.scale(f, 0.5), inputs['x']),
                                                      ad.param(store, 'b', like=f)), {'x': x})
        cfg = SolverConfig(tol=1e-10, max_iter=100)
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 1, 1, 1)), cfg)
        node = eq.record_equilibrium(closure, result, cfg, store, ['b'])
        self.assertIsInstance(node, ad.TapeNode)
        grads = ad.backward(tape, ad.reduce_sum(node), ['b'])
        self.assertAlmostEqual(grads['b'].item(), 2.0, places=8)

    def test_matches_unrolled_picard(self):
        # differentiate a long unrolled Picard chain and compare
        closure = self.shifted(0.5)
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 1, 1, 1)), SolverConfig(tol=1e-12, max_iter=100))
        implicit, _ = eq.implicit_backward(closure, result.f_star, np.ones((1, 1, 1, 1)),
                                           SolverConfig(tol=1e-12, backward_max_iter=200))
        tape = ad.Tape()
        f = tape.constant(Tensor4.zeros((1, 1, 1, 1)))
        for _ in range(60):
            f = closure(f)
        unrolled = ad.backward(tape, ad.reduce_sum(f), ['b'])
        self.assertAlmostEqual(implicit['b'].item(), unrolled['b'].item(), places=9)

    def test_strong_contraction_matches_a_short_unroll(self):
        # at Lipschitz ~0.05 ten Picard steps already sit on the fixed point
        store = ParamStore()
        store.register('w', (4, 4), value=contraction_matrix(4, norm=0.05, seed=7))
        store.register('b', (4,), value=[0.4, -0.3, 0.2, 0.1])
        closure = PhiClosure.wrap(lambda f: ad.silu(ad.conv1x1(f, ad.param(store, 'w', like=f),
                                                                ad.param(store, 'b', like=f))))
        readout = np.random.default_rng(8).standard_normal((1, 4, 2, 2))
        cfg = SolverConfig(tol=1e-12, max_iter=100)
        result = eq.broyden_solve(closure, Tensor4.zeros((1, 4, 2, 2)), cfg)
        implicit, _ = eq.implicit_backward(closure, result.f_star, readout, cfg)
        tape = ad.Tape()
        f = tape.constant(Tensor4.zeros((1, 4, 2, 2)))
        for _ in range(10):
            f = closure(f)
        unrolled = ad.backward(tape, ad.reduce_sum(ad.mul(f, ad.constant(readout, like=f))), ['w', 'b'])
        self.assertLess(ad.max_relative_error(implicit, unrolled), 1e-6)


class TestOracles(SimpleTestCase):

    def test_fd_jacobian_of_linear_map(self):
        a = contraction_matrix(4, seed=4)
        closure = PhiClosure.wrap(lambda f: ad.conv1x1(f, as_weights(a)))
        jac = eq.fd_jacobian(closure, Tensor4.ones((1, 4, 1, 1)))
        assert_allclose(jac, a, atol=1e-8)

    def test_fd_jacobian_size_limit(self):
        self.assertRaises(ShapeError, eq.fd_jacobian, affine(0.5, 0.0), Tensor4.zeros((1, 1, 6, 6)))

    def test_lipschitz_of_scaled_identity(self):
        estimate = eq.lipschitz_estimate(affine(0.5, 1.0), Tensor4.zeros((1, 2, 3, 3)))
        self.assertAlmostEqual(estimate, 0.5, places=6)


class TestFusionOperator(SimpleTestCase):

    def setUp(self):
        self.store = ParamStore(seed=9)
        self.params = FusionParams.create(self.store, 'fuse.p4', 4)
        self.levels = pyramid_levels()

    def closure(self, index=1):
        params = self.params
        inputs = [('p3', self.levels[0]), ('p4', self.levels[1]), ('p5', self.levels[2])]
        return PhiClosure(lambda f, inp: eq.phi(f, list(inp.values()), params, index), inputs)

    def test_registered_shapes(self):
        self.assertEqual(self.store['fuse.p4.weight_conv.weight'].shape, (3, 12, 1, 1))
        self.assertEqual(self.params.refine_names(), ['fuse.p4.refine.0', 'fuse.p4.refine.1'])
        self.assertEqual(self.store.count('fuse.p4'), 27 * 4 + 3)

    def test_align_levels(self):
        for index, hw in enumerate((8, 4, 2)):
            shapes = [level.shape for level in eq.align_levels(self.levels, index)]
            self.assertEqual(shapes, [(1, 4, hw, hw)] * 3)

    def test_weights_sum_to_one(self):
        stack = eq.align_levels(self.levels, 1)
        weights = eq.fusion_weights(stack, self.params, 1)
        self.assertEqual(weights.shape, (1, 3, 4, 4))
        assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue((weights.data > 0).all())

    def test_weights_sum_to_one_on_many_instances(self):
        for seed in range(100):
            store = ParamStore(seed=seed)
            params = FusionParams.create(store, 'fuse.p4', 4)
            gain = np.random.default_rng(seed).uniform(0.1, 30.0)
            levels = [Tensor4(level.data * gain) for level in pyramid_levels(seed=seed)]
            for index in range(3):
                weights = eq.fusion_weights(eq.align_levels(levels, index), params, index).data
                with self.subTest(seed=seed, index=index):
                    assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
                    self.assertTrue((weights >= 0).all())

    def test_solve_to_the_gradient_check_tolerance(self):
        closure = self.closure()
        eq.calibrate_refine(self.params, closure, self.levels[1])
        cfg = SolverConfig().tightened(1e-11, 200, 1000)
        result = eq.broyden_solve(closure, self.levels[1], cfg)
        self.assertTrue(result.converged, result)
        self.assertLessEqual(result.residual_norm, 1e-11)
        self.assertTrue(np.isfinite(result.residual_trace).all())

    def test_zero_logits_mix_uniformly(self):
        self.store.set('fuse.p4.weight_conv.weight', 0.0)
        self.store.set('fuse.p4.weight_conv.bias', 0.0)
        v = self.levels[1]
        stack = [v, v, v]
        weights = eq.fusion_weights(stack, self.params, 1)
        assert_allclose(weights.data, 1.0 / 3, rtol=1e-15)
        assert_allclose(eq.fuse_levels(stack, weights).data, v.data, rtol=1e-14)

    def test_identity_refine_is_silu(self):
        kernels = np.zeros((4, 1, 3, 3))
        kernels[:, 0, 1, 1] = 1.0
        for name in self.params.refine_names():
            self.store.set(name, kernels)
        x = self.levels[1]
        self.assertTrue(eq.refine(x, self.params).identical(ad.silu(x)))

    def test_iterate_must_match_level(self):
        self.assertRaises(ShapeError, eq.phi, self.levels[0], self.levels, self.params, 1)

    def test_boundary_levels(self):
        for index in (0, 2):
            out = eq.phi(self.levels[index], self.levels, self.params, index)
            self.assertEqual(out.shape, self.levels[index].shape)

    def test_calibration_lowers_the_estimate(self):
        for name in self.params.refine_names():
            self.store.set(name, self.store[name].data * 6.0)
        closure = self.closure()
        before = eq.lipschitz_estimate(closure, self.levels[1])
        after = eq.calibrate_refine(self.params, closure, self.levels[1])
        self.assertLess(after, before)

    def test_solve_on_calibrated_operator(self):
        closure = self.closure()
        eq.calibrate_refine(self.params, closure, self.levels[1])
        result = eq.broyden_solve(closure, self.levels[1], SolverConfig(max_iter=100))
        self.assertTrue(result.converged)
        residual = closure(result.f_star).data - result.f_star.data
        self.assertLessEqual(np.linalg.norm(residual), 1e-6)

    def test_weights_match_per_site_softmax(self):
        stack = eq.align_levels(self.levels, 1)
        weight = self.store['fuse.p4.weight_conv.weight'].data[:, :, 0, 0]
        bias = self.store['fuse.p4.weight_conv.bias'].data[:, 0, 0, 0]
        joined = np.concatenate([level.data for level in stack], axis=1)
        logits = np.einsum('lk,nkhw->nlhw', weight, joined) + bias[None, :, None, None]
        expected = np.exp(logits - logits.max(axis=1, keepdims=True))
        expected /= expected.sum(axis=1, keepdims=True)
        assert_allclose(eq.fusion_weights(stack, self.params, 1).data, expected, rtol=1e-12)

    def test_shifted_logits_give_the_same_weights(self):
        stack = eq.align_levels(self.levels, 1)
        before = eq.fusion_weights(stack, self.params, 1)
        self.store.set('fuse.p4.weight_conv.bias', self.store['fuse.p4.weight_conv.bias'].data + 3.0)
        assert_allclose(eq.fusion_weights(stack, self.params, 1).data, before.data, rtol=1e-12)

    def test_equal_levels_pass_through_the_mixture(self):
        self.store.set('fuse.p4.weight_conv.weight', 0.0)
        kernels = np.zeros((4, 1, 3, 3))
        kernels[:, 0, 1, 1] = 1.0
        for name in self.params.refine_names():
            self.store.set(name, kernels)
        levels = [Tensor4.full(level.shape, 0.7) for level in self.levels]
        out = eq.phi(levels[1], levels, self.params, 1)
        assert_allclose(out.data, ad.silu(Tensor4.full((1, 1, 1, 1), 0.7)).item(), rtol=1e-14)


class TestImplicitThroughFusion(SimpleTestCase):
    """
    Parameter gradients of sum(F*) for a small fusion operator, against
    central differences taken through complete re-solves.
    """
    cfg = SolverConfig(tol=1e-11, max_iter=300, backward_max_iter=500)

    def setUp(self):
        self.store = ParamStore(seed=4)
        self.params = FusionParams.create(self.store, 'fuse.p3', 4)
        self.levels = pyramid_levels(c=4, hw=4, seed=6)
        eq.calibrate_refine(self.params, self.closure(self.params), self.levels[0], target=0.5)

    def closure(self, params):
        levels = self.levels
        return PhiClosure.wrap(lambda f: eq.phi(f, levels, params, 0))

    def solve(self, params, f0=None):
        result = eq.broyden_solve(self.closure(params), self.levels[0] if f0 is None else f0, self.cfg)
        self.assertTrue(result.converged, result)
        return result

    def test_gradients_match_finite_differences(self):
        result = self.solve(self.params)
        analytic, _ = eq.implicit_backward(self.closure(self.params), result.f_star,
                                           np.ones(result.f_star.shape), self.cfg)

        def loss(store):
            solved = self.solve(self.params.with_store(store), result.f_star)
            return ad.reduce_sum(solved.f_star)
        entries = dict((name, range(0, self.store[name].size, 5)) for name in self.params.names())
        numeric = ad.finite_diff_entries(loss, self.store, entries, eps=1e-5)
        for name, values in numeric.items():
            flat = analytic[name].data.ravel()
            for index, derivative in values.items():
                self.assertLess(float(ad.relative_error(flat[index], derivative)), 1e-4, (name, index))
