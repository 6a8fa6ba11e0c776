import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from django.test import SimpleTestCase

from dycaf import autodiff as ad
from dycaf import neck
from dycaf.attention import dual_attention_forward
from dycaf.exceptions import ConfigError, ShapeError
from dycaf.neck import FeaturePyramid, NeckConfig, NeckParams
from dycaf.tensor import ParamStore, Tensor4

IN_CHANNELS = (8, 16, 16)


def make_pyramid(seed=0, in_channels=IN_CHANNELS, hw=8):
    rng = np.random.default_rng(seed)
    return FeaturePyramid(*[Tensor4(rng.standard_normal((1, c, hw // 2 ** m, hw // 2 ** m)))
                            for m, c in enumerate(in_channels)])


def build(cfg, seed=0, p_in=None):
    params = NeckParams.create(ParamStore(seed=seed), cfg, IN_CHANNELS)
    p_in = p_in or make_pyramid(seed)
    if cfg.use_class_adapt and cfg.class_adapt_mode == 'prototype':
        neck.fit_prototypes(params, p_in, seed)
    neck.calibrate(params, p_in)
    return params, p_in


class TestFeaturePyramid(SimpleTestCase):

    def test_levels_must_halve(self):
        bad = [Tensor4.zeros((1, 4, 8, 8)), Tensor4.zeros((1, 4, 4, 4)), Tensor4.zeros((1, 4, 4, 4))]
        self.assertRaises(ShapeError, FeaturePyramid.from_levels, bad)

    def test_batch_must_agree(self):
        bad = [Tensor4.zeros((2, 4, 8, 8)), Tensor4.zeros((1, 4, 4, 4)), Tensor4.zeros((1, 4, 2, 2))]
        self.assertRaises(ShapeError, FeaturePyramid.from_levels, bad)

    def test_channels(self):
        self.assertEqual(make_pyramid().channels(), IN_CHANNELS)


class TestNeckConfig(SimpleTestCase):

    def test_channels_must_fit_the_squeeze(self):
        with self.assertRaises(ConfigError) as ctx:
            NeckConfig(channels=12)
        self.assertEqual(ctx.exception.key, 'neck.channels')

    def test_variant_leaves_original(self):
        cfg = NeckConfig()
        other = cfg.variant(use_equilibrium=False)
        self.assertTrue(cfg.use_equilibrium)
        self.assertFalse(other.use_equilibrium)
        self.assertEqual(other.label(), 'eq=0,attn=1,cls=1')


class TestNeckPass(SimpleTestCase):

    def setUp(self):
        self.cfg = NeckConfig(use_equilibrium=False, use_class_adapt=False)
        self.params, self.p_in = build(self.cfg)

    def test_output_shapes(self):
        out = neck.neck_pass(self.p_in, self.params)
        self.assertEqual(out.shapes(), [(1, 16, 8, 8), (1, 16, 4, 4), (1, 16, 2, 2)])

    def test_wrong_input_channels(self):
        self.assertRaises(ShapeError, neck.neck_pass, make_pyramid(in_channels=(16, 16, 16)), self.params)

    def test_forward_without_extras_is_the_sweep(self):
        sweep = neck.neck_pass(self.p_in, self.params)
        out = neck.neck_forward(self.p_in, self.params)
        self.assertTrue(out.single_pass)
        self.assertTrue(out.converged)
        self.assertIsNone(out.maps)
        for a, b in zip(sweep, out.pyramid):
            self.assertTrue(a.identical(b))

    def test_without_attention(self):
        cfg = self.cfg.variant(use_dual_attention=False)
        params, p_in = build(cfg)
        self.assertEqual(neck.neck_pass(p_in, params).shapes()[0], (1, 16, 8, 8))

    def test_panet_baseline(self):
        store = neck.panet_params(ParamStore(), 16, IN_CHANNELS)
        out = neck.panet_top_down(self.p_in, store)
        self.assertEqual(out.channels(), (16, 16, 16))


class TestNeckForward(SimpleTestCase):

    def setUp(self):
        self.cfg = NeckConfig()
        self.params, self.p_in = build(self.cfg)

    def test_full_neck(self):
        out = neck.neck_forward(self.p_in, self.params)
        self.assertEqual(out.pyramid.shapes(), [(1, 16, 8, 8), (1, 16, 4, 4), (1, 16, 2, 2)])
        self.assertTrue(out.converged)
        self.assertEqual([m.shape[1] for m in out.maps], [3, 3, 3])

    def test_fixed_points_hold(self):
        cfg = self.cfg.variant(use_class_adapt=False)
        out = neck.neck_forward(self.p_in, self.params, cfg)
        levels = out.sweep.levels()
        for index, result in enumerate(out.results):
            closure = neck.level_closure(levels, self.params.fusion[index], index)
            residual = closure(result.f_star).data - result.f_star.data
            self.assertLessEqual(np.linalg.norm(residual), cfg.solver.tol)
            self.assertTrue(result.f_star.identical(out.pyramid[index]))

    def test_threads_do_not_change_results(self):
        single = neck.neck_forward(self.p_in, self.params, self.cfg.variant(threads=1))
        pooled = neck.neck_forward(self.p_in, self.params, self.cfg.variant(threads=3))
        for a, b in zip(single.pyramid, pooled.pyramid):
            self.assertTrue(a.identical(b))

    def test_zero_pyramid_with_zero_biases(self):
        for name in self.params.store:
            if name.endswith('bias'):
                self.params.store.set(name, 0.0)
        zero = FeaturePyramid(*[Tensor4.zeros(shape) for shape in self.p_in.shapes()])
        out = neck.neck_forward(zero, self.params)
        for level in out.pyramid:
            self.assertEqual(np.abs(level.data).max(), 0.0)

    def test_prototype_mode_needs_prototypes(self):
        params = NeckParams.create(ParamStore(), self.cfg.variant(use_equilibrium=False), IN_CHANNELS)
        self.assertRaises(ConfigError, neck.neck_forward, self.p_in, params)

    def test_switches_need_their_parameters(self):
        bare = NeckConfig(use_equilibrium=False, use_class_adapt=False)
        params = NeckParams.create(ParamStore(), bare, IN_CHANNELS)
        for switch in ('use_equilibrium', 'use_class_adapt'):
            with self.assertRaises(ConfigError) as ctx:
                neck.neck_forward(self.p_in, params, bare.variant(**{switch: True}))
            self.assertEqual(ctx.exception.key, 'neck.%s' % switch)

    def test_conv_head(self):
        cfg = self.cfg.variant(class_adapt_mode='conv', use_equilibrium=False)
        params, p_in = build(cfg)
        out = neck.neck_forward(p_in, params)
        np.testing.assert_allclose(out.maps[0].data.sum(axis=(2, 3)), 1.0, atol=1e-12)


class TestParameterCount(SimpleTestCase):

    def test_small_conv(self):
        store = ParamStore()
        store.register('conv.weight', (3, 2))
        store.register('conv.bias', (3,))
        self.assertEqual(neck.count_parameters(store), 9)
        self.assertEqual(neck.count_parameters(ParamStore()), 0)

    def test_closed_form(self):
        base = NeckConfig()
        variants = [base, base.variant(gap_mode='static'), base.variant(alg1_spatial=True),
                    base.variant(class_adapt_mode='conv', num_classes=5),
                    base.variant(use_equilibrium=False, use_dual_attention=False, use_class_adapt=False),
                    base.variant(channels=32)]
        for cfg in variants:
            params = NeckParams.create(ParamStore(), cfg, IN_CHANNELS)
            self.assertEqual(neck.count_parameters(params), neck.expected_parameter_count(cfg, IN_CHANNELS),
                             cfg.label())

    def test_each_switch_adds_parameters(self):
        off = NeckConfig(use_equilibrium=False, use_dual_attention=False, use_class_adapt=False)
        base = neck.count_parameters(NeckParams.create(ParamStore(), off, IN_CHANNELS))
        for switch in ('use_equilibrium', 'use_dual_attention', 'use_class_adapt'):
            cfg = off.variant(**{switch: True})
            self.assertGreater(neck.count_parameters(NeckParams.create(ParamStore(), cfg, IN_CHANNELS)), base)


class TestDycafBlock(SimpleTestCase):

    def block(self, use_dual_attention=True):
        cfg = NeckConfig(use_dual_attention=use_dual_attention)
        self.store = ParamStore(seed=2)
        return neck.BlockParams.create(self.store, 'td4', 16, cfg)

    def features(self):
        return Tensor4(np.random.default_rng(8).standard_normal((1, 16, 4, 4)))

    def test_identity_projection_without_attention_is_silu(self):
        block = self.block(use_dual_attention=False)
        self.store.set('block.td4.proj.weight', np.eye(16).reshape(16, 16, 1, 1))
        self.store.set('block.td4.proj.bias', 0.0)
        x = self.features()
        assert_allclose(neck.dycaf_block(x, block).data, ad.silu(x).data, rtol=1e-15)

    def test_zero_input_with_zero_biases(self):
        block = self.block()
        self.store.set('block.td4.proj.bias', 0.0)
        self.store.set('attn.td4.init.bias', 0.0)
        out = neck.dycaf_block(Tensor4.zeros((1, 16, 4, 4)), block)
        assert_array_equal(out.data, 0.0)

    def test_projection_then_attention(self):
        block = self.block()
        x = self.features()
        projected = ad.conv1x1(x, self.store['block.td4.proj.weight'], self.store['block.td4.proj.bias'])
        expected = dual_attention_forward(projected, block.attention)
        self.assertTrue(neck.dycaf_block(x, block).identical(expected))


class TestDeterminism(SimpleTestCase):

    def test_sweep_is_reproducible(self):
        cfg = NeckConfig(use_equilibrium=False, use_class_adapt=False)
        first = neck.neck_pass(make_pyramid(4), NeckParams.create(ParamStore(seed=4), cfg, IN_CHANNELS))
        second = neck.neck_pass(make_pyramid(4), NeckParams.create(ParamStore(seed=4), cfg, IN_CHANNELS))
        for a, b in zip(first, second):
            self.assertTrue(a.identical(b))

    def test_ablations_keep_shapes(self):
        p_in = make_pyramid()
        shapes = set()
        for attention in (True, False):
            cfg = NeckConfig(use_equilibrium=False, use_class_adapt=False, use_dual_attention=attention)
            params = NeckParams.create(ParamStore(), cfg, IN_CHANNELS)
            shapes.add(tuple(neck.neck_pass(p_in, params).shapes()))
        self.assertEqual(len(shapes), 1)
