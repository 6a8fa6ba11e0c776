"""
The DyCAF neck: residual lateral projections, one top-down and one
bottom-up sweep of DyCAF blocks, then optional per-level equilibrium
refinement and class-aware adaptation.
"""
import copy
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

from dycaf import autodiff as ad
from dycaf.attention import DualAttentionParams, dual_attention_forward
from dycaf.class_adapt import (CLASS_ADAPT_MODES, ClassAdaptParams, adapt_features,
                               class_adapt_simple, class_attention, prototypes_from_features)
from dycaf.conf.settings import GAP_HIDDEN, PROTOTYPE_DIM, SQUEEZE_RATIO, worker_count
from dycaf.equilibrium import (FusionParams, PhiClosure, SolverConfig, broyden_solve,
                               calibrate_refine, phi, record_equilibrium)
from dycaf.exceptions import ConfigError, ShapeError

logger = logging.getLogger(__name__)

LEVEL_NAMES = ('p3', 'p4', 'p5')
INPUT_NAMES = ('c3', 'c4', 'c5')
# in sweep order: three top-down blocks, then two bottom-up
BLOCK_IDS = ('td5', 'td4', 'td3', 'bu4', 'bu5')


class FeaturePyramid(object):
    """
    Three levels at strides 8, 16 and 32. Levels may be plain tensors or tape
    nodes; each one halves the spatial size of the previous.
    """
    def __init__(self, c3, c4, c5):
        self.c3 = c3
        self.c4 = c4
        self.c5 = c5
        self.validate()

    @classmethod
    def from_levels(cls, levels):
        if len(levels) != 3:
            raise ShapeError("a feature pyramid has 3 levels, got %d" % len(levels))
        return cls(*levels)

    def validate(self):
        s3, s4, s5 = [ad.value_of(level).shape for level in self.levels()]
        if not s3[0] == s4[0] == s5[0]:
            raise ShapeError("pyramid levels disagree on batch size: %r %r %r" % (s3, s4, s5))
        for fine, coarse in ((s3, s4), (s4, s5)):
            if fine[2] != 2 * coarse[2] or fine[3] != 2 * coarse[3]:
                raise ShapeError("each pyramid level must halve the previous one, got %r then %r"
                                 % (fine, coarse))

    def levels(self):
        return [self.c3, self.c4, self.c5]

    def values(self):
        return FeaturePyramid(*[ad.value_of(level) for level in self.levels()])

    def shapes(self):
        return [ad.value_of(level).shape for level in self.levels()]

    def channels(self):
        return tuple(shape[1] for shape in self.shapes())

    def __iter__(self):
        return iter(self.levels())

    def __getitem__(self, index):
        return self.levels()[index]

    def __repr__(self):
        return "FeaturePyramid(%s)" % ', '.join('%r' % (shape,) for shape in self.shapes())


class NeckConfig(object):
    def __init__(self, channels=16, use_equilibrium=True, use_dual_attention=True,
                 use_class_adapt=True, solver=None, alg1_spatial=False, gap_mode='dynamic',
                 class_adapt_mode='prototype', num_classes=3, threads=None):
        self.channels = int(channels)
        self.use_equilibrium = bool(use_equilibrium)
        self.use_dual_attention = bool(use_dual_attention)
        self.use_class_adapt = bool(use_class_adapt)
        self.solver = solver or SolverConfig()
        self.alg1_spatial = bool(alg1_spatial)
        self.gap_mode = gap_mode
        self.class_adapt_mode = class_adapt_mode
        self.num_classes = int(num_classes)
        self.threads = threads
        self.validate()

    def validate(self):
        if self.channels < 1 or self.channels % SQUEEZE_RATIO:
            raise ConfigError("neck.channels must be a positive multiple of %d, got %d"
                              % (SQUEEZE_RATIO, self.channels), key='neck.channels')
        if self.class_adapt_mode not in CLASS_ADAPT_MODES:
            raise ConfigError("class_adapt.mode must be one of %s" % ', '.join(CLASS_ADAPT_MODES),
                              key='class_adapt.mode')
        if self.num_classes < 1:
            raise ConfigError("class_adapt.num_classes must be at least 1", key='class_adapt.num_classes')

    def variant(self, **switches):
        """
        The same configuration with some switches flipped.
        """
        values = dict(self.__dict__)
        values.update(switches)
        return NeckConfig(**values)

    def label(self):
        return 'eq=%d,attn=%d,cls=%d' % (self.use_equilibrium, self.use_dual_attention, self.use_class_adapt)


class BlockParams(ad.ParamView):
    def __init__(self, store, block_id, in_channels, channels, attention=None):
        super(BlockParams, self).__init__(store, 'block.%s' % block_id)
        self.block_id = block_id
        self.in_channels = in_channels
        self.channels = channels
        self.attention = attention

    @classmethod
    def create(cls, store, block_id, in_channels, cfg):
        c = cfg.channels
        store.register('block.%s.proj.weight' % block_id, (c, in_channels), fan_in=in_channels)
        store.register('block.%s.proj.bias' % block_id, (c,), fan_in=in_channels)
        attention = None
        if cfg.use_dual_attention:
            attention = DualAttentionParams.create(store, block_id, c, cfg.alg1_spatial, cfg.gap_mode)
        return cls(store, block_id, in_channels, c, attention)

    def with_store(self, store):
        other = super(BlockParams, self).with_store(store)
        if self.attention is not None:
            other.attention = self.attention.with_store(store)
        return other


class NeckParams(object):
    """
    All neck tensors in one store. Only enabled components register
    parameters, so each switch that is turned on strictly adds to the count.
    """
    def __init__(self, store, cfg, in_channels):
        self.store = store
        self.cfg = cfg
        self.in_channels = tuple(in_channels)
        self.blocks = OrderedDict()
        self.fusion = []
        self.class_adapt = None
        self.prototypes = None

    @classmethod
    def create(cls, store, cfg, in_channels, prototypes=None):
        params = cls(store, cfg, in_channels)
        c = cfg.channels
        for name, c_in in zip(INPUT_NAMES, params.in_channels):
            store.register('lateral.%s.weight' % name, (c_in, c_in), fan_in=c_in)
            store.register('lateral.%s.bias' % name, (c_in,), fan_in=c_in)
        c3, c4, c5 = params.in_channels
        block_inputs = {'td5': c5, 'td4': c4 + c, 'td3': c3 + c, 'bu4': 2 * c, 'bu5': 2 * c}
        for block_id in BLOCK_IDS:
            params.blocks[block_id] = BlockParams.create(store, block_id, block_inputs[block_id], cfg)
        if cfg.use_equilibrium:
            params.fusion = [FusionParams.create(store, 'fuse.%s' % level, c) for level in LEVEL_NAMES]
        if cfg.use_class_adapt:
            params.class_adapt = ClassAdaptParams.create(store, 'cls', c, cfg.num_classes, cfg.class_adapt_mode)
            params.prototypes = prototypes
        return params

    def lateral(self, x, name):
        """
        The residual lateral projection c + Conv1x1(c).
        """
        w = ad.param(self.store, 'lateral.%s.weight' % name, x)
        b = ad.param(self.store, 'lateral.%s.bias' % name, x)
        return ad.add(x, ad.conv1x1(x, w, b))

    def with_store(self, store):
        """
        The same neck reading its tensors from ``store``.
        """
        other = copy.copy(self)
        other.store = store
        other.blocks = OrderedDict((key, block.with_store(store)) for key, block in self.blocks.items())
        other.fusion = [fusion.with_store(store) for fusion in self.fusion]
        if self.class_adapt is not None:
            other.class_adapt = self.class_adapt.with_store(store)
        return other

    def count(self):
        return self.store.count()


def dycaf_block(x, block):
    projected = ad.conv1x1(x, block.get('proj.weight', x), block.get('proj.bias', x))
    if block.attention is None:
        return ad.silu(projected)
    return dual_attention_forward(projected, block.attention)


def _check_inputs(p_in, params):
    if p_in.channels() != params.in_channels:
        raise ShapeError("pyramid channels %r do not match the neck's %r" % (p_in.channels(), params.in_channels))


def neck_pass(p_in, params, cfg=None):
    """
    One top-down and one bottom-up sweep. Output levels keep the input
    strides and all carry ``cfg.channels`` channels.
    """
    _check_inputs(p_in, params)
    blocks = params.blocks
    c3 = params.lateral(p_in.c3, 'c3')
    c4 = params.lateral(p_in.c4, 'c4')
    c5 = params.lateral(p_in.c5, 'c5')

    p5 = dycaf_block(c5, blocks['td5'])
    p4 = dycaf_block(ad.concat_channels([c4, ad.resample(p5, 'up2')]), blocks['td4'])
    p3 = dycaf_block(ad.concat_channels([c3, ad.resample(p4, 'up2')]), blocks['td3'])

    p4 = dycaf_block(ad.concat_channels([p4, ad.resample(p3, 'down2')]), blocks['bu4'])
    p5 = dycaf_block(ad.concat_channels([p5, ad.resample(p4, 'down2')]), blocks['bu5'])
    return FeaturePyramid(p3, p4, p5)


def level_closure(levels, fusion, index):
    """
    The fusion operator of one output level with the sweep output bound as
    its external inputs.
    """
    def fn(f, inputs):
        return phi(f, [inputs[name] for name in LEVEL_NAMES], fusion, index)
    return PhiClosure(fn, zip(LEVEL_NAMES, levels))


def solve_levels(levels, params, cfg):
    """
    Per-level Broyden solves on the values of ``levels``. The solves are
    independent and run on a thread pool; results come back in level order.
    """
    if len(params.fusion) != len(LEVEL_NAMES):
        raise ConfigError("equilibrium refinement is on but the neck has no fusion parameters; "
                          "create it with neck.use_equilibrium enabled", key='neck.use_equilibrium')
    closures = [level_closure(levels, params.fusion[i], i) for i in range(len(LEVEL_NAMES))]
    value_closures = [closure.values() for closure in closures]

    def solve(index):
        return broyden_solve(value_closures[index], ad.value_of(levels[index]), cfg.solver)

    workers = min(worker_count(cfg.threads), len(LEVEL_NAMES))
    if workers == 1:
        results = [solve(i) for i in range(len(LEVEL_NAMES))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(solve, range(len(LEVEL_NAMES))))
    for name, result in zip(LEVEL_NAMES, results):
        logger.debug("%s equilibrium: %r", name, result)
    return closures, results


class NeckOutput(object):
    """
    ``results`` is None for the single-sweep form, otherwise one
    EquilibriumResult per level. ``maps`` holds the class attention maps per
    level when class adaptation ran.
    """
    def __init__(self, pyramid, results=None, maps=None, sweep=None):
        self.pyramid = pyramid
        self.results = results
        self.maps = maps
        self.sweep = sweep

    @property
    def single_pass(self):
        return self.results is None

    @property
    def converged(self):
        return self.single_pass or all(result.converged for result in self.results)

    def __iter__(self):
        return iter((self.pyramid, self.results))


def adapt_level(f, params):
    cls_params = params.class_adapt
    if cls_params is None:
        raise ConfigError("class adaptation is on but the neck has no class adaptation parameters; "
                          "create it with neck.use_class_adapt enabled", key='neck.use_class_adapt')
    if cls_params.mode == 'conv':
        return class_adapt_simple(f, cls_params)
    if params.prototypes is None:
        raise ConfigError("prototype class adaptation needs prototypes; run fit_prototypes first",
                          key='class_adapt.mode')
    maps = class_attention(f, params.prototypes, cls_params)
    return adapt_features(f, maps, cls_params), maps


def neck_forward(p_in, params, cfg=None):
    cfg = cfg or params.cfg
    sweep = neck_pass(p_in, params, cfg)
    levels = sweep.levels()
    results = None
    if cfg.use_equilibrium:
        closures, results = solve_levels(levels, params, cfg)
        levels = [record_equilibrium(closure, result, cfg.solver, params.store, fusion.names())
                  for closure, result, fusion in zip(closures, results, params.fusion)]
    maps = None
    if cfg.use_class_adapt:
        adapted = [adapt_level(level, params) for level in levels]
        levels = [out for out, _ in adapted]
        maps = [level_maps for _, level_maps in adapted]
    return NeckOutput(FeaturePyramid(*levels), results, maps, sweep)


def fit_prototypes(params, p_in, seed=0):
    """
    Cluster the projected features of the sweep output into the prototype
    matrix and attach it to ``params``.
    """
    sweep = neck_pass(p_in.values(), params)
    features = [ad.value_of(level) for level in sweep.levels()]
    params.prototypes = prototypes_from_features(features, params.class_adapt, params.cfg.num_classes, seed)
    return params.prototypes


def calibrate(params, p_in, target=0.9):
    """
    Rescale every level's refine kernels so the fusion operator is locally
    contracting around the sweep output. Returns the per-level estimates.
    """
    if not params.fusion:
        return []
    levels = [ad.value_of(level) for level in neck_pass(p_in.values(), params).levels()]
    estimates = []
    for index, fusion in enumerate(params.fusion):
        closure = level_closure(levels, fusion, index)
        estimates.append(calibrate_refine(fusion, closure, levels[index], target))
    logger.info("refine calibration: %s", ', '.join('%.4f' % e for e in estimates))
    return estimates


def panet_params(store, channels, in_channels):
    """
    Parameters of the plain top-down PANet baseline, under ``panet.``.
    """
    c5 = in_channels[2]
    store.register('panet.p5.weight', (channels, c5), fan_in=c5)
    store.register('panet.p5.bias', (channels,), fan_in=c5)
    for name, c_in in (('p4', in_channels[1]), ('p3', in_channels[0])):
        store.register('panet.%s.weight' % name, (channels, c_in + channels), fan_in=c_in + channels)
        store.register('panet.%s.bias' % name, (channels,), fan_in=c_in + channels)
    return store


def panet_top_down(p_in, store):
    """
    Baseline fusion F_l = silu(Conv1x1(F_l ++ up2(F_{l+1}))), top-down only.
    """
    def block(x, name):
        return ad.silu(ad.conv1x1(x, ad.param(store, 'panet.%s.weight' % name, x),
                                  ad.param(store, 'panet.%s.bias' % name, x)))
    p5 = block(p_in.c5, 'p5')
    p4 = block(ad.concat_channels([p_in.c4, ad.resample(p5, 'up2')]), 'p4')
    p3 = block(ad.concat_channels([p_in.c3, ad.resample(p4, 'up2')]), 'p3')
    return FeaturePyramid(p3, p4, p5)


def count_parameters(params):
    """
    Number of learnable scalars held by a store, a neck or any object with a
    ``store`` attribute. Frozen prototypes are not counted.
    """
    store = getattr(params, 'store', params)
    return store.count()


def expected_parameter_count(cfg, in_channels):
    """
    The closed form of ``count_parameters`` for a neck built with ``cfg``;
    see docs/parameters.txt.
    """
    c = cfg.channels
    c3, c4, c5 = in_channels
    total = sum(ci * ci + ci for ci in in_channels)
    block_inputs = [c5, c4 + c, c3 + c, 2 * c, 2 * c]
    total += sum(c * ci + c for ci in block_inputs)
    if cfg.use_dual_attention:
        r = c // SQUEEZE_RATIO
        per_block = 9 * c + c * c + c
        if cfg.gap_mode == 'dynamic':
            per_block += GAP_HIDDEN * c + GAP_HIDDEN + GAP_HIDDEN + 1
        per_block += 2 * r * c + r + c
        per_block += 49 * (c if cfg.alg1_spatial else 2) + 1
        total += len(BLOCK_IDS) * per_block
    if cfg.use_equilibrium:
        total += len(LEVEL_NAMES) * (9 * c + 3 + 18 * c)
    if cfg.use_class_adapt:
        k = cfg.num_classes
        if cfg.class_adapt_mode == 'prototype':
            d = PROTOTYPE_DIM
            total += d * c + d + d + 1 + k * c * c
        else:
            total += 9 * c + c * c + c + k * c + k
    return total
