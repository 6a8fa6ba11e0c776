"""
The verification harness behind the ``dycaf`` command: run configuration,
synthetic pyramids, the four check commands and their JSON reports.
"""
import hashlib
import itertools
import json
import logging
import math
import time
from collections import OrderedDict

import numpy as np
from django.core.serializers.json import DjangoJSONEncoder
from django.utils import timezone

from dycaf import autodiff as ad
from dycaf.class_adapt import load_or_fit
from dycaf.conf.settings import (GRADCHECK_EPS, GRADCHECK_EXPLICIT_TOLERANCE,
                                 GRADCHECK_TOLERANCE, REPORT_SCHEMA_VERSION, worker_count)
from dycaf.equilibrium import SolverConfig, broyden_solve, picard_solve
from dycaf.exceptions import ConfigError
from dycaf.losses import (LossWeights, equilibrium_loss, kl_uniform_loss,
                          surrogate_detection_loss, total_loss)
from dycaf.neck import (LEVEL_NAMES, FeaturePyramid, NeckConfig, NeckParams, calibrate,
                        count_parameters, expected_parameter_count, fit_prototypes,
                        level_closure, neck_forward, neck_pass, panet_params, panet_top_down)
from dycaf.tensor import ParamStore, Tensor4

logger = logging.getLogger(__name__)

DTYPES = {'f32': np.float32, 'f64': np.float64}
TRUE_VALUES = ('1', 'true', 'yes', 'on')
FALSE_VALUES = ('0', 'false', 'no', 'off')

# independent random streams derived from the run seed
PYRAMID_STREAM = 1
TARGET_STREAM = 2
SAMPLE_STREAM = 3

# the tightest tolerance the f64 solves reach reliably; Picard polishing
# finishes what Broyden leaves
GRADCHECK_SOLVER_TOL = 1e-11
GRADCHECK_SOLVER_ITER = 200
GRADCHECK_POLISH_ITER = 1000
PICARD_MAX_ITER = 2000
# the reference iteration is run well past the solver tolerance
PICARD_TOL_FACTOR = 1e-3
AGREEMENT_TOL = 1e-5


def parse_bool(value):
    lowered = value.lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise ValueError("expected a boolean, got %r" % value)


def choice(*options):
    def parse(value):
        if value not in options:
            raise ValueError("expected one of %s, got %r" % (', '.join(options), value))
        return value
    return parse


def optional_str(value):
    return value


# key -> (parser, default)
DEFAULTS = OrderedDict([
    ('seed', (int, 0)),
    ('dtype', (choice('f32', 'f64'), 'f64')),
    ('threads', (int, 0)),
    ('out', (optional_str, '')),
    ('pyramid.batch', (int, 1)),
    ('pyramid.base_hw', (int, 16)),
    ('neck.channels', (int, 16)),
    ('neck.use_equilibrium', (parse_bool, True)),
    ('neck.use_dual_attention', (parse_bool, True)),
    ('neck.use_class_adapt', (parse_bool, True)),
    ('attention.alg1_spatial', (parse_bool, False)),
    ('attention.gap_mode', (choice('dynamic', 'static'), 'dynamic')),
    ('solver.alpha', (float, 0.1)),
    ('solver.tol', (float, 1e-6)),
    ('solver.max_iter', (int, 50)),
    ('solver.memory', (int, 20)),
    ('solver.backward_max_iter', (int, 200)),
    ('solver.polish_iter', (int, 0)),
    ('class_adapt.mode', (choice('prototype', 'conv'), 'prototype')),
    ('class_adapt.num_classes', (int, 3)),
    ('class_adapt.prototype_file', (optional_str, '')),
    ('loss.lambda_det', (float, 1.0)),
    ('loss.lambda_eq', (float, 0.5)),
    ('loss.lambda_ca', (float, 0.2)),
    ('gradcheck.samples', (int, 3)),
    ('bench.runs', (int, 30)),
    ('bench.warmup', (int, 5)),
])


class RunConfig(object):
    """
    Flat ``key=value`` run configuration. Every key has a typed default;
    ``lines`` remembers where each value came from so later validation
    errors can still point at the offending line.
    """
    def __init__(self, values=None):
        self.values = OrderedDict((key, default) for key, (_, default) in DEFAULTS.items())
        self.lines = {}
        for key, value in (values or {}).items():
            self.set(key, value)
        self.validate()

    @classmethod
    def parse(cls, text):
        config = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError("expected key=value, got %r" % line, lineno)
            key, value = [part.strip() for part in line.split('=', 1)]
            if not value:
                raise ConfigError("no value given for %r" % key, lineno, key)
            config.set(key, value, lineno)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path):
        with open(path, encoding='utf-8') as fh:
            return cls.parse(fh.read())

    def set(self, key, value, lineno=None):
        if key not in DEFAULTS:
            raise ConfigError("unknown configuration key %r" % key, lineno, key)
        parser = DEFAULTS[key][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as e:
                raise ConfigError("bad value for %s: %s" % (key, e), lineno, key)
        self.values[key] = value
        if lineno is not None:
            self.lines[key] = lineno
        else:
            self.lines.pop(key, None)

    def override(self, **options):
        """
        Command-line values win over the file. ``None`` means not given.
        """
        for key, value in options.items():
            if value is not None:
                self.set(key, value)
        self.validate()
        return self

    def error(self, key, message):
        return ConfigError(message, self.lines.get(key), key)

    def validate(self):
        base_hw = self['pyramid.base_hw']
        if base_hw < 4 or base_hw % 4:
            raise self.error('pyramid.base_hw', "pyramid.base_hw must be a positive multiple of 4, got %d" % base_hw)
        if self['pyramid.batch'] < 1:
            raise self.error('pyramid.batch', "pyramid.batch must be at least 1")
        if self['threads'] < 0:
            raise self.error('threads', "threads must be non-negative")
        if self['seed'] < 0:
            raise self.error('seed', "seed must be non-negative")
        for key in ('gradcheck.samples', 'bench.runs'):
            if self[key] < 1:
                raise self.error(key, "%s must be at least 1" % key)
        if self['bench.warmup'] < 0:
            raise self.error('bench.warmup', "bench.warmup must be non-negative")
        # the typed builders carry the remaining invariants
        for build in (self.solver_config, self.neck_config, self.loss_weights):
            try:
                build()
            except ConfigError as e:
                raise self.error(e.key, str(e))

    def __getitem__(self, key):
        return self.values[key]

    @property
    def dtype(self):
        return DTYPES[self['dtype']]

    def solver_config(self):
        return SolverConfig(alpha=self['solver.alpha'], tol=self['solver.tol'],
                            max_iter=self['solver.max_iter'], memory=self['solver.memory'],
                            backward_max_iter=self['solver.backward_max_iter'],
                            polish_iter=self['solver.polish_iter'])

    def neck_config(self):
        return NeckConfig(channels=self['neck.channels'],
                          use_equilibrium=self['neck.use_equilibrium'],
                          use_dual_attention=self['neck.use_dual_attention'],
                          use_class_adapt=self['neck.use_class_adapt'],
                          solver=self.solver_config(),
                          alg1_spatial=self['attention.alg1_spatial'],
                          gap_mode=self['attention.gap_mode'],
                          class_adapt_mode=self['class_adapt.mode'],
                          num_classes=self['class_adapt.num_classes'],
                          threads=self['threads'] or None)

    def loss_weights(self):
        return LossWeights(self['loss.lambda_det'], self['loss.lambda_eq'], self['loss.lambda_ca'])

    def to_dict(self):
        return OrderedDict(self.values)


class RunReport(object):
    def __init__(self, command, config):
        self.command = command
        self.config = config
        self.checks = OrderedDict()
        self.gradients = OrderedDict()
        self.solver = OrderedDict()
        self.rows = []
        self.parameter_count = None
        self.timings = OrderedDict()
        self.coverage = OrderedDict()
        self.created_on = timezone.now()

    def check(self, name, passed, **detail):
        if name in self.checks:
            raise ValueError("check %r recorded twice" % name)
        passed = bool(passed)
        self.checks[name] = OrderedDict([('passed', passed)] + sorted(detail.items()))
        log = logger.info if passed else logger.warning
        log("%s %s: %s", self.command, name, 'pass' if passed else 'FAIL')
        return passed

    @property
    def passed(self):
        return all(check['passed'] for check in self.checks.values())

    @property
    def seed(self):
        return self.config['seed']

    def failures(self):
        return [name for name, check in self.checks.items() if not check['passed']]

    def to_dict(self):
        return OrderedDict([
            ('schema_version', REPORT_SCHEMA_VERSION),
            ('command', self.command),
            ('created_on', self.created_on),
            ('passed', self.passed),
            ('config', self.config.to_dict()),
            ('checks', self.checks),
            ('gradients', self.gradients),
            ('solver', self.solver),
            ('rows', self.rows),
            ('parameter_count', self.parameter_count),
            ('timings', self.timings),
            ('coverage', self.coverage),
        ])

    def to_json(self):
        return json.dumps(self.to_dict(), cls=DjangoJSONEncoder, indent=2)

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as fh:
            fh.write(self.to_json())
            fh.write('\n')
        return path


class Timer(object):
    def __init__(self, report, name):
        self.report = report
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        self.report.timings[self.name] = self.seconds
        return False


def synthetic_pyramid(config, channels=None, base_hw=None):
    """
    Standard-normal c3/c4/c5 levels from the run seed; c4 and c5 halve the
    spatial size of the level before.
    """
    channels = channels or config['neck.channels']
    base_hw = base_hw or config['pyramid.base_hw']
    rng = np.random.default_rng([config['seed'], PYRAMID_STREAM])
    n = config['pyramid.batch']
    levels = [Tensor4(rng.standard_normal((n, channels, base_hw >> i, base_hw >> i)), dtype=config.dtype)
              for i in range(3)]
    return FeaturePyramid(*levels)


def build_neck(config, pyramid, cfg=None, prototype_file=None):
    """
    A seeded neck for ``pyramid``: parameters, prototypes when the prototype
    head is on, and refine kernels calibrated to a contracting fusion.
    """
    cfg = cfg or config.neck_config()
    store = ParamStore(config['seed'], config.dtype)
    params = NeckParams.create(store, cfg, pyramid.channels())
    if cfg.use_class_adapt and cfg.class_adapt_mode == 'prototype':
        params.prototypes = load_or_fit(prototype_file,
                                        lambda: fit_prototypes(params, pyramid, config['seed']))
    calibrate(params, pyramid)
    return params


def taped_pyramid(tape, pyramid):
    return FeaturePyramid(*[tape.input(name, level) for name, level in zip(('c3', 'c4', 'c5'), pyramid)])


def param_group(name):
    return name.rsplit('.', 1)[0]


def sample_entries(store, samples, seed):
    rng = np.random.default_rng([seed, SAMPLE_STREAM])
    entries = OrderedDict()
    for name in store:
        size = store[name].size
        picks = rng.choice(size, size=min(samples, size), replace=False)
        entries[name] = sorted(int(i) for i in picks)
    return entries


def cmd_gradcheck(config):
    """
    Compare tape gradients of the full objective against central
    differences, per parameter group.
    """
    if config['dtype'] != 'f64':
        logger.warning("gradcheck always runs in f64, ignoring dtype=%s", config['dtype'])
        config = RunConfig(config.to_dict())
        config.set('dtype', 'f64')
    report = RunReport('gradcheck', config)
    with Timer(report, 'total'):
        cfg = config.neck_config()
        cfg.solver = cfg.solver.tightened(GRADCHECK_SOLVER_TOL, GRADCHECK_SOLVER_ITER, GRADCHECK_POLISH_ITER)
        weights = config.loss_weights()
        pyramid = synthetic_pyramid(config)
        params = build_neck(config, pyramid, cfg, config['class_adapt.prototype_file'] or None)
        rng = np.random.default_rng([config['seed'], TARGET_STREAM])
        target = Tensor4(rng.standard_normal(pyramid.c3.shape[:1] + (cfg.channels,) + pyramid.c3.shape[2:]))
        report.parameter_count = count_parameters(params)

        def objective(store):
            tape = ad.Tape()
            neck = params.with_store(store)
            out = neck_forward(taped_pyramid(tape, pyramid), neck, cfg)
            l_det = surrogate_detection_loss(out.pyramid.c3, target)
            l_eq = 0.0
            if cfg.use_equilibrium:
                sweep = out.sweep.levels()
                # at F* the residual norm is ~0 where the l2 norm has no gradient
                terms = [equilibrium_loss(level_closure(sweep, neck.fusion[i], i), sweep[i])
                         for i in range(len(LEVEL_NAMES))]
                l_eq = terms[0]
                for term in terms[1:]:
                    l_eq = ad.add(l_eq, term)
            l_ca = 0.0
            if cfg.use_class_adapt:
                terms = [kl_uniform_loss(maps) for maps in out.maps]
                l_ca = terms[0]
                for term in terms[1:]:
                    l_ca = ad.add(l_ca, term)
            return tape, total_loss(l_det, l_eq, l_ca, weights), out

        store = params.store
        with Timer(report, 'analytic'):
            tape, loss, out = objective(store)
            analytic = ad.backward(tape, loss, list(store), store)
        entries = sample_entries(store, config['gradcheck.samples'], config['seed'])
        with Timer(report, 'numeric'):
            numeric = ad.finite_diff_entries(lambda s: objective(s)[1], store, entries, GRADCHECK_EPS)

        if not out.single_pass:
            for name, result in zip(LEVEL_NAMES, out.results):
                entry = result.to_dict()
                entry.pop('residual_trace')
                report.solver[name] = entry
            report.check('equilibrium.converged', out.converged, tolerance=cfg.solver.tol)

        tolerance = GRADCHECK_TOLERANCE if cfg.use_equilibrium else GRADCHECK_EXPLICIT_TOLERANCE
        groups = OrderedDict()
        checked = OrderedDict()
        sizes = OrderedDict()
        for name, values in numeric.items():
            flat = analytic[name].data.ravel()
            errors = [float(ad.relative_error(flat[i], d)) for i, d in values.items()]
            group = param_group(name)
            groups[group] = max(groups.get(group, 0.0), max(errors))
            checked[group] = checked.get(group, 0) + len(values)
            sizes[group] = sizes.get(group, 0) + store[name].size
        for group, error in groups.items():
            report.gradients[group] = error
            report.check('gradient.%s' % group, error < tolerance, max_relative_error=error,
                         tolerance=tolerance, entries=checked[group], size=sizes[group])
        report.coverage = OrderedDict([
            ('entries', sum(checked.values())),
            ('tensors', len(numeric)),
            ('groups', len(groups)),
            ('parameters', report.parameter_count),
        ])
        report.check('loss.finite', math.isfinite(loss.value.item()), value=loss.value.item())
    return report


def trace_is_monotone(trace):
    return all(b <= a for a, b in zip(trace, trace[1:]))


def cmd_solve(config):
    """
    Broyden against plain fixed-point iteration on every level of a seeded,
    calibrated fusion instance.
    """
    report = RunReport('solve', config)
    with Timer(report, 'total'):
        cfg = config.neck_config().variant(use_equilibrium=True, use_class_adapt=False)
        pyramid = synthetic_pyramid(config)
        params = build_neck(config, pyramid, cfg)
        report.parameter_count = count_parameters(params)
        levels = [ad.value_of(level) for level in neck_pass(pyramid, params, cfg).levels()]
        tol = cfg.solver.tol
        for index, name in enumerate(LEVEL_NAMES):
            closure = level_closure(levels, params.fusion[index], index)
            with Timer(report, 'broyden.%s' % name):
                result = broyden_solve(closure, levels[index], cfg.solver)
            with Timer(report, 'picard.%s' % name):
                reference = picard_solve(closure, levels[index], tol * PICARD_TOL_FACTOR, PICARD_MAX_ITER)
            entry = result.to_dict()
            entry['monotone'] = trace_is_monotone(result.residual_trace)
            entry['picard'] = reference.to_dict()
            entry['picard'].pop('residual_trace')
            report.solver[name] = entry
            if result.converged:
                l_eq = equilibrium_loss(closure, result.f_star).item()
                report.check('equilibrium_loss.%s' % name, l_eq <= tol, value=l_eq, tolerance=tol)
            if result.converged and reference.converged:
                gap = float(np.linalg.norm(result.f_star.data - reference.f_star.data))
                report.check('picard_agreement.%s' % name, gap <= AGREEMENT_TOL, distance=gap,
                             tolerance=AGREEMENT_TOL)

        identity = broyden_solve(lambda f: f, levels[0], cfg.solver)
        report.check('identity_fixed_point', identity.iterations == 0 and identity.residual_norm == 0,
                     iterations=identity.iterations, residual_norm=identity.residual_norm)
    return report


ABLATION_AXES = ('use_equilibrium', 'use_dual_attention', 'use_class_adapt')


def pyramid_checksum(pyramid):
    digest = hashlib.sha256()
    for level in pyramid:
        digest.update(ad.value_of(level).data.tobytes())
    return digest.hexdigest()


def cmd_ablate(config):
    """
    The neck under every on/off combination of its three components, plus
    the plain top-down baseline.
    """
    report = RunReport('ablate', config)
    base = config.neck_config()
    pyramid = synthetic_pyramid(config)
    counts = OrderedDict()
    checksums = []
    shapes_ok = True
    formula_ok = True
    with Timer(report, 'total'):
        for switches in itertools.product((False, True), repeat=len(ABLATION_AXES)):
            cfg = base.variant(**dict(zip(ABLATION_AXES, switches)))
            params = build_neck(config, pyramid, cfg)
            start = time.perf_counter()
            out = neck_forward(pyramid, params, cfg)
            seconds = time.perf_counter() - start
            count = count_parameters(params)
            expected = expected_parameter_count(cfg, pyramid.channels())
            valid = out.pyramid.shapes() == [(s[0], cfg.channels) + s[2:] for s in pyramid.shapes()]
            shapes_ok = shapes_ok and valid
            formula_ok = formula_ok and count == expected
            checksum = pyramid_checksum(out.pyramid)
            checksums.append(checksum)
            counts[switches] = count
            report.rows.append(OrderedDict([
                ('variant', cfg.label()),
                ('switches', OrderedDict(zip(ABLATION_AXES, switches))),
                ('parameter_count', count),
                ('checksum', checksum),
                ('shapes', out.pyramid.shapes()),
                ('converged', out.converged),
                ('seconds', seconds),
            ]))

        baseline_store = panet_params(ParamStore(config['seed'], config.dtype), base.channels, pyramid.channels())
        start = time.perf_counter()
        baseline = panet_top_down(pyramid, baseline_store)
        report.rows.append(OrderedDict([
            ('variant', 'baseline'),
            ('parameter_count', count_parameters(baseline_store)),
            ('checksum', pyramid_checksum(baseline)),
            ('shapes', baseline.shapes()),
            ('seconds', time.perf_counter() - start),
        ]))

    monotone = all(counts[a] < counts[b] for a in counts for b in counts
                   if a != b and all(x <= y for x, y in zip(a, b)))
    report.parameter_count = counts[(True,) * len(ABLATION_AXES)]
    report.check('ablate.shapes', shapes_ok)
    report.check('ablate.checksums_distinct', len(set(checksums)) == len(checksums))
    report.check('ablate.monotone_counts', monotone)
    report.check('ablate.count_formula', formula_ok)
    return report


def time_forward(pyramid, params, cfg, runs, warmup):
    for _ in range(warmup):
        neck_forward(pyramid, params, cfg)
    times = []
    out = None
    for _ in range(runs):
        start = time.perf_counter()
        out = neck_forward(pyramid, params, cfg)
        times.append(time.perf_counter() - start)
    return times, out


def bench_row(label, threads, times, base_hw):
    return OrderedDict([
        ('variant', label),
        ('threads', threads),
        ('base_hw', base_hw),
        ('median', float(np.median(times))),
        ('p95', float(np.percentile(times, 95))),
        ('times', times),
    ])


def cmd_bench(config):
    """
    Wall time of neck_forward single- and multi-threaded, plus an
    informational row at twice the input size.
    """
    report = RunReport('bench', config)
    runs, warmup = config['bench.runs'], config['bench.warmup']
    base_hw = config['pyramid.base_hw']
    pyramid = synthetic_pyramid(config)
    with Timer(report, 'total'):
        single = config.neck_config().variant(threads=1)
        params = build_neck(config, pyramid, single)
        report.parameter_count = count_parameters(params)
        multi_threads = max(2, worker_count(config['threads'] or None))
        multi = single.variant(threads=multi_threads)

        single_times, single_out = time_forward(pyramid, params, single, runs, warmup)
        multi_times, multi_out = time_forward(pyramid, params, multi, runs, warmup)
        report.rows.append(bench_row('single', 1, single_times, base_hw))
        report.rows.append(bench_row('multi', multi_threads, multi_times, base_hw))

        large = synthetic_pyramid(config, base_hw=2 * base_hw)
        large_params = build_neck(config, large, single)
        large_times, _ = time_forward(large, large_params, single, runs, warmup)
        row = bench_row('single', 1, large_times, 2 * base_hw)
        # hardware dependent, so reported rather than asserted
        row['slower_than_base'] = row['median'] > report.rows[0]['median']
        report.rows.append(row)

    report.check('bench.runs_recorded', len(single_times) == runs and len(multi_times) == runs,
                 runs=runs)
    identical = all(a.identical(b) for a, b in zip(single_out.pyramid.values(), multi_out.pyramid.values()))
    report.check('bench.thread_determinism', identical)
    return report


COMMANDS = OrderedDict([
    ('gradcheck', cmd_gradcheck),
    ('solve', cmd_solve),
    ('ablate', cmd_ablate),
    ('bench', cmd_bench),
])


def run_command(name, config):
    try:
        command = COMMANDS[name]
    except KeyError:
        raise ConfigError("unknown command %r, expected one of %s" % (name, ', '.join(COMMANDS)))
    logger.info("running %s with seed %d", name, config['seed'])
    report = command(config)
    logger.info("%s finished: %s", name, 'pass' if report.passed else 'FAIL (%s)' % ', '.join(report.failures()))
    return report
