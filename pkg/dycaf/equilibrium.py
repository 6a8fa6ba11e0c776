"""
Implicit multi-scale equilibrium fusion.

``phi`` is the fusion operator over an aligned pyramid stack, ``broyden_solve``
finds its fixed point, and ``implicit_backward`` differentiates through that
fixed point without unrolling the solver.
"""
import logging
import math
from collections import OrderedDict

import numpy as np

from dycaf import autodiff as ad
from dycaf.autodiff import GradMap, Tape, TapeNode
from dycaf.exceptions import (ConfigError, ContractionError, NonFiniteError,
                              ShapeError, SolverDivergenceError)
from dycaf.tensor import Tensor4

logger = logging.getLogger(__name__)

LEVEL_COUNT = 3
STATE = '__state__'
# consecutive growing adjoint updates tolerated before giving up
DIVERGENCE_WINDOW = 10
# a residual this many times the best one so far discards the secant model
RESET_GROWTH = 10.0
# residual differences within this many ulps of the state are round-off
NOISE_ULPS = 1e4
DENSE_ORACLE_LIMIT = 32


class SolverConfig(object):
    def __init__(self, alpha=0.1, tol=1e-6, max_iter=50, memory=20,
                 backward_max_iter=200, backward_tol=None, polish_iter=0):
        self.alpha = float(alpha)
        self.tol = float(tol)
        self.max_iter = int(max_iter)
        self.memory = int(memory)
        self.backward_max_iter = int(backward_max_iter)
        self.backward_tol = self.tol if backward_tol is None else float(backward_tol)
        self.polish_iter = int(polish_iter)
        self.validate()

    def validate(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError("solver.alpha must be in (0, 1], got %r" % self.alpha, key='solver.alpha')
        if self.tol <= 0:
            raise ConfigError("solver.tol must be positive, got %r" % self.tol, key='solver.tol')
        if self.max_iter < 1:
            raise ConfigError("solver.max_iter must be at least 1", key='solver.max_iter')
        if self.memory < 1:
            raise ConfigError("solver.memory must be at least 1", key='solver.memory')
        if self.backward_max_iter < 1:
            raise ConfigError("solver.backward_max_iter must be at least 1", key='solver.backward_max_iter')
        if self.polish_iter < 0:
            raise ConfigError("solver.polish_iter must not be negative", key='solver.polish_iter')

    def tightened(self, tol, max_iter, polish_iter=0):
        """
        A copy with a stricter tolerance and at least ``max_iter`` iterations
        (``polish_iter`` Picard steps and backward iterations).
        """
        polish_iter = max(self.polish_iter, polish_iter)
        return SolverConfig(self.alpha, min(self.tol, tol), max(self.max_iter, max_iter), self.memory,
                            max(self.backward_max_iter, max_iter, polish_iter), min(self.backward_tol, tol),
                            polish_iter)

    def to_dict(self):
        return OrderedDict([('alpha', self.alpha), ('tol', self.tol), ('max_iter', self.max_iter),
                            ('memory', self.memory), ('backward_max_iter', self.backward_max_iter),
                            ('backward_tol', self.backward_tol), ('polish_iter', self.polish_iter)])


class EquilibriumResult(object):
    def __init__(self, f_star, residual_norm, iterations, converged, residual_trace, polish_iterations=0):
        self.f_star = f_star
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.converged = converged
        self.residual_trace = list(residual_trace)
        self.polish_iterations = polish_iterations

    def to_dict(self):
        return OrderedDict([
            ('iterations', self.iterations),
            ('polish_iterations', self.polish_iterations),
            ('residual_norm', self.residual_norm),
            ('converged', self.converged),
            ('residual_trace', self.residual_trace),
        ])

    def __repr__(self):
        return "EquilibriumResult(residual=%.3e, iterations=%d, converged=%s)" % (
            self.residual_norm, self.iterations, self.converged)


class FusionParams(ad.ParamView):
    """
    Tensors of the fusion operator for one target level: a 1x1 convolution
    from the three stacked neighbours (3c channels) to one logit per level,
    and two depthwise 3x3 refine kernel sets.
    """
    def __init__(self, store, prefix, channels, levels=LEVEL_COUNT):
        super(FusionParams, self).__init__(store, prefix)
        self.channels = channels
        self.levels = levels

    @classmethod
    def create(cls, store, prefix, channels, levels=LEVEL_COUNT):
        params = cls(store, prefix, channels, levels)
        store.register(params.name('weight_conv.weight'), (levels, 3 * channels), fan_in=3 * channels)
        store.register(params.name('weight_conv.bias'), (levels,), fan_in=3 * channels)
        for i in range(2):
            store.register(params.name('refine.%d' % i), (channels, 1, 3, 3), fan_in=9)
        return params

    def refine_names(self):
        return [self.name('refine.0'), self.name('refine.1')]


def align_levels(levels, index):
    """
    Resample every level to the resolution of ``levels[index]``; levels are
    ordered finest first, one factor of two apart.
    """
    aligned = []
    for m, level in enumerate(levels):
        for _ in range(index - m):
            level = ad.resample(level, 'down2')
        for _ in range(m - index):
            level = ad.resample(level, 'up2')
        aligned.append(level)
    return aligned


def fusion_weights(stack, params, index):
    """
    Per-site softmax over the level axis of Conv1x1([S_{l-1}; S_l; S_{l+1}]).
    Boundary levels use themselves as their missing neighbour.
    """
    if len(stack) != params.levels:
        raise ShapeError("fusion needs %d levels, got %d" % (params.levels, len(stack)))
    below = stack[max(index - 1, 0)]
    above = stack[min(index + 1, len(stack) - 1)]
    logits = ad.conv1x1(ad.concat_channels([below, stack[index], above]),
                        params.get('weight_conv.weight', stack[index]),
                        params.get('weight_conv.bias', stack[index]))
    return ad.softmax_axis(logits, 'channel')


def fuse_levels(stack, weights):
    mixed = None
    for m, level in enumerate(stack):
        term = ad.mul(ad.slice_channels(weights, m, m + 1), level)
        mixed = term if mixed is None else ad.add(mixed, term)
    return mixed


def refine(x, params):
    hidden = ad.silu(ad.depthwise_conv(x, params.get('refine.0', x)))
    return ad.depthwise_conv(hidden, params.get('refine.1', x))


def phi(f, levels, params, index):
    """
    The fusion operator at level ``index``: the iterate ``f`` takes the place
    of that level in the aligned stack, the stack is mixed with the adaptive
    per-site weights and the mixture is refined.
    """
    if ad.value_of(f).shape != ad.value_of(levels[index]).shape:
        raise ShapeError("iterate shape %r does not match level %d shape %r"
                         % (ad.value_of(f).shape, index, ad.value_of(levels[index]).shape))
    stack = align_levels(levels, index)
    stack[index] = f
    weights = fusion_weights(stack, params, index)
    return refine(fuse_levels(stack, weights), params)


class PhiClosure(object):
    """
    An operator F -> Phi(F, inputs) with its external inputs bound by name.

    ``fn(f, inputs)`` must build its result from dycaf.autodiff primitives so
    that it can be evaluated on plain tensors or recorded on a tape.
    """
    def __init__(self, fn, inputs=None):
        self.fn = fn
        self.inputs = OrderedDict(inputs or ())

    @classmethod
    def wrap(cls, closure):
        if isinstance(closure, cls):
            return closure
        return cls(lambda f, inputs: closure(f))

    def __call__(self, f):
        if isinstance(f, TapeNode):
            inputs = OrderedDict((name, f.tape.lift(value)) for name, value in self.inputs.items())
        else:
            inputs = OrderedDict((name, ad.value_of(value)) for name, value in self.inputs.items())
        return self.fn(f, inputs)

    def values(self):
        """
        The same operator with any tape nodes among the inputs replaced by
        their values.
        """
        return PhiClosure(self.fn, [(name, ad.value_of(v)) for name, v in self.inputs.items()])

    def linearize(self, f):
        return Linearization(self, f)


class Linearization(object):
    """
    One taped evaluation of Phi at ``f``; vector-Jacobian products are then
    repeated backward sweeps over the same tape.
    """
    def __init__(self, closure, f):
        closure = PhiClosure.wrap(closure).values()
        self.tape = Tape()
        self.state = self.tape.input(STATE, f)
        self.input_nodes = OrderedDict((name, self.tape.input(name, value))
                                       for name, value in closure.inputs.items())
        self.output = closure.fn(self.state, self.input_nodes)
        if self.output.shape != f.shape:
            raise ShapeError("operator output %r does not match state %r" % (self.output.shape, f.shape))

    @property
    def value(self):
        return self.output.value

    def vjp_state(self, u):
        grads = self.tape.vjp(self.output, u)
        g = grads.get(self.state.id)
        return np.zeros(self.state.shape) if g is None else g

    def vjp_leaves(self, u):
        """
        Returns (parameter grads, input grads) as name -> ndarray dicts.
        """
        grads = self.tape.vjp(self.output, u)
        params = OrderedDict((node.name, grads.get(node.id)) for node in self.tape.leaves('param'))
        inputs = OrderedDict((name, grads.get(node.id)) for name, node in self.input_nodes.items())
        return params, inputs


class BroydenInverse(object):
    """
    Limited-memory good-Broyden inverse model B = -I + sum_i u_i v_i^T.
    """
    def __init__(self, memory):
        self.memory = memory
        self.us = []
        self.vs = []

    def matvec(self, x):
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + u * np.dot(v, x)
        return out

    def rmatvec(self, x):
        out = -x
        for u, v in zip(self.us, self.vs):
            out = out + v * np.dot(u, x)
        return out

    def update(self, s, y):
        by = self.matvec(y)
        denom = np.dot(s, by)
        if denom == 0 or not np.isfinite(denom):
            return False
        if len(self.us) == self.memory:
            self.us.pop(0)
            self.vs.pop(0)
        self.us.append((s - by) / denom)
        self.vs.append(self.rmatvec(s))
        return True


def _evaluate(phi_closure, x, shape, dtype, iteration):
    try:
        return np.asarray(phi_closure(Tensor4(x.reshape(shape), dtype=dtype)).data, dtype=np.float64).ravel()
    except NonFiniteError:
        raise SolverDivergenceError("non-finite iterate at iteration %d" % iteration, iteration)


def _secant_usable(step, dg, g, x):
    """
    Whether a secant pair carries information beyond round-off: the step
    must move the state and the residual must change by more than its own
    evaluation noise.
    """
    eps = np.finfo(np.float64).eps
    scale = max(1.0, float(np.linalg.norm(x)))
    if np.linalg.norm(step) <= math.sqrt(eps) * scale:
        return False
    dg_norm = float(np.linalg.norm(dg))
    return dg_norm > math.sqrt(eps) * float(np.linalg.norm(g)) and dg_norm > NOISE_ULPS * eps * scale


def broyden_solve(phi_closure, f0, cfg=None):
    """
    Solve F = Phi(F) by quasi-Newton iteration on g(F) = Phi(F) - F.

    Steps are F_{k+1} = F_k - alpha * B_k g(F_k) with B_0 = -I, so the first
    step is a Picard step damped by alpha. B_k models the inverse Jacobian of
    the relaxed residual alpha * g, which lets later steps grow to full
    quasi-Newton length. Secant pairs at round-off level are not used, and a
    residual that grows past RESET_GROWTH times the best one restarts the
    model from the best iterate. With ``cfg.polish_iter`` an unconverged
    solve finishes with plain Picard steps from the best iterate.
    """
    cfg = cfg or SolverConfig()
    shape, dtype = f0.shape, f0.dtype
    x = np.asarray(f0.data, dtype=np.float64).ravel().copy()
    gx = _evaluate(phi_closure, x, shape, dtype, 0) - x
    norm = float(np.linalg.norm(gx))
    trace = [norm]
    best_norm, best_x, best_g = norm, x, gx
    iterations = 0
    if norm <= cfg.tol:
        return EquilibriumResult(f0, norm, 0, True, trace)

    model = BroydenInverse(cfg.memory)
    for k in range(1, cfg.max_iter + 1):
        iterations = k
        step = -cfg.alpha * model.matvec(gx)
        x_new = x + step
        if not np.isfinite(x_new).all():
            raise SolverDivergenceError("non-finite iterate at iteration %d" % k, k)
        g_new = _evaluate(phi_closure, x_new, shape, dtype, k) - x_new
        norm = float(np.linalg.norm(g_new))
        trace.append(norm)
        logger.debug("broyden iteration %d residual %.3e", k, norm)
        if norm < best_norm:
            best_norm, best_x, best_g = norm, x_new, g_new
        if norm <= cfg.tol:
            break
        if norm > RESET_GROWTH * best_norm:
            logger.debug("broyden iteration %d: residual %.3e against best %.3e, restarting the model",
                         k, norm, best_norm)
            model = BroydenInverse(cfg.memory)
            x, gx = best_x, best_g
            continue
        if _secant_usable(step, g_new - gx, gx, x_new):
            model.update(step, cfg.alpha * (g_new - gx))
        x, gx = x_new, g_new

    polished = 0
    x, gx = best_x, best_g
    while best_norm > cfg.tol and polished < cfg.polish_iter:
        polished += 1
        x = x + gx
        gx = _evaluate(phi_closure, x, shape, dtype, iterations + polished) - x
        norm = float(np.linalg.norm(gx))
        trace.append(norm)
        if norm < best_norm:
            best_norm, best_x = norm, x
        elif norm > RESET_GROWTH * best_norm:
            break
    if polished:
        logger.debug("picard polish took %d steps to residual %.3e", polished, best_norm)

    converged = best_norm <= cfg.tol
    if not converged:
        logger.warning("broyden stopped after %d iterations (%d polish) at residual %.3e (tol %.1e)",
                       iterations, polished, best_norm, cfg.tol)
    f_star = Tensor4(best_x.reshape(shape), dtype=dtype)
    return EquilibriumResult(f_star, best_norm, iterations, converged, trace, polished)


def picard_solve(phi_closure, f0, tol=1e-6, max_iter=50):
    """
    Plain fixed-point iteration F <- Phi(F), the brute-force reference for
    broyden_solve.
    """
    x = f0
    trace = []
    best = None
    for k in range(max_iter + 1):
        fx = phi_closure(x)
        norm = float(np.linalg.norm(fx.data - x.data))
        trace.append(norm)
        if best is None or norm < best[0]:
            best = (norm, x, k)
        if norm <= tol or k == max_iter:
            break
        x = fx
    norm, x, k = best
    return EquilibriumResult(x, norm, len(trace) - 1, norm <= tol, trace)


def fd_jacobian(phi_closure, f, eps=1e-6):
    """
    Dense central-difference Jacobian of Phi at ``f``. Only meant as an
    oracle, so the state is limited to DENSE_ORACLE_LIMIT elements.
    """
    size = f.size
    if size > DENSE_ORACLE_LIMIT:
        raise ShapeError("dense Jacobian is limited to %d state elements, got %d"
                         % (DENSE_ORACLE_LIMIT, size))
    base = np.asarray(f.data, dtype=np.float64).ravel()
    jac = np.zeros((size, size))
    for i in range(size):
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = phi_closure(Tensor4(plus.reshape(f.shape))).data.ravel()
        fm = phi_closure(Tensor4(minus.reshape(f.shape))).data.ravel()
        jac[:, i] = (fp - fm) / (2.0 * eps)
    return jac


def solve_adjoint(linearization, grad_out, cfg=None):
    """
    Solve u = grad_out + J^T u by fixed-point iteration. Returns (u, iterations).
    """
    cfg = cfg or SolverConfig()
    g = np.asarray(grad_out.data if isinstance(grad_out, Tensor4) else grad_out, dtype=np.float64)
    u = g.copy()
    previous = None
    growing = 0
    updates = []
    for k in range(1, cfg.backward_max_iter + 1):
        u_new = g + linearization.vjp_state(u)
        if not np.isfinite(u_new).all():
            raise ContractionError("adjoint iteration became non-finite at step %d" % k, k, updates)
        delta = float(np.linalg.norm(u_new - u))
        updates.append(delta)
        u = u_new
        if delta < cfg.backward_tol:
            return u, k
        growing = growing + 1 if previous is not None and delta > previous else 0
        if growing >= DIVERGENCE_WINDOW:
            raise ContractionError("adjoint updates grew for %d consecutive steps (last %.3e); "
                                   "the operator is not contracting at the fixed point"
                                   % (DIVERGENCE_WINDOW, delta), k, updates[-DIVERGENCE_WINDOW - 1:])
        previous = delta
    logger.warning("adjoint iteration stopped after %d steps, last update %.3e",
                   cfg.backward_max_iter, updates[-1])
    return u, cfg.backward_max_iter


def implicit_backward(phi_closure, f_star, grad_out, cfg=None):
    """
    Gradients of a loss through the fixed point F* = Phi(F*). Returns a
    GradMap over the parameters Phi reads and a name -> Tensor4 map over its
    bound external inputs.
    """
    lin = PhiClosure.wrap(phi_closure).linearize(f_star)
    u, iterations = solve_adjoint(lin, grad_out, cfg)
    logger.debug("adjoint solved in %d iterations", iterations)
    params, inputs = lin.vjp_leaves(u)
    param_grads = GradMap((name, Tensor4(np.zeros(lin.tape.leaf(name).shape) if g is None else g))
                          for name, g in params.items())
    input_grads = OrderedDict((name, Tensor4(np.zeros(lin.input_nodes[name].shape) if g is None else g))
                              for name, g in inputs.items())
    return param_grads, input_grads


def record_equilibrium(closure, result, cfg, store, param_names):
    """
    Put a solved fixed point on the tape its inputs live on, with implicit
    differentiation as its backward rule. Without a tape the fixed point is
    returned as is.
    """
    tape = ad._tape_of(list(closure.inputs.values()))
    if tape is None:
        return result.f_star
    input_names = list(closure.inputs)
    nodes = [tape.lift(closure.inputs[name]) for name in input_names]
    nodes += [tape.param(store, name) for name in param_names]
    frozen = closure.values()

    def rule(g, saved):
        lin = frozen.linearize(result.f_star)
        u, _ = solve_adjoint(lin, g, cfg)
        params, inputs = lin.vjp_leaves(u)
        return [inputs.get(name) for name in input_names] + [params.get(name) for name in param_names]
    return tape.custom('equilibrium', nodes, result.f_star, rule)


def lipschitz_estimate(phi_closure, f, steps=20, eps=1e-6, seed=0):
    """
    Power iteration on J^T J at ``f``: J v by central differences, J^T w from
    the tape. Returns the estimated spectral norm of the Jacobian.
    """
    closure = PhiClosure.wrap(phi_closure)
    values = closure.values()
    lin = values.linearize(f)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(f.shape)
    v /= np.linalg.norm(v)
    base = np.asarray(f.data, dtype=np.float64)
    estimate = 0.0
    for _ in range(steps):
        jv = (values(Tensor4(base + eps * v)).data - values(Tensor4(base - eps * v)).data) / (2.0 * eps)
        jtjv = lin.vjp_state(jv)
        norm = float(np.linalg.norm(jtjv))
        if norm == 0:
            return 0.0
        estimate = math.sqrt(norm)
        v = jtjv / norm
    return estimate


def calibrate_refine(params, phi_closure, f, target=0.9, steps=20, rounds=3):
    """
    Rescale the refine kernels of ``params`` until the local Lipschitz
    estimate of Phi at ``f`` is at most ``target``. Returns the final
    estimate.
    """
    estimate = lipschitz_estimate(phi_closure, f, steps)
    for _ in range(rounds):
        if estimate <= target:
            break
        # refine is two convolutions deep, split the correction between them
        factor = math.sqrt(target / estimate) * 0.99
        for name in params.refine_names():
            params.store.set(name, params.store[name].data * factor)
        estimate = lipschitz_estimate(phi_closure, f, steps)
        logger.info("rescaled %s refine kernels, Lipschitz estimate %.4f", params.prefix, estimate)
    return estimate
