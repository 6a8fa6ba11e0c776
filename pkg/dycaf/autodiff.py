"""
Tape-based reverse-mode differentiation over the tensor primitives.

Every primitive in this module is polymorphic: called with plain ``Tensor4``
values it just evaluates the kernel from ``dycaf.tensor``; called with at
least one ``TapeNode`` it records the operation on that node's tape together
with its backward rule. Block code is written once against these functions
and runs either way.
"""
import copy
import logging
from collections import OrderedDict

import numpy as np

from dycaf import tensor as T
from dycaf.exceptions import NonFiniteError, ShapeError, UnknownParameterError
from dycaf.tensor import Tensor4

logger = logging.getLogger(__name__)

SCALAR_SHAPE = (1, 1, 1, 1)


class TapeNode(object):
    """
    One recorded value. ``inputs`` are ids of earlier nodes, ``saved`` holds
    the forward arrays the backward rule reads, ``kind`` is one of ``op``,
    ``param``, ``input`` or ``constant``.
    """
    __slots__ = ('tape', 'id', 'op', 'inputs', 'saved', 'value', 'rule', 'name', 'kind')

    def __init__(self, tape, id, op, inputs, value, rule=None, saved=(), name=None, kind='op'):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.rule = rule
        self.saved = saved
        self.name = name
        self.kind = kind

    @property
    def shape(self):
        return self.value.shape

    @property
    def n(self):
        return self.value.n

    @property
    def c(self):
        return self.value.c

    @property
    def h(self):
        return self.value.h

    @property
    def w(self):
        return self.value.w

    def __repr__(self):
        return "TapeNode(%d, %s, shape=%r)" % (self.id, self.name or self.op, self.shape)


class Tape(object):
    """
    Nodes are appended in creation order, so the list is already a
    topological order of the DAG.
    """
    def __init__(self):
        self.nodes = []
        self._leaves = OrderedDict()

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, value, rule, saved=()):
        for node in inputs:
            if node.tape is not self:
                raise ValueError("operation %r mixes nodes from different tapes" % op)
        node = TapeNode(self, len(self.nodes), op, tuple(i.id for i in inputs), value,
                        rule=rule, saved=saved)
        self.nodes.append(node)
        return node

    def _leaf(self, kind, value, name=None):
        node = TapeNode(self, len(self.nodes), kind, (), value, name=name, kind=kind)
        self.nodes.append(node)
        if name is not None:
            self._leaves[name] = node
        return node

    def param(self, store, name):
        node = self._leaves.get(name)
        if node is not None:
            if node.kind != 'param':
                raise ValueError("%r is already an input on this tape" % name)
            return node
        return self._leaf('param', store[name], name)

    def input(self, name, value):
        node = self._leaves.get(name)
        if node is not None:
            raise ValueError("%r is already a leaf on this tape" % name)
        return self._leaf('input', value, name)

    def constant(self, value):
        if not isinstance(value, Tensor4):
            value = Tensor4(value)
        return self._leaf('constant', value)

    def lift(self, value):
        if isinstance(value, TapeNode):
            if value.tape is not self:
                raise ValueError("node belongs to another tape")
            return value
        return self.constant(value)

    def leaf(self, name):
        try:
            return self._leaves[name]
        except KeyError:
            raise UnknownParameterError("no leaf named %r on this tape" % name)

    def leaves(self, kind=None):
        return [node for node in self._leaves.values() if kind is None or node.kind == kind]

    def custom(self, op, inputs, value, rule, saved=()):
        """
        Record an operation whose backward rule is supplied by the caller.
        ``rule(g, saved)`` returns one gradient (or None) per input.
        """
        return self.record(op, [self.lift(i) for i in inputs], value, rule, saved)

    def vjp(self, output, cotangent):
        """
        Pull ``cotangent`` back from ``output`` to every leaf it depends on.
        Returns a dict from leaf node id to gradient array. The tape is not
        modified, so repeated calls give identical results.
        """
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != output.shape:
            raise ShapeError("cotangent shape %r does not match output %r" % (cot.shape, output.shape))
        grads = {output.id: cot}
        leaf_grads = {}
        for node in reversed(self.nodes[:output.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.rule is None:
                leaf_grads[node.id] = g
                continue
            for input_id, gi in zip(node.inputs, node.rule(g, node.saved)):
                if gi is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + gi
                else:
                    grads[input_id] = gi
        return leaf_grads


class GradMap(OrderedDict):
    """
    Parameter name to gradient tensor, one entry per requested name.
    """
    def max_abs(self):
        return max([float(np.abs(g.data).max()) for g in self.values()] or [0.0])


def backward(tape, loss_node, wrt, store=None):
    if loss_node.shape != SCALAR_SHAPE:
        raise ShapeError("backward needs a scalar loss of shape (1,1,1,1), got %r" % (loss_node.shape,))
    leaf_grads = tape.vjp(loss_node, np.ones(SCALAR_SHAPE))
    grads = GradMap()
    for name in wrt:
        node = tape._leaves.get(name)
        if node is not None:
            shape = node.shape
        elif store is not None and name in store:
            shape = store[name].shape
        else:
            raise UnknownParameterError("cannot differentiate with respect to unknown parameter %r" % name)
        g = leaf_grads.get(node.id) if node is not None else None
        grads[name] = Tensor4(np.zeros(shape) if g is None else g)
    return grads


def _scalar(value):
    if isinstance(value, Tensor4):
        return value.item()
    if isinstance(value, TapeNode):
        return value.value.item()
    return float(value)


def finite_diff_entries(f, store, entries, eps=1e-6):
    """
    Central differences for selected scalar entries: ``entries`` maps a
    parameter name to flat indices. Returns name -> {index: derivative}.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    logger.debug("central differences over %d entries of %d tensors",
                 sum(len(indices) for indices in entries.values()), len(entries))
    out = OrderedDict()
    for name, indices in entries.items():
        values = OrderedDict()
        for index in indices:
            try:
                fp = _scalar(f(store.perturbed(name, index, eps)))
                fm = _scalar(f(store.perturbed(name, index, -eps)))
            except NonFiniteError as exc:
                logger.debug("perturbing %s[%d] broke the objective: %s", name, index, exc)
                fp = fm = float('nan')
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("objective is not finite when perturbing %r[%d]" % (name, index),
                                     where=name)
            values[index] = (fp - fm) / (2.0 * eps)
        out[name] = values
    return out


def finite_diff_grad(f, store, eps=1e-6, names=None):
    """
    The independent oracle: central differences over every scalar of every
    named parameter (all of them by default).
    """
    names = list(store) if names is None else list(names)
    entries = OrderedDict((name, range(store[name].size)) for name in names)
    values = finite_diff_entries(f, store, entries, eps)
    grads = GradMap()
    for name in names:
        flat = np.array([values[name][i] for i in range(store[name].size)])
        grads[name] = Tensor4(flat.reshape(store[name].shape))
    return grads


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def max_relative_error(analytic, numeric):
    errors = [float(relative_error(analytic[name].data, numeric[name].data).max()) for name in numeric]
    return max(errors or [0.0])


def _tape_of(*args):
    tape = None
    for arg in args:
        items = arg if isinstance(arg, (list, tuple)) else (arg,)
        for item in items:
            if isinstance(item, TapeNode):
                if tape is None:
                    tape = item.tape
                elif item.tape is not tape:
                    raise ValueError("arguments come from different tapes")
    return tape


def value_of(x):
    return x.value if isinstance(x, TapeNode) else x


def _unbroadcast(g, shape):
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def conv1x1(x, weights, bias=None):
    tape = _tape_of(x, weights, bias)
    if tape is None:
        return T.conv1x1(x, weights, bias)
    x, w = tape.lift(x), tape.lift(weights)
    b = tape.lift(bias) if bias is not None else None
    value = T.conv1x1(x.value, w.value, b.value if b is not None else None)
    w_shape = w.shape
    b_shape = b.shape if b is not None else None

    def rule(g, saved):
        xv, wm = saved
        gx = np.einsum('ok,nohw->nkhw', wm, g)
        gw = np.einsum('nohw,nkhw->ok', g, xv).reshape(w_shape)
        grads = [gx, gw]
        if b_shape is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(b_shape))
        return grads
    inputs = [x, w] + ([b] if b is not None else [])
    return tape.record('conv1x1', inputs, value, rule, saved=(x.value.data, T._matrix(w.value)))


def depthwise_conv(x, kernels):
    tape = _tape_of(x, kernels)
    if tape is None:
        return T.depthwise_conv(x, kernels)
    x, kn = tape.lift(x), tape.lift(kernels)
    value = T.depthwise_conv(x.value, kn.value)
    k_shape = kn.shape

    def rule(g, saved):
        xv, kern = saved
        k = kern.shape[1]
        p = (k - 1) // 2
        n, c, h, w = xv.shape
        xp = T.pad_same(xv, k)
        gxp = np.zeros(xp.shape)
        gk = np.zeros(kern.shape)
        for a in range(k):
            for b in range(k):
                window = xp[:, :, a:a + h, b:b + w]
                gk[:, a, b] = np.einsum('nchw,nchw->c', g, window)
                gxp[:, :, a:a + h, b:b + w] += kern[None, :, a, b, None, None] * g
        return [gxp[:, :, p:p + h, p:p + w], gk.reshape(k_shape)]
    return tape.record('depthwise_conv', [x, kn], value, rule, saved=(x.value.data, T._kernels(kn.value)))


def channel_pool(x, mode):
    if not isinstance(x, TapeNode):
        return T.channel_pool(x, mode)
    value = T.channel_pool(x.value, mode)
    if mode == 'avg':
        def rule(g, saved):
            (c, shape) = saved
            return [np.broadcast_to(g / c, shape).copy()]
        return x.tape.record('channel_pool_avg', [x], value, rule, saved=(x.c, x.shape))

    def rule(g, saved):
        (xv,) = saved
        # argmax scans in channel order, so ties go to the first maximum
        idx = np.argmax(xv, axis=1)[:, None]
        gx = np.zeros(xv.shape)
        np.put_along_axis(gx, idx, g, axis=1)
        return [gx]
    return x.tape.record('channel_pool_max', [x], value, rule, saved=(x.value.data,))


def global_avg_pool(x):
    if not isinstance(x, TapeNode):
        return T.global_avg_pool(x)
    value = T.global_avg_pool(x.value)

    def rule(g, saved):
        (shape,) = saved
        return [np.broadcast_to(g / (shape[2] * shape[3]), shape).copy()]
    return x.tape.record('global_avg_pool', [x], value, rule, saved=(x.shape,))


def activation(x, kind):
    if not isinstance(x, TapeNode):
        return T.activation(x, kind)
    value = T.activation(x.value, kind)

    def rule(g, saved):
        t, = saved
        if kind == 'relu':
            return [g * (t > 0)]
        s = T.sigmoid_array(t)
        if kind == 'sigmoid':
            return [g * s * (1.0 - s)]
        return [g * (s + t * s * (1.0 - s))]
    return x.tape.record('activation_%s' % kind, [x], value, rule, saved=(x.value.data,))


def sigmoid(x):
    return activation(x, 'sigmoid')


def silu(x):
    return activation(x, 'silu')


def relu(x):
    return activation(x, 'relu')


def softmax_axis(x, axis):
    if not isinstance(x, TapeNode):
        return T.softmax_axis(x, axis)
    value = T.softmax_axis(x.value, axis)
    axes = (1,) if axis == 'channel' else (2, 3)

    def rule(g, saved):
        s, = saved
        return [s * (g - (g * s).sum(axis=axes, keepdims=True))]
    return x.tape.record('softmax_%s' % axis, [x], value, rule, saved=(value.data,))


def resample(x, mode):
    if not isinstance(x, TapeNode):
        return T.resample(x, mode)
    value = T.resample(x.value, mode)
    if mode == 'up2':
        def rule(g, saved):
            n, c, h2, w2 = g.shape
            return [g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))]
    else:
        def rule(g, saved):
            return [T.up2_array(g) * 0.25]
    return x.tape.record('resample_%s' % mode, [x], value, rule)


def concat_channels(xs):
    tape = _tape_of(xs)
    if tape is None:
        return T.concat_channels(xs)
    nodes = [tape.lift(x) for x in xs]
    value = T.concat_channels([node.value for node in nodes])
    bounds = np.cumsum([0] + [node.c for node in nodes])

    def rule(g, saved):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(bounds) - 1)]
    return tape.record('concat_channels', nodes, value, rule)


def ew(x, y, op):
    tape = _tape_of(x, y)
    if tape is None:
        return T.ew(x, y, op)
    x, y = tape.lift(x), tape.lift(y)
    value = T.ew(x.value, y.value, op)
    xs, ys = x.shape, y.shape
    if op == 'add':
        def rule(g, saved):
            return [_unbroadcast(g, xs), _unbroadcast(g, ys)]
        return tape.record('ew_add', [x, y], value, rule)

    def rule(g, saved):
        xv, yv = saved
        return [_unbroadcast(g * yv, xs), _unbroadcast(g * xv, ys)]
    return tape.record('ew_mul', [x, y], value, rule, saved=(x.value.data, y.value.data))


def add(x, y):
    return ew(x, y, 'add')


def mul(x, y):
    return ew(x, y, 'mul')


def sub(x, y):
    return ew(x, scale(y, -1.0), 'add')


def slice_channels(x, start, stop):
    if not isinstance(x, TapeNode):
        return T.slice_channels(x, start, stop)
    value = T.slice_channels(x.value, start, stop)

    def rule(g, saved):
        shape, = saved
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return [gx]
    return x.tape.record('slice_channels', [x], value, rule, saved=(x.shape,))


def reduce_sum(x):
    if not isinstance(x, TapeNode):
        return T.reduce_sum(x)
    value = T.reduce_sum(x.value)

    def rule(g, saved):
        shape, = saved
        return [np.full(shape, g.reshape(-1)[0])]
    return x.tape.record('reduce_sum', [x], value, rule, saved=(x.shape,))


def scale(x, factor):
    if not isinstance(x, TapeNode):
        return T.scale(x, factor)
    value = T.scale(x.value, factor)

    def rule(g, saved):
        return [g * factor]
    return x.tape.record('scale', [x], value, rule)


def shift(x, offset):
    if not isinstance(x, TapeNode):
        return T.shift(x, offset)
    value = T.shift(x.value, offset)

    def rule(g, saved):
        return [g]
    return x.tape.record('shift', [x], value, rule)


def log_clamped(x, floor):
    if not isinstance(x, TapeNode):
        return T.log_clamped(x, floor)
    value = T.log_clamped(x.value, floor)

    def rule(g, saved):
        xv, = saved
        live = xv > floor
        return [np.where(live, g / np.where(live, xv, 1.0), 0.0)]
    return x.tape.record('log_clamped', [x], value, rule, saved=(x.value.data,))


def l2_norm(x):
    if not isinstance(x, TapeNode):
        return T.l2_norm(x)
    value = T.l2_norm(x.value)

    def rule(g, saved):
        xv, norm = saved
        if norm == 0:
            return [np.zeros(xv.shape)]
        return [g.reshape(-1)[0] * xv / norm]
    return x.tape.record('l2_norm', [x], value, rule, saved=(x.value.data, value.item()))


def param(store, name, like=None):
    """
    Fetch a parameter as a tape leaf when ``like`` is a node, as a plain
    tensor otherwise.
    """
    if isinstance(like, TapeNode):
        return like.tape.param(store, name)
    return store[name]


def constant(value, like=None):
    if isinstance(like, TapeNode):
        return like.tape.constant(value)
    return value if isinstance(value, Tensor4) else Tensor4(value)


class ParamView(object):
    """
    A named window onto the tensors under one prefix of a ParamStore.
    """
    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def name(self, key):
        return '%s.%s' % (self.prefix, key)

    def names(self):
        return self.store.names(self.prefix)

    def get(self, key, like=None):
        return param(self.store, self.name(key), like)

    def with_store(self, store):
        """
        The same view over another store with the same names, e.g. one with
        a perturbed entry.
        """
        other = copy.copy(self)
        other.store = store
        return other
