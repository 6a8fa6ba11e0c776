"""
Class-aware feature adaptation.

Two heads share this module. The prototype head correlates projected
features with frozen class prototypes, turns each class's correlation into a
spatial attention map and aggregates per-class projections of the features.
The conv head predicts the maps straight from enhanced features and uses
their class sum as a spatial gate.
"""
import logging
import os

import numpy as np

from dycaf import autodiff as ad
from dycaf.conf.settings import PROTOTYPE_DIM
from dycaf.exceptions import ShapeError
from dycaf.tensor import Tensor4
from dycaf.tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

CLASS_ADAPT_MODES = ('prototype', 'conv')
KMEANS_MAX_ITER = 100


class Prototypes(object):
    """
    K class embeddings as the rows of a (K, d) matrix. Prototypes are frozen:
    they enter the graph as constants and are not part of any ParamStore.
    """
    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim == 4 and matrix.shape[2:] == (1, 1):
            matrix = matrix.reshape(matrix.shape[:2])
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ShapeError("prototypes must be a (K, d) matrix with K >= 1, got %r" % (matrix.shape,))
        if not np.isfinite(matrix).all():
            raise ShapeError("prototypes must be finite")
        if (np.abs(matrix).max(axis=1) == 0).any():
            raise ShapeError("every prototype row must be non-zero")
        matrix.setflags(write=False)
        self.matrix = matrix

    @property
    def num_classes(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def as_tensor(self):
        return Tensor4(self.matrix.reshape(self.num_classes, self.dim, 1, 1))

    def save(self, path):
        write_tensor(path, self.as_tensor())

    @classmethod
    def load(cls, path):
        return cls(read_tensor(path).data)

    def __repr__(self):
        return "Prototypes(K=%d, d=%d)" % (self.num_classes, self.dim)


def canonical_rows(matrix):
    """
    Rows sorted lexicographically, so centroid sets can be compared without
    caring about cluster order.
    """
    matrix = np.asarray(matrix)
    order = np.lexsort(matrix.T[::-1])
    return matrix[order]


def _kmeans_plus_plus(samples, k, rng):
    centers = [samples[rng.integers(len(samples))]]
    closest = ((samples - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total == 0:
            index = rng.integers(len(samples))
        else:
            index = rng.choice(len(samples), p=closest / total)
        centers.append(samples[index])
        closest = np.minimum(closest, ((samples - samples[index]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_distances(samples, centers):
    return ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans_init(samples, k, seed=0, dim=PROTOTYPE_DIM, max_iter=KMEANS_MAX_ITER):
    """
    Lloyd iterations from seeded k-means++ starts. Stops once assignments no
    longer change or after ``max_iter`` rounds. A cluster that loses all its
    members is re-seeded at the sample farthest from every centroid.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError("k-means samples must be a (N, d) matrix, got %r" % (samples.shape,))
    if dim is not None and samples.shape[1] != dim:
        raise ShapeError("k-means samples must be %d-dimensional, got %d" % (dim, samples.shape[1]))
    if k < 1:
        raise ShapeError("k-means needs at least one cluster")
    if len(samples) < k:
        raise ShapeError("k-means needs at least %d samples, got %d" % (k, len(samples)))

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(samples, k, rng)
    assignment = None
    for iteration in range(max_iter):
        distances = _sq_distances(samples, centers)
        new_assignment = distances.argmin(axis=1)
        if assignment is not None and (new_assignment == assignment).all():
            break
        assignment = new_assignment
        for j in range(k):
            members = samples[assignment == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                far = distances.min(axis=1).argmax()
                logger.debug("k-means cluster %d emptied at iteration %d, re-seeding at sample %d",
                             j, iteration, far)
                centers[j] = samples[far]
                assignment[far] = j
    return Prototypes(centers)


class ClassAdaptParams(ad.ParamView):
    """
    Shared across pyramid levels.

    * prototype mode: ``proj`` (c -> d conv1x1 with bias), ``proto_proj`` (a
      1 x d scaling of the prototype correlation, plus a scalar bias) and K
      per-class c x c projections under ``classes.<k>``.
    * conv mode: ``enhance`` (depthwise 3x3, pointwise 1x1, bias) and the
      K-way map predictor ``maps``.
    """
    def __init__(self, store, prefix, channels, num_classes, mode, dim):
        if mode not in CLASS_ADAPT_MODES:
            raise ValueError("class adaptation mode must be one of %r" % (CLASS_ADAPT_MODES,))
        super(ClassAdaptParams, self).__init__(store, prefix)
        self.channels = channels
        self.num_classes = num_classes
        self.mode = mode
        self.dim = dim

    @classmethod
    def create(cls, store, prefix, channels, num_classes, mode='prototype', dim=PROTOTYPE_DIM):
        params = cls(store, prefix, channels, num_classes, mode, dim)
        c, k = channels, num_classes
        if mode == 'prototype':
            store.register(params.name('proj.weight'), (dim, c), fan_in=c)
            store.register(params.name('proj.bias'), (dim,), fan_in=c)
            store.register(params.name('proto_proj.weight'), (1, dim), init='ones')
            store.register(params.name('proto_proj.bias'), (1,), init='zeros')
            for j in range(k):
                store.register(params.name('classes.%d.weight' % j), (c, c), fan_in=c)
        else:
            store.register(params.name('enhance.depthwise'), (c, 1, 3, 3), fan_in=9)
            store.register(params.name('enhance.pointwise'), (c, c), fan_in=c)
            store.register(params.name('enhance.bias'), (c,), fan_in=c)
            store.register(params.name('maps.weight'), (k, c), fan_in=c)
            store.register(params.name('maps.bias'), (k,), fan_in=c)
        return params


def project(f, params):
    return ad.conv1x1(f, params.get('proj.weight', f), params.get('proj.bias', f))


def class_attention(f_star, protos, params):
    """
    Per class k the logit at each site is a * <proj(f), p_k> + b (the
    per-site correlation through a 1x1 convolution), normalized by a softmax
    over spatial sites. Returns maps of shape (n, K, h, w).
    """
    if protos.dim != params.dim:
        raise ShapeError("prototypes are %d-dimensional, the projection produces %d"
                         % (protos.dim, params.dim))
    if protos.num_classes != params.num_classes:
        raise ShapeError("%d prototypes for %d classes" % (protos.num_classes, params.num_classes))
    projected = project(f_star, params)
    weights = ad.mul(params.get('proto_proj.weight', f_star), ad.constant(protos.as_tensor(), like=f_star))
    logits = ad.add(ad.conv1x1(projected, weights), params.get('proto_proj.bias', f_star))
    return ad.softmax_axis(logits, 'spatial')


def adapt_features(f, maps, params):
    if ad.value_of(maps).c != params.num_classes:
        raise ShapeError("%d attention maps for %d classes" % (ad.value_of(maps).c, params.num_classes))
    out = None
    for k in range(params.num_classes):
        term = ad.mul(ad.slice_channels(maps, k, k + 1), ad.conv1x1(f, params.get('classes.%d.weight' % k, f)))
        out = term if out is None else ad.add(out, term)
    return out


def enhance(x, params):
    dw = ad.depthwise_conv(x, params.get('enhance.depthwise', x))
    return ad.conv1x1(dw, params.get('enhance.pointwise', x), params.get('enhance.bias', x))


def class_adapt_simple(x, params):
    """
    The conv head: returns (adapted features, attention maps).
    """
    x_e = enhance(x, params)
    maps = ad.softmax_axis(ad.conv1x1(x_e, params.get('maps.weight', x), params.get('maps.bias', x)), 'spatial')
    total = ad.conv1x1(maps, ad.constant(Tensor4.ones((1, params.num_classes, 1, 1)), like=x))
    return ad.mul(x_e, total), maps


def projected_samples(features, params):
    """
    Per-site projected feature vectors of every level, as rows of an
    (N, d) matrix.
    """
    rows = []
    for level in features:
        arr = project(ad.value_of(level), params).data
        rows.append(arr.transpose(0, 2, 3, 1).reshape(-1, params.dim))
    return np.concatenate(rows, axis=0)


def prototypes_from_features(features, params, num_classes, seed=0):
    return kmeans_init(projected_samples(features, params), num_classes, seed, dim=params.dim)


def load_or_fit(path, fit):
    """
    Prototypes from the DT4 file at ``path`` when it exists; otherwise the
    result of ``fit()``, which is then written there.
    """
    if path and os.path.exists(path):
        logger.info("loading prototypes from %s", path)
        return Prototypes.load(path)
    protos = fit()
    if path:
        protos.save(path)
        logger.info("wrote %r to %s", protos, path)
    return protos
