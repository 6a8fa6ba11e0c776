import math
from collections import OrderedDict

import numpy as np

from dycaf import autodiff as ad
from dycaf.conf.settings import KL_CLAMP
from dycaf.exceptions import ConfigError, NonFiniteError, NormalizationError

# allowed drift of a class-attention map's spatial sum away from 1
NORMALIZATION_TOLERANCE = 1e-6


class LossWeights(object):
    def __init__(self, lambda_det=1.0, lambda_eq=0.5, lambda_ca=0.2):
        self.lambda_det = float(lambda_det)
        self.lambda_eq = float(lambda_eq)
        self.lambda_ca = float(lambda_ca)
        for key, value in self.to_dict().items():
            if not value >= 0:
                raise ConfigError("loss.%s must be non-negative, got %r" % (key, value), key='loss.%s' % key)

    def to_dict(self):
        return OrderedDict([('lambda_det', self.lambda_det), ('lambda_eq', self.lambda_eq),
                            ('lambda_ca', self.lambda_ca)])


def equilibrium_loss(phi_closure, f_star):
    """
    ||Phi(F*) - F*|| over the flattened tensor, not averaged.
    """
    return ad.l2_norm(ad.sub(phi_closure(f_star), f_star))


def check_normalized(maps):
    value = ad.value_of(maps)
    sums = value.data.sum(axis=(2, 3))
    drift = float(np.abs(sums - 1.0).max())
    if drift > NORMALIZATION_TOLERANCE:
        raise NormalizationError("class attention maps must each sum to 1 over space, "
                                 "worst map is off by %.3e" % drift)


def kl_uniform_loss(maps):
    """
    Sum over batch and classes of KL(A_k || uniform), i.e.
    sum A * ln(A * h * w). The clamp applies inside the log only.
    """
    check_normalized(maps)
    value = ad.value_of(maps)
    log_sites = math.log(value.h * value.w)
    return ad.reduce_sum(ad.mul(maps, ad.shift(ad.log_clamped(maps, KL_CLAMP), log_sites)))


def surrogate_detection_loss(p3, target):
    """
    Mean squared error of the finest output level against a fixed target; a
    stand-in for a detection loss so end-to-end checks see all three terms.
    """
    diff = ad.sub(p3, target)
    return ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / ad.value_of(diff).size)


def _scalar_value(value):
    value = ad.value_of(value)
    return value.item() if hasattr(value, 'item') else float(value)


def total_loss(l_det, l_eq, l_ca, w=None):
    """
    lambda_det * l_det + lambda_eq * l_eq + lambda_ca * l_ca. Components may
    be floats, scalar tensors or tape nodes; the result has the same kind.
    """
    w = w or LossWeights()
    components = (('l_det', l_det, w.lambda_det), ('l_eq', l_eq, w.lambda_eq), ('l_ca', l_ca, w.lambda_ca))
    for name, value, _ in components:
        if not math.isfinite(_scalar_value(value)):
            raise NonFiniteError("loss component %s is not finite" % name, where=name)
    if all(isinstance(value, (int, float)) for _, value, _ in components):
        return w.lambda_det * l_det + w.lambda_eq * l_eq + w.lambda_ca * l_ca
    total = None
    for _, value, weight in components:
        if isinstance(value, (int, float)):
            value = ad.constant(np.full((1, 1, 1, 1), float(value)))
        term = ad.scale(value, weight)
        total = term if total is None else ad.add(total, term)
    return total
