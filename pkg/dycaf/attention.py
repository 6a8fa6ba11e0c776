"""
Dynamic dual attention: an initial depthwise block, dynamic GAP feeding a
channel bottleneck, a pooled spatial mask, and a residual fusion of the two.

Parameters live in a ``ParamStore`` under ``attn.<block-id>.<tensor>``.
"""
from dycaf import autodiff as ad
from dycaf.conf.settings import GAP_HIDDEN, SQUEEZE_RATIO
from dycaf.exceptions import ShapeError
from dycaf.tensor import Tensor4

GAP_MODES = ('dynamic', 'static')


class DualAttentionParams(ad.ParamView):
    """
    A named view over the tensors of one attention block.

    * ``gap_mode`` - ``dynamic`` weights every pixel with a per-pixel MLP
      before pooling; ``static`` is the squeeze-excitation baseline (plain
      GAP and a ReLU bottleneck) and registers no MLP.
    * ``alg1_spatial`` - compute the spatial mask with a 7x7 convolution
      straight over the block features instead of over the two channel-pooled
      maps.
    """
    def __init__(self, store, prefix, channels, alg1_spatial=False, gap_mode='dynamic'):
        if gap_mode not in GAP_MODES:
            raise ValueError("gap_mode must be one of %r" % (GAP_MODES,))
        super(DualAttentionParams, self).__init__(store, prefix)
        self.channels = channels
        self.reduced = channels // SQUEEZE_RATIO
        self.alg1_spatial = alg1_spatial
        self.gap_mode = gap_mode

    @classmethod
    def create(cls, store, block_id, channels, alg1_spatial=False, gap_mode='dynamic'):
        if channels % SQUEEZE_RATIO:
            raise ShapeError("attention channels (%d) must be divisible by the squeeze ratio %d"
                             % (channels, SQUEEZE_RATIO))
        params = cls(store, 'attn.%s' % block_id, channels, alg1_spatial, gap_mode)
        c, r = channels, params.reduced
        store.register(params.name('init.depthwise'), (c, 1, 3, 3), fan_in=9)
        store.register(params.name('init.pointwise'), (c, c), fan_in=c)
        store.register(params.name('init.bias'), (c,), fan_in=c)
        if gap_mode == 'dynamic':
            store.register(params.name('gap.hidden.weight'), (GAP_HIDDEN, c), fan_in=c)
            store.register(params.name('gap.hidden.bias'), (GAP_HIDDEN,), fan_in=c)
            store.register(params.name('gap.out.weight'), (1, GAP_HIDDEN), fan_in=GAP_HIDDEN)
            store.register(params.name('gap.out.bias'), (1,), fan_in=GAP_HIDDEN)
        store.register(params.name('w1'), (r, c), fan_in=c)
        store.register(params.name('b1'), (r,), fan_in=c)
        store.register(params.name('w2'), (c, r), fan_in=r)
        store.register(params.name('b2'), (c,), fan_in=r)
        spatial_in = c if alg1_spatial else 2
        store.register(params.name('spatial.kernel'), (spatial_in, 1, 7, 7), fan_in=49 * spatial_in)
        store.register(params.name('spatial.bias'), (1,), fan_in=49 * spatial_in)
        return params


def init_block(x, params):
    """
    The initial feature extraction: depthwise 3x3, pointwise 1x1, SiLU.
    """
    dw = ad.depthwise_conv(x, params.get('init.depthwise', x))
    return ad.silu(ad.conv1x1(dw, params.get('init.pointwise', x), params.get('init.bias', x)))


def spatial_weights(x, params):
    """
    The per-pixel scalar m[n,i,j] = sigmoid(MLP(x[n,:,i,j])), shared across
    channels, shape (n, 1, h, w).
    """
    hidden = ad.silu(ad.conv1x1(x, params.get('gap.hidden.weight', x), params.get('gap.hidden.bias', x)))
    return ad.sigmoid(ad.conv1x1(hidden, params.get('gap.out.weight', x), params.get('gap.out.bias', x)))


def dynamic_gap(x, params):
    if params.gap_mode == 'static':
        return ad.global_avg_pool(x)
    return ad.global_avg_pool(ad.mul(x, spatial_weights(x, params)))


def channel_weights(g, params):
    squeezed = ad.silu(ad.conv1x1(g, params.get('w1', g), params.get('b1', g)))
    return ad.sigmoid(ad.conv1x1(squeezed, params.get('w2', g), params.get('b2', g)))


def se_channel_weights(g, params):
    """
    Squeeze-excitation baseline of the channel pathway, with ReLU in the
    bottleneck.
    """
    squeezed = ad.relu(ad.conv1x1(g, params.get('w1', g), params.get('b1', g)))
    return ad.sigmoid(ad.conv1x1(squeezed, params.get('w2', g), params.get('b2', g)))


def spatial_mask(x, params):
    if params.alg1_spatial:
        features = x
    else:
        features = ad.concat_channels([ad.channel_pool(x, 'avg'), ad.channel_pool(x, 'max')])
    filtered = ad.depthwise_conv(features, params.get('spatial.kernel', x))
    # the 7x7 filters are per input channel; summing them gives one mask
    summed = ad.conv1x1(filtered, ad.constant(Tensor4.ones((1, features.c, 1, 1)), like=x),
                        params.get('spatial.bias', x))
    return ad.sigmoid(summed)


def dual_attention_forward(x, params):
    x_init = init_block(x, params)
    pooled = dynamic_gap(x_init, params)
    if params.gap_mode == 'static':
        w_c = se_channel_weights(pooled, params)
    else:
        w_c = channel_weights(pooled, params)
    m_s = spatial_mask(x_init, params)
    return ad.add(x, ad.mul(ad.mul(x_init, w_c), m_s))
