"""@ingroup pyeegmae
@file
Multi-head attention over token grids: intra-channel, inter-channel, standard, two-axis and bottleneck attention,
plus the analytic score cost of each.

Token grids are B x C x N_p x d_e tensors. A layout folds the axes that attention does not mix into the batch axis.
Pad channels are excluded as keys by setting their scores to -inf before the softmax.
"""
import logging
import math
from abc import ABCMeta, abstractmethod
from enum import Enum

import numpy as np

from .entity import ContractError, InvalidConfig, PyEegMaeError
from .tensor import expand, linear, matmul, parameter, reshape, softmax, transpose, truncated_normal, where

log = logging.getLogger(__name__)

class UnknownMechanism(PyEegMaeError):
    """Raised if an attention kind outside AttentionKind is requested.
    """
    pass

class AttentionMechanism(Enum):
    """Models the attention strategy of a whole encoder.
    """
    Alternating = 'alternating'
    Standard = 'standard'
    TwoAxis = 'two_axis'
    Bottleneck = 'bottleneck'

class AttentionKind(Enum):
    """Models the attention computed by a single layer, for cost accounting.

    Alternating stands for the costlier of its two layer parities.
    """
    Intra = 'intra'
    Inter = 'inter'
    Standard = 'standard'
    TwoAxis = 'two_axis'
    Bottleneck = 'bottleneck'
    Alternating = 'alternating'

    @classmethod
    def parse(cls, value):
        """Converts a string, AttentionMechanism or AttentionKind into an AttentionKind.

        @throws UnknownMechanism if @p value names no known kind.
        """
        if isinstance(value, Enum):
            value = value.value
        try:
            return cls(value)
        except ValueError:
            raise UnknownMechanism('unknown attention mechanism "{}"'.format(value))

class Axis(Enum):
    """Models which token axis an attention layer mixes.
    """
    OverPatches = 'over_patches'
    OverChannels = 'over_channels'
    Flat = 'flat'

class AttentionLayout(object):
    """Describes how a B x C x N_p x d_e grid is folded into (B*, S, d_e) sequences and back.

    over_patches folds (B, C); over_channels folds (B, N_p); flat folds B only.
    """
    def __init__(self, axis):
        self.axis = axis

    def fold(self, grid):
        """@param grid A B x C x N_p x d Tensor.
        @returns A (B*, S, d) Tensor.
        """
        batch, channels, patches, width = grid.shape
        if self.axis is Axis.OverPatches:
            return reshape(grid, (batch * channels, patches, width))
        if self.axis is Axis.OverChannels:
            return reshape(transpose(grid, (0, 2, 1, 3)), (batch * patches, channels, width))
        return reshape(grid, (batch, channels * patches, width))

    def unfold(self, sequences, shape):
        """Inverse of fold for a grid of @p shape (B, C, N_p, d).
        """
        batch, channels, patches, width = shape
        if self.axis is Axis.OverPatches:
            return reshape(sequences, (batch, channels, patches, width))
        if self.axis is Axis.OverChannels:
            return transpose(reshape(sequences, (batch, patches, channels, width)), (0, 2, 1, 3))
        return reshape(sequences, (batch, channels, patches, width))

    def key_mask(self, pad_mask, n_patches):
        """Expands a B x C channel mask into the (B*, S) key mask of the folded sequences.

        @returns A boolean numpy array; True marks attendable keys.
        """
        batch, channels = pad_mask.shape
        if self.axis is Axis.OverPatches:
            return np.repeat(pad_mask.reshape(batch * channels, 1), n_patches, axis=1)
        if self.axis is Axis.OverChannels:
            return np.repeat(pad_mask[:, None, :], n_patches, axis=1).reshape(batch * n_patches, channels)
        return np.repeat(pad_mask, n_patches, axis=1)

OVER_PATCHES = AttentionLayout(Axis.OverPatches)
OVER_CHANNELS = AttentionLayout(Axis.OverChannels)
FLAT = AttentionLayout(Axis.Flat)

class MhaParams(object):
    """The projections of one multi-head attention: W_q, W_k, W_v, W_o (each d_e x d_e, stored [out, in]).
    """
    def __init__(self, w_q, w_k, w_v, w_o, n_heads):
        """@throws InvalidConfig if the embedding width is not divisible by @p n_heads.
        """
        width = w_q.shape[0]
        if n_heads < 1 or width % n_heads:
            raise InvalidConfig('embedding width {} is not divisible by {} heads'.format(width, n_heads),
                                key='n_heads')
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o
        self.n_heads = n_heads

    @classmethod
    def initialize(cls, embed_dim, n_heads, rng, dtype=np.float32, w_o=None):
        """Draws fresh projections; @p w_o, when given, is shared instead of drawn.
        """
        def draw():
            return parameter(truncated_normal(rng, (embed_dim, embed_dim), dtype=dtype))
        w_q, w_k, w_v = draw(), draw(), draw()
        return cls(w_q, w_k, w_v, w_o if w_o is not None else draw(), n_heads)

    @property
    def embed_dim(self):
        return self.w_q.shape[0]

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads

    def named_parameters(self, prefix, include_output=True):
        named = [(prefix + '.w_q', self.w_q), (prefix + '.w_k', self.w_k), (prefix + '.w_v', self.w_v)]
        if include_output:
            named.append((prefix + '.w_o', self.w_o))
        return named

class AttentionProbe(object):
    """Counts attention score entries as they are materialized, layer by layer.

    Counts include the batch axis; score_flops is score entries times the embedding width (all heads).
    """
    def __init__(self):
        self.layers = []

    def open_layer(self, kind):
        self.layers.append([kind, 0, 0])

    def record(self, elements, flops):
        if not self.layers:
            self.open_layer(None)
        self.layers[-1][1] += elements
        self.layers[-1][2] += flops

    @property
    def score_elements(self):
        return sum(layer[1] for layer in self.layers)

    @property
    def score_flops(self):
        return sum(layer[2] for layer in self.layers)

    @property
    def peak_layer_elements(self):
        return max([layer[1] for layer in self.layers] or [0])

    @property
    def peak_layer_flops(self):
        return max([layer[2] for layer in self.layers] or [0])

def _split_heads(x, n_heads):
    folded, length, width = x.shape
    return transpose(reshape(x, (folded, length, n_heads, width // n_heads)), (0, 2, 1, 3))

def _merge_heads(x):
    folded, n_heads, length, head_dim = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (folded, length, n_heads * head_dim))

def attend(q, k, v, key_mask, n_heads, probe=None):
    """Scaled dot-product attention over already projected (B*, S, d) queries, keys and values.

    Scores are scaled by 1/sqrt(head_dim). Masked keys receive exactly zero weight; rows with no attendable key output
    zeros.

    @param key_mask A (B*, S_k) boolean numpy array, True for attendable keys, or None.
    @returns A (B*, S_q, d) Tensor.
    """
    folded, queries, width = q.shape
    keys = k.shape[1]
    heads_q, heads_k, heads_v = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scores = matmul(heads_q, transpose(heads_k, (0, 1, 3, 2))) * (1.0 / math.sqrt(width // n_heads))
    if key_mask is not None and not key_mask.all():
        scores = where(key_mask[:, None, None, :], scores, -np.inf)
    if probe is not None:
        elements = folded * queries * keys
        probe.record(elements, elements * width)
    return _merge_heads(matmul(softmax(scores, axis=-1), heads_v))

def mha(x, params, key_mask=None, probe=None):
    """Multi-head self-attention over (B*, S, d_e) sequences.

    @param x A (B*, S, d_e) Tensor.
    @param params MhaParams.
    @param key_mask A (B*, S) boolean numpy array, True for attendable keys, or None for all keys.
    @returns A (B*, S, d_e) Tensor.
    """
    q, k, v = linear(x, params.w_q), linear(x, params.w_k), linear(x, params.w_v)
    return linear(attend(q, k, v, key_mask, params.n_heads, probe), params.w_o)

def _real_channels(grid, pad_mask):
    if pad_mask is None:
        return np.ones(grid.shape[:2], dtype=bool)
    return np.asarray(pad_mask, dtype=bool)

def _require_real_channel(pad_mask):
    if not pad_mask.any(axis=1).all():
        raise ContractError('every example needs at least one real channel')

def _along(layout, grid, params, pad_mask, probe):
    folded = layout.fold(grid)
    out = mha(folded, params, layout.key_mask(pad_mask, grid.shape[2]), probe)
    return layout.unfold(out, grid.shape)

def intra_channel_attention(grid, params, pad_mask=None, probe=None):
    """Attention over the N_p patches of every (example, channel); pad channels output zeros.
    """
    return _along(OVER_PATCHES, grid, params, _real_channels(grid, pad_mask), probe)

def inter_channel_attention(grid, params, pad_mask=None, probe=None):
    """Attention across the C channels at every (example, patch index); pad channels are excluded as keys.

    @throws ContractError if an example has no real channel.
    """
    pad_mask = _real_channels(grid, pad_mask)
    _require_real_channel(pad_mask)
    return _along(OVER_CHANNELS, grid, params, pad_mask, probe)

def standard_attention(grid, params, pad_mask=None, probe=None):
    """Attention over the flattened C * N_p token sequence of every example.
    """
    return _along(FLAT, grid, params, _real_channels(grid, pad_mask), probe)

def two_axis_attention(grid, params_c, params_p, pad_mask=None, probe=None):
    """Mean of inter-channel attention (params_c) and intra-channel attention (params_p).

    Layers built by make_layer pass the same w_o in both parameter sets.
    """
    pad_mask = _real_channels(grid, pad_mask)
    across = inter_channel_attention(grid, params_c, pad_mask, probe)
    within = intra_channel_attention(grid, params_p, pad_mask, probe)
    return (across + within) * 0.5

def bottleneck_attention(grid, params, pad_mask=None, probe=None):
    """Channel attention on patch-pooled projections, chained into patch attention on channel-pooled queries and keys.

    Step 1 mean-pools Q, K, V over N_p and attends across channels giving A1 (one vector per channel). Step 2
    mean-pools Q, K over the real channels and attends over patches with A1, broadcast over N_p, as values. The
    pooled projections are broadcast back onto the token grid before scoring, so each layer resolves C^2 N_p + C N_p^2
    score entries. Pad channels take no part in either pool.

    @throws ContractError if an example has no real channel.
    """
    pad_mask = _real_channels(grid, pad_mask)
    _require_real_channel(pad_mask)
    shape = grid.shape
    n_patches = shape[2]
    q, k, v = linear(grid, params.w_q), linear(grid, params.w_k), linear(grid, params.w_v)

    pooled = [expand(t.mean(axis=2, keepdims=True), shape) for t in (q, k, v)]
    channel_mask = OVER_CHANNELS.key_mask(pad_mask, n_patches)
    across = attend(*[OVER_CHANNELS.fold(t) for t in pooled], key_mask=channel_mask, n_heads=params.n_heads,
                    probe=probe)
    across = OVER_CHANNELS.unfold(across, shape)

    weights = (pad_mask / pad_mask.sum(axis=1, keepdims=True)).astype(grid.dtype)[:, :, None, None]
    q_c, k_c = [expand((t * weights).sum(axis=1, keepdims=True), shape) for t in (q, k)]
    within = attend(OVER_PATCHES.fold(q_c), OVER_PATCHES.fold(k_c), OVER_PATCHES.fold(across),
                    key_mask=OVER_PATCHES.key_mask(pad_mask, n_patches), n_heads=params.n_heads, probe=probe)
    return linear(OVER_PATCHES.unfold(within, shape), params.w_o)

class AttentionLayer(metaclass=ABCMeta):
    """One encoder layer's attention: a mechanism bound to its parameters.

    Layers share a uniform call contract, (grid, pad_mask, probe) -> grid, so the encoder never branches on mechanism.
    """
    def __init__(self, params):
        self.params = params

    @property
    @abstractmethod
    def kind(self):
        """Returns the AttentionKind computed by the layer.
        """
        pass

    @abstractmethod
    def forward(self, grid, pad_mask, probe):
        """Applies the attention.

        @returns A Tensor shaped like @p grid.
        """
        pass

    def __call__(self, grid, pad_mask=None, probe=None):
        if probe is not None:
            probe.open_layer(self.kind)
        return self.forward(grid, pad_mask, probe)

    def named_parameters(self, prefix):
        return self.params.named_parameters(prefix)

class IntraChannelLayer(AttentionLayer):
    """Even layers of alternating attention.
    """
    @property
    def kind(self):
        return AttentionKind.Intra

    def forward(self, grid, pad_mask, probe):
        return intra_channel_attention(grid, self.params, pad_mask, probe)

class InterChannelLayer(AttentionLayer):
    """Odd layers of alternating attention.
    """
    @property
    def kind(self):
        return AttentionKind.Inter

    def forward(self, grid, pad_mask, probe):
        return inter_channel_attention(grid, self.params, pad_mask, probe)

class StandardLayer(AttentionLayer):
    @property
    def kind(self):
        return AttentionKind.Standard

    def forward(self, grid, pad_mask, probe):
        return standard_attention(grid, self.params, pad_mask, probe)

class TwoAxisLayer(AttentionLayer):
    """Two-axis attention. One output projection serves both branches: params_p.w_o is params.w_o, so only the
    channel branch lists it among the named parameters.
    """
    def __init__(self, params, params_p):
        super(TwoAxisLayer, self).__init__(params)
        self.params_p = params_p

    @property
    def kind(self):
        return AttentionKind.TwoAxis

    def forward(self, grid, pad_mask, probe):
        return two_axis_attention(grid, self.params, self.params_p, pad_mask, probe)

    def named_parameters(self, prefix):
        shared = self.params_p.w_o is self.params.w_o
        return (self.params.named_parameters(prefix + '.channels')
                + self.params_p.named_parameters(prefix + '.patches', include_output=not shared))

class BottleneckLayer(AttentionLayer):
    @property
    def kind(self):
        return AttentionKind.Bottleneck

    def forward(self, grid, pad_mask, probe):
        return bottleneck_attention(grid, self.params, pad_mask, probe)

def make_layer(kind, embed_dim, n_heads, rng, dtype=np.float32):
    """Builds an attention layer of a single kind (Alternating is not a single kind; see layer_kind).

    @returns An AttentionLayer.
    @throws UnknownMechanism if @p kind is Alternating or unknown.
    """
    kind = AttentionKind.parse(kind)
    params = MhaParams.initialize(embed_dim, n_heads, rng, dtype)
    if kind is AttentionKind.Intra:
        return IntraChannelLayer(params)
    if kind is AttentionKind.Inter:
        return InterChannelLayer(params)
    if kind is AttentionKind.Standard:
        return StandardLayer(params)
    if kind is AttentionKind.Bottleneck:
        return BottleneckLayer(params)
    if kind is AttentionKind.TwoAxis:
        # the patch branch reuses the channel branch w_o
        return TwoAxisLayer(params, MhaParams.initialize(embed_dim, n_heads, rng, dtype, w_o=params.w_o))
    raise UnknownMechanism('"{}" is not a single-layer attention kind'.format(kind.value))

def layer_kind(mechanism, layer_number):
    """Returns the AttentionKind of the 1-indexed @p layer_number under @p mechanism.

    Alternating attention uses inter-channel attention in odd layers and intra-channel attention in even layers.
    """
    kind = AttentionKind.parse(mechanism)
    if kind is AttentionKind.Alternating:
        return AttentionKind.Inter if layer_number % 2 == 1 else AttentionKind.Intra
    return kind

def score_elements(kind, n_channels, n_patches):
    """Returns the attention score entries one layer of @p kind materializes for one example.

    intra: C N_p^2; inter: C^2 N_p; standard: (C N_p)^2; two_axis and bottleneck: C N_p (C + N_p);
    alternating: the larger of intra and inter.
    """
    kind = AttentionKind.parse(kind)
    c, p = n_channels, n_patches
    counts = {
        AttentionKind.Intra: c * p * p,
        AttentionKind.Inter: c * c * p,
        AttentionKind.Standard: (c * p) ** 2,
        AttentionKind.TwoAxis: c * p * (c + p),
        AttentionKind.Bottleneck: c * p * (c + p),
    }
    if kind is AttentionKind.Alternating:
        return max(counts[AttentionKind.Intra], counts[AttentionKind.Inter])
    return counts[kind]

class CostReport(object):
    """Analytic and measured attention cost of one (mechanism, config, C, N_p, d_e) point.
    """
    #pylint: disable=too-many-arguments
    def __init__(self, mechanism, n_channels, n_patches, embed_dim, score_elements_, score_flops, config=None,
                 median_ns=None, peak_bytes=None, status='ok'):
        self.mechanism = mechanism
        self.config = config
        self.n_channels = n_channels
        self.n_patches = n_patches
        self.embed_dim = embed_dim
        self.score_elements = score_elements_
        self.score_flops = score_flops
        self.median_ns = median_ns
        self.peak_bytes = peak_bytes
        self.status = status
        self.measured_elements = None

    def as_row(self):
        """@returns A dictionary keyed by the benchmark CSV columns.
        """
        return {'mechanism': self.mechanism.value, 'config': self.config or '', 'C': self.n_channels,
                'Np': self.n_patches, 'de': self.embed_dim, 'score_elements': self.score_elements,
                'score_flops': self.score_flops, 'median_ns': self.median_ns, 'peak_bytes': self.peak_bytes,
                'status': self.status}

    def __repr__(self):
        return 'CostReport({}, C={}, Np={}, elements={})'.format(self.mechanism.value, self.n_channels,
                                                                 self.n_patches, self.score_elements)

def attention_cost(mechanism, n_channels, n_patches, embed_dim):
    """Analytic cost of one attention layer of @p mechanism for one example.

    @returns A CostReport with the analytic fields set.
    @throws UnknownMechanism for an unknown mechanism.
    @throws ContractError if a size is not positive.
    """
    kind = AttentionKind.parse(mechanism)
    if min(n_channels, n_patches, embed_dim) < 1:
        raise ContractError('sizes must be positive, got C={} Np={} de={}'.format(n_channels, n_patches, embed_dim))
    elements = score_elements(kind, n_channels, n_patches)
    return CostReport(kind, n_channels, n_patches, embed_dim, elements, elements * embed_dim)

def encoder_cost(config, n_channels, n_patches):
    """Sums per-layer analytic costs over every layer of an encoder config.

    @returns A (score_elements, score_flops) tuple for one example.
    """
    total = 0
    for layer_number in range(1, config.n_layers + 1):
        total += score_elements(layer_kind(config.mechanism, layer_number), n_channels, n_patches)
    return total, total * config.embed_dim
