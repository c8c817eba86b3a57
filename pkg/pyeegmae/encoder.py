"""@ingroup pyeegmae
@file
The transformer encoder: configuration presets, parameter initialization, the pre-norm forward pass, the
reconstruction head and closed-form parameter accounting.
"""
import logging
from collections import OrderedDict

import numpy as np
from voluptuous import Coerce, Optional, Schema

from .attention import AttentionMechanism, AttentionKind, layer_kind, make_layer
from .entity import ConfigEntity, Count, Fraction, Index, InvalidConfig, RangeError
from .tensor import Precision, gelu, layer_norm, linear, parameter, seeded_generator, truncated_normal
from .tokenizer import DEFAULT_PATCH_LEN, MAX_CHANNELS, EmbeddingParams

log = logging.getLogger(__name__)

## Layer norm epsilon of every normalization in the encoder.
LAYER_NORM_EPS = 1e-5

## Named model sizes: layers, embedding width and MLP width; all use 12 heads.
PRESETS = {
    'small': {'n_layers': 8, 'embed_dim': 192, 'mlp_dim': 768, 'n_heads': 12},
    'base': {'n_layers': 10, 'embed_dim': 576, 'mlp_dim': 2304, 'n_heads': 12},
    'large': {'n_layers': 12, 'embed_dim': 768, 'mlp_dim': 3072, 'n_heads': 12},
}

class EncoderConfig(ConfigEntity):
    """The architecture of an encoder.

    A stride of 0 means non-overlapping patches (stride equal to the patch length).
    """
    @property
    def schema(self):
        return Schema({
            Optional('n_layers', default=8): Count,
            Optional('n_heads', default=12): Count,
            Optional('embed_dim', default=192): Count,
            Optional('mlp_dim', default=768): Count,
            Optional('patch_len', default=DEFAULT_PATCH_LEN): Count,
            Optional('stride', default=0): Index,
            Optional('mechanism', default='alternating'): Coerce(AttentionMechanism),
            Optional('max_channels', default=MAX_CHANNELS): Count,
            Optional('max_patches', default=64): Count,
            Optional('drop_path_rate', default=0.0): Fraction,
            Optional('precision', default='f32'): Coerce(Precision),
        })

    def validate(self):
        if self.mechanism is AttentionMechanism.Alternating and self.n_layers % 2:
            raise self.invalid('alternating attention needs an even number of layers, got {}'.format(self.n_layers),
                               'n_layers')
        if self.embed_dim % self.n_heads:
            raise self.invalid('embed_dim {} is not divisible by {} heads'.format(self.embed_dim, self.n_heads),
                               'n_heads')

    @classmethod
    def preset(cls, name, **overrides):
        """Builds one of the named sizes (small, base, large), optionally overriding fields.

        @throws InvalidConfig if @p name is not a known preset.
        """
        try:
            values = dict(PRESETS[name.lower()])
        except KeyError:
            raise InvalidConfig('unknown preset "{}", expected one of {}'.format(name, ', '.join(sorted(PRESETS))),
                                key='preset')
        values.update(overrides)
        return cls(values)

    @property
    def patch_stride(self):
        return self.stride or self.patch_len

    @property
    def dtype(self):
        return self.precision.dtype

class LayerNormParams(object):
    def __init__(self, gain, bias):
        self.gain = gain
        self.bias = bias

    @classmethod
    def initialize(cls, width, dtype):
        return cls(parameter(np.ones(width, dtype=dtype)), parameter(np.zeros(width, dtype=dtype)))

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)

    def named_parameters(self, prefix):
        return [(prefix + '.gain', self.gain), (prefix + '.bias', self.bias)]

class MlpParams(object):
    """Two linear maps d_e -> mlp_dim -> d_e with a GELU between them.
    """
    def __init__(self, w_in, b_in, w_out, b_out):
        self.w_in = w_in
        self.b_in = b_in
        self.w_out = w_out
        self.b_out = b_out

    @classmethod
    def initialize(cls, width, hidden, rng, dtype):
        return cls(parameter(truncated_normal(rng, (hidden, width), dtype=dtype)),
                   parameter(np.zeros(hidden, dtype=dtype)),
                   parameter(truncated_normal(rng, (width, hidden), dtype=dtype)),
                   parameter(np.zeros(width, dtype=dtype)))

    def __call__(self, x):
        return linear(gelu(linear(x, self.w_in, self.b_in)), self.w_out, self.b_out)

    def named_parameters(self, prefix):
        return [(prefix + '.w_in', self.w_in), (prefix + '.b_in', self.b_in), (prefix + '.w_out', self.w_out),
                (prefix + '.b_out', self.b_out)]

def drop_path(residual, rate, training, rng):
    """Stochastic depth: drops a block's residual branch for whole examples, rescaling the survivors.

    @param residual A B x ... Tensor.
    @param rate The drop probability.
    @param training Drop-path is the identity unless training.
    @param rng A numpy.random.Generator, required when training with a positive rate.
    @returns A Tensor.
    """
    if not training or rate <= 0.0:
        return residual
    keep = 1.0 - rate
    kept = (rng.random(residual.shape[0]) < keep).astype(residual.dtype) / keep
    return residual * kept.reshape((-1,) + (1,) * (residual.ndim - 1))

class EncoderBlock(object):
    """One pre-norm residual block: x + Attn(LN(x)) followed by x + MLP(LN(x)).
    """
    def __init__(self, attention, norm_attention, mlp, norm_mlp, drop_path_rate=0.0):
        self.attention = attention
        self.norm_attention = norm_attention
        self.mlp = mlp
        self.norm_mlp = norm_mlp
        self.drop_path_rate = drop_path_rate

    def __call__(self, x, pad_mask, training=False, rng=None, probe=None):
        x = x + drop_path(self.attention(self.norm_attention(x), pad_mask, probe), self.drop_path_rate, training,
                          rng)
        return x + drop_path(self.mlp(self.norm_mlp(x)), self.drop_path_rate, training, rng)

    def named_parameters(self, prefix):
        return (self.attention.named_parameters(prefix + '.attention')
                + self.norm_attention.named_parameters(prefix + '.norm_attention')
                + self.mlp.named_parameters(prefix + '.mlp')
                + self.norm_mlp.named_parameters(prefix + '.norm_mlp'))

class EncoderModel(object):
    """The embedding parameters, the encoder blocks, the final layer norm and the reconstruction head.
    """
    def __init__(self, config, embedding, blocks, final_norm, head_weight, head_bias):
        self.config = config
        self.embedding = embedding
        self.blocks = blocks
        self.final_norm = final_norm
        self.head_weight = head_weight
        self.head_bias = head_bias

    def named_parameters(self):
        """@returns The (name, Tensor) pairs of every parameter, in a stable order.
        """
        named = list(self.embedding.named_parameters())
        for number, block in enumerate(self.blocks):
            named.extend(block.named_parameters('blocks.{}'.format(number)))
        named.extend(self.final_norm.named_parameters('final_norm'))
        named.extend([('reconstruction.weight', self.head_weight), ('reconstruction.bias', self.head_bias)])
        return named

    def parameters(self):
        return [tensor for _, tensor in self.named_parameters()]

    def param_count(self):
        return sum(tensor.size for tensor in self.parameters())

    def state(self):
        """@returns An OrderedDict mapping parameter names to copies of their values.
        """
        return OrderedDict((name, tensor.data.copy()) for name, tensor in self.named_parameters())

    def load_state(self, state):
        """Overwrites parameter values in place.

        @param state A mapping of parameter names to arrays, e.g. from state() or a checkpoint.
        @throws RangeError if a name is missing or a shape differs.
        """
        for name, tensor in self.named_parameters():
            if name not in state:
                raise RangeError('state has no value for parameter "{}"'.format(name))
            value = np.asarray(state[name], dtype=tensor.dtype)
            if value.shape != tensor.shape:
                raise RangeError('parameter "{}" is {} but the state holds {}'.format(name, tensor.shape,
                                                                                     value.shape))
            tensor.data[...] = value

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

def build(config, seed):
    """Initializes an encoder deterministically.

    Each component draws from its own Philox sub-stream of @p seed: the embedding (0), block l (l), the head
    (n_layers + 1). Weight matrices and embeddings follow a truncated normal with standard deviation 0.02, biases are
    zero and layer norm gains one.

    @param config An EncoderConfig.
    @param seed An unsigned integer.
    @returns An EncoderModel.
    """
    dtype = config.dtype
    embedding = EmbeddingParams.initialize(config.embed_dim, config.patch_len, config.max_patches,
                                           config.max_channels, seeded_generator(seed, 0), dtype)
    blocks = []
    for number in range(1, config.n_layers + 1):
        rng = seeded_generator(seed, number)
        rate = config.drop_path_rate * (number - 1) / max(config.n_layers - 1, 1)
        attention = make_layer(layer_kind(config.mechanism, number), config.embed_dim, config.n_heads, rng, dtype)
        blocks.append(EncoderBlock(attention, LayerNormParams.initialize(config.embed_dim, dtype),
                                   MlpParams.initialize(config.embed_dim, config.mlp_dim, rng, dtype),
                                   LayerNormParams.initialize(config.embed_dim, dtype), rate))
    head_rng = seeded_generator(seed, config.n_layers + 1)
    model = EncoderModel(config, embedding, blocks, LayerNormParams.initialize(config.embed_dim, dtype),
                         parameter(truncated_normal(head_rng, (config.patch_len, config.embed_dim), dtype=dtype)),
                         parameter(np.zeros(config.patch_len, dtype=dtype)))
    log.debug('Built %s encoder with %d layers and %d parameters', config.mechanism.value, config.n_layers,
              model.param_count())
    return model

def forward(model, batch, training=False, rng=None, probe=None):
    """Runs the encoder over an embedded batch.

    @param model An EncoderModel.
    @param batch A TokenBatch embedded with model.embedding.
    @param training Enables drop-path.
    @param rng A numpy.random.Generator for drop-path.
    @param probe Optionally, an AttentionProbe counting score entries.
    @returns The B x C x N_p x d_e Tensor of final embeddings; pad positions are present and flagged by the batch's
    pad_mask.
    @throws RangeError if the batch exceeds the configured channel or patch maxima.
    """
    config = model.config
    if batch.n_channels > config.max_channels:
        raise RangeError('batch has {} channels, the encoder supports {}'.format(batch.n_channels,
                                                                                 config.max_channels))
    if batch.n_patches > config.max_patches:
        raise RangeError('batch has {} patches, the encoder supports {}'.format(batch.n_patches, config.max_patches))
    x = batch.tokens
    for block in model.blocks:
        x = block(x, batch.pad_mask, training, rng, probe)
    return model.final_norm(x)

def reconstruct(model, embeddings):
    """Applies the linear reconstruction head to every token.

    @returns A B x C x N_p x L Tensor of predicted patches.
    """
    return linear(embeddings, model.head_weight, model.head_bias)

def param_count(config):
    """Returns the exact number of scalar parameters of the pre-training model for @p config.

    Counts the embedding tables, [MASK] and [PAD], every block, the final layer norm and the reconstruction head.
    """
    width, hidden, patch_len = config.embed_dim, config.mlp_dim, config.patch_len
    embedding = width * patch_len + (config.max_patches + config.max_channels + 2) * width
    projections = 7 if AttentionKind.parse(config.mechanism) is AttentionKind.TwoAxis else 4
    block = projections * width * width + 2 * width * hidden + hidden + width + 4 * width
    return embedding + config.n_layers * block + 2 * width + patch_len * width + patch_len
