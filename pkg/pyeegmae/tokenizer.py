"""@ingroup pyeegmae
@file
Turns multi-channel waveforms into per-channel patch tokens with positional, channel, pad and mask annotations.
"""
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .entity import ContractError, RangeError
from .tensor import (Tensor, concatenate, expand, linear, parameter, reshape, seeded_generator, take,
                     truncated_normal, where)

log = logging.getLogger(__name__)

## The largest channel count a recording may carry.
MAX_CHANNELS = 64

## Default patch length and stride, in samples.
DEFAULT_PATCH_LEN = 64

class InvalidRecording(ContractError):
    """Raised if a recording's samples or metadata violate the Recording invariants.
    """
    pass

class RecordingTooShort(ContractError):
    """Raised if a recording has fewer samples than one patch.
    """
    pass

class Recording(object):
    """A raw multi-channel waveform with its sampling metadata.

    Samples are stored time-major, T x C.
    """
    def __init__(self, samples, sampling_rate, channel_ids=None):
        """@param samples A T x C array-like of finite values.
        @param sampling_rate The sampling rate in Hz.
        @param channel_ids Optionally, a list of C channel identifiers; defaults to "ch0".."chC-1".
        @throws InvalidRecording if any invariant is violated.
        """
        samples = np.asarray(samples)
        if samples.ndim != 2:
            raise InvalidRecording('samples must be T x C, got shape {}'.format(samples.shape))
        n_samples, n_channels = samples.shape
        if n_samples < 1:
            raise InvalidRecording('recording has no samples')
        if not 1 <= n_channels <= MAX_CHANNELS:
            raise InvalidRecording('recording has {} channels, expected 1..{}'.format(n_channels, MAX_CHANNELS))
        if not np.all(np.isfinite(samples)):
            raise InvalidRecording('recording contains non-finite samples')
        if not sampling_rate > 0:
            raise InvalidRecording('sampling rate must be positive, got {}'.format(sampling_rate))
        if channel_ids is None:
            channel_ids = ['ch{}'.format(c) for c in range(n_channels)]
        channel_ids = [str(c) for c in channel_ids]
        if len(channel_ids) != n_channels:
            raise InvalidRecording('{} channel ids for {} channels'.format(len(channel_ids), n_channels))
        self.samples = samples
        self.sampling_rate = float(sampling_rate)
        self.channel_ids = channel_ids

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def n_channels(self):
        return self.samples.shape[1]

    def with_samples(self, samples):
        """@returns A Recording with the same metadata and new samples.
        """
        return Recording(samples, self.sampling_rate, self.channel_ids)

    def crop(self, n_samples):
        """@returns A Recording holding only the first @p n_samples samples.
        """
        return self.with_samples(self.samples[:n_samples])

    def zscore(self, eps=1e-8):
        """Normalizes every channel to zero mean and unit variance; this is the ingestion normalization of record.

        Channels whose standard deviation is below @p eps are only centered.

        @returns A new Recording.
        """
        samples = np.asarray(self.samples, dtype=np.float64)
        centered = samples - samples.mean(axis=0, keepdims=True)
        std = samples.std(axis=0, keepdims=True)
        normalized = centered / np.where(std < eps, 1.0, std)
        if self.samples.dtype.kind == 'f':
            normalized = normalized.astype(self.samples.dtype)
        return self.with_samples(normalized)

    def __repr__(self):
        return 'Recording(T={}, C={}, fs={})'.format(self.n_samples, self.n_channels, self.sampling_rate)

class PatchGrid(object):
    """The patches of one recording, N_p x C x L.
    """
    def __init__(self, patches, patch_len, stride):
        self.patches = patches
        self.patch_len = patch_len
        self.stride = stride

    @property
    def n_patches(self):
        return self.patches.shape[0]

    @property
    def n_channels(self):
        return self.patches.shape[1]

def count_patches(n_samples, patch_len, stride):
    """Returns floor((T - L) / S + 1), the number of patches per channel.
    """
    return (n_samples - patch_len) // stride + 1

def patch(recording, patch_len=DEFAULT_PATCH_LEN, stride=None):
    """Slices every channel into patches of @p patch_len samples taken every @p stride samples.

    Trailing samples beyond the last full patch are dropped.

    @param recording A Recording.
    @param patch_len L, the patch length in samples.
    @param stride S, defaults to L (non-overlapping patches).
    @returns A PatchGrid.
    @throws RecordingTooShort if L exceeds the recording length.
    @throws ContractError if L or S is not positive.
    """
    stride = patch_len if stride is None else stride
    if patch_len < 1 or stride < 1:
        raise ContractError('patch length and stride must be positive, got L={} S={}'.format(patch_len, stride))
    if patch_len > recording.n_samples:
        raise RecordingTooShort('recording shorter than patch: T={} < L={}'.format(recording.n_samples, patch_len))
    n_patches = count_patches(recording.n_samples, patch_len, stride)
    windows = sliding_window_view(recording.samples, patch_len, axis=0)
    return PatchGrid(np.ascontiguousarray(windows[::stride][:n_patches]), patch_len, stride)

class EmbeddingParams(object):
    """The learnable tokenization parameters: patch projection, positional and channel tables, [MASK] and [PAD].
    """
    def __init__(self, proj, pos, chan, mask_token, pad_token):
        """@param proj W_proj, d_e x L.
        @param pos W_pos, N_p^max x d_e.
        @param chan W_chan, C_max x d_e.
        @param mask_token The shared [MASK] embedding, d_e.
        @param pad_token The shared [PAD] embedding, d_e.
        """
        self.proj = proj
        self.pos = pos
        self.chan = chan
        self.mask_token = mask_token
        self.pad_token = pad_token

    @classmethod
    def initialize(cls, embed_dim, patch_len, max_patches, max_channels, rng, dtype=np.float32):
        """Creates parameters drawn from a truncated normal with standard deviation 0.02.

        @param rng A numpy.random.Generator.
        @returns An EmbeddingParams instance.
        """
        def draw(*shape):
            return parameter(truncated_normal(rng, shape, dtype=dtype))
        return cls(draw(embed_dim, patch_len), draw(max_patches, embed_dim), draw(max_channels, embed_dim),
                   draw(embed_dim), draw(embed_dim))

    @property
    def embed_dim(self):
        return self.proj.shape[0]

    @property
    def patch_len(self):
        return self.proj.shape[1]

    @property
    def max_patches(self):
        return self.pos.shape[0]

    @property
    def max_channels(self):
        return self.chan.shape[0]

    @property
    def dtype(self):
        return self.proj.dtype

    def named_parameters(self):
        return [('embedding.proj', self.proj), ('embedding.pos', self.pos), ('embedding.chan', self.chan),
                ('embedding.mask_token', self.mask_token), ('embedding.pad_token', self.pad_token)]

class PatchBatch(object):
    """Collated patches of several recordings, already padded along the channel axis.
    """
    def __init__(self, patches, pad_mask, channel_index):
        """@param patches B x C x N_p x L array, zero in pad channels.
        @param pad_mask B x C boolean array, True for real channels.
        @param channel_index B x C integer array of channel embedding rows, -1 for pads.
        """
        self.patches = patches
        self.pad_mask = pad_mask
        self.channel_index = channel_index

    @property
    def batch_size(self):
        return self.patches.shape[0]

    @property
    def n_channels(self):
        return self.patches.shape[1]

    @property
    def n_patches(self):
        return self.patches.shape[2]

class TokenBatch(object):
    """Embedded tokens for a batch, B x C x N_p x d_e, with their annotations.

    The token tensor is assembled on access from its parts so that the [MASK]/[PAD] substitution and the embedding
    additions are part of the gradient graph of each forward pass.
    """
    def __init__(self, params, projected, channel_index, pad_mask, mask, raw_patches):
        """@param params The EmbeddingParams that produced the batch.
        @param projected W_proj applied to every patch, a B x C x N_p x d_e Tensor.
        @param channel_index B x C channel embedding rows, -1 for pads.
        @param pad_mask B x C boolean, True for real channels.
        @param mask B x C x N_p boolean, True for masked positions.
        @param raw_patches B x C x N_p x L ground truth patches.
        """
        self.params = params
        self.projected = projected
        self.channel_index = channel_index
        self.pad_mask = pad_mask
        self.mask = mask
        self.raw_patches = raw_patches

    @property
    def batch_size(self):
        return self.projected.shape[0]

    @property
    def n_channels(self):
        return self.projected.shape[1]

    @property
    def n_patches(self):
        return self.projected.shape[2]

    @property
    def embed_dim(self):
        return self.projected.shape[3]

    @property
    def mask_set(self):
        """@returns A list, per example, of sorted (c, i) masked positions.
        """
        return [sorted((int(c), int(i)) for c, i in zip(*np.nonzero(example))) for example in self.mask]

    @property
    def tokens(self):
        """@returns The B x C x N_p x d_e token Tensor.
        """
        params = self.params
        shape = self.projected.shape
        content = self.projected
        if self.mask.any():
            content = where(self.mask[..., None], expand(params.mask_token, shape), content)
        pads = ~self.pad_mask
        if pads.any():
            content = where(pads[:, :, None, None], expand(params.pad_token, shape), content)
        rows = np.where(self.pad_mask, self.channel_index, 0)
        channel = reshape(take(params.chan, rows), (self.batch_size, self.n_channels, 1, self.embed_dim))
        if pads.any():
            channel = where(self.pad_mask[:, :, None, None], channel, 0.0)
        return content + params.pos[:self.n_patches] + channel

    def replace(self, **changes):
        """@returns A TokenBatch with some fields replaced.
        """
        fields = dict(params=self.params, projected=self.projected, channel_index=self.channel_index,
                      pad_mask=self.pad_mask, mask=self.mask, raw_patches=self.raw_patches)
        fields.update(changes)
        return TokenBatch(**fields)

def _check_ranges(params, n_patches, channel_index):
    if n_patches > params.max_patches:
        raise RangeError('{} patches exceed the positional table of {}'.format(n_patches, params.max_patches))
    if channel_index.size and int(channel_index.max()) >= params.max_channels:
        raise RangeError('channel index {} exceeds the channel table of {}'.format(int(channel_index.max()),
                                                                                   params.max_channels))

def _build(patches, pad_mask, channel_index, params):
    _check_ranges(params, patches.shape[2], channel_index)
    raw = np.asarray(patches, dtype=params.dtype)
    projected = linear(Tensor(raw), params.proj)
    mask = np.zeros(patches.shape[:3], dtype=bool)
    return TokenBatch(params, projected, channel_index, pad_mask, mask, raw)

def embed(grid, params, channel_offsets=None):
    """Embeds the patches of one recording: token(c, i) = W_proj patch(c, i) + W_pos[i] + W_chan[c].

    @param grid A PatchGrid.
    @param params EmbeddingParams.
    @param channel_offsets Optionally, the channel embedding row of every grid channel; defaults to 0..C-1.
    @returns An unmasked, unpadded TokenBatch with a batch size of one.
    @throws RangeError if a channel row or the patch count exceeds the embedding tables.
    """
    if channel_offsets is None:
        channel_offsets = range(grid.n_channels)
    channel_index = np.asarray(list(channel_offsets), dtype=np.int64).reshape(1, grid.n_channels)
    patches = np.transpose(grid.patches, (1, 0, 2))[None]
    return _build(patches, np.ones((1, grid.n_channels), dtype=bool), channel_index, params)

def embed_batch(patch_batch, params):
    """Embeds a collated PatchBatch; pad channels receive the [PAD] embedding.

    @returns An unmasked TokenBatch.
    """
    return _build(patch_batch.patches, patch_batch.pad_mask, patch_batch.channel_index, params)

def pad_channels(batch, max_channels):
    """Appends pad channels until the batch has @p max_channels channels.

    Pad channels carry [PAD] plus the positional embedding at every position and are never masked.

    @returns A TokenBatch.
    @throws RangeError if the batch already has more channels than @p max_channels.
    """
    extra = max_channels - batch.n_channels
    if extra < 0:
        raise RangeError('batch has {} channels, more than {}'.format(batch.n_channels, max_channels))
    if extra == 0:
        return batch
    size = batch.batch_size
    filler = Tensor(np.zeros((size, extra, batch.n_patches, batch.embed_dim), dtype=batch.projected.dtype))
    raw_filler = np.zeros((size, extra) + batch.raw_patches.shape[2:], dtype=batch.raw_patches.dtype)
    return batch.replace(
        projected=concatenate([batch.projected, filler], axis=1),
        channel_index=np.concatenate([batch.channel_index, np.full((size, extra), -1, dtype=np.int64)], axis=1),
        pad_mask=np.concatenate([batch.pad_mask, np.zeros((size, extra), dtype=bool)], axis=1),
        mask=np.concatenate([batch.mask, np.zeros((size, extra, batch.n_patches), dtype=bool)], axis=1),
        raw_patches=np.concatenate([batch.raw_patches, raw_filler], axis=1))

def mask_count(ratio, n_positions):
    """Returns round(ratio * n_positions), rounding halves to even.
    """
    return int(round(ratio * n_positions))

def mask_tokens(batch, ratio, seed):
    """Masks a uniformly sampled subset of every example's real positions.

    Example b draws from the Philox sub-stream (seed, b), so the mask set depends only on the seed and the shape.
    Masked tokens carry [MASK] plus their positional and channel embeddings.

    @param batch A TokenBatch.
    @param ratio The masked fraction in [0, 1).
    @param seed An unsigned integer.
    @returns A TokenBatch whose mask replaces any previous mask.
    @throws ContractError if @p ratio is outside [0, 1).
    """
    if not 0.0 <= ratio < 1.0:
        raise ContractError('mask ratio must be in [0, 1), got {}'.format(ratio))
    mask = np.zeros((batch.batch_size, batch.n_channels, batch.n_patches), dtype=bool)
    for example in range(batch.batch_size):
        real = np.flatnonzero(batch.pad_mask[example])
        n_positions = real.size * batch.n_patches
        count = mask_count(ratio, n_positions)
        if count == 0:
            continue
        chosen = seeded_generator(seed, example).choice(n_positions, size=count, replace=False)
        mask[example, real[chosen // batch.n_patches], chosen % batch.n_patches] = True
    log.debug('Masked %d of %d positions', int(mask.sum()), int(batch.pad_mask.sum()) * batch.n_patches)
    return batch.replace(mask=mask)
