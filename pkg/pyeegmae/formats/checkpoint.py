"""@ingroup formats
@file
The checkpoint file: an encoder config header followed by named f32 blobs.

Layout: magic "CRBO", version u32, the EncoderConfig fields (u32 or f32 each, in CONFIG_FIELDS order), a u32 blob
count, then per blob: name length u16, UTF-8 name, rank u8, dims u32 x rank, f32 data. Model parameters use their
EncoderModel names; optimizer moments are stored as "optim.m.<name>" and "optim.v.<name>" and the training position
as "state.step" and "state.epoch", each written as base 2^16 limbs (most significant first) so counters stay exact
beyond the f32 integer range. f64 parameters are narrowed to f32 on save.
"""
import logging
from collections import OrderedDict

import numpy as np

from ..attention import AttentionMechanism
from ..encoder import EncoderConfig, build
from ..system import System
from ..tensor import Precision
from .common import BinaryReader, BinaryWriter, FormatError

log = logging.getLogger(__name__)

MAGIC = b'CRBO'
VERSION = 1

_MECHANISMS = list(AttentionMechanism)
_PRECISIONS = list(Precision)

## Header fields with their struct codes; enums are stored as their index.
CONFIG_FIELDS = (('n_layers', 'I'), ('n_heads', 'I'), ('embed_dim', 'I'), ('mlp_dim', 'I'), ('patch_len', 'I'),
                 ('stride', 'I'), ('mechanism', 'I'), ('max_channels', 'I'), ('max_patches', 'I'),
                 ('drop_path_rate', 'f'), ('precision', 'I'))

OPTIM_M_PREFIX = 'optim.m.'
OPTIM_V_PREFIX = 'optim.v.'
STEP_BLOB = 'state.step'
EPOCH_BLOB = 'state.epoch'
COUNTER_BASE = 1 << 16

class Checkpoint(object):
    """A decoded checkpoint: the encoder config and every named blob.
    """
    def __init__(self, config, blobs):
        self.config = config
        self.blobs = blobs

    @property
    def model_state(self):
        return OrderedDict((name, value) for name, value in self.blobs.items()
                           if not name.startswith(('optim.', 'state.')))

    def moments(self):
        """@returns A (first, second) pair of name -> array dictionaries; empty if no optimizer state was saved.
        """
        first = {name[len(OPTIM_M_PREFIX):]: value for name, value in self.blobs.items()
                 if name.startswith(OPTIM_M_PREFIX)}
        second = {name[len(OPTIM_V_PREFIX):]: value for name, value in self.blobs.items()
                  if name.startswith(OPTIM_V_PREFIX)}
        return first, second

    @property
    def step(self):
        return decode_counter(self.blobs[STEP_BLOB]) if STEP_BLOB in self.blobs else 0

    @property
    def epoch(self):
        return decode_counter(self.blobs[EPOCH_BLOB]) if EPOCH_BLOB in self.blobs else 0

def encode_counter(value):
    """Splits a nonnegative integer into base 2^16 limbs, most significant first, so every limb is exact in f32.

    @returns A 1-D array.
    """
    value = int(value)
    limbs = [value % COUNTER_BASE]
    value //= COUNTER_BASE
    while value:
        limbs.append(value % COUNTER_BASE)
        value //= COUNTER_BASE
    return np.array(limbs[::-1], dtype=np.float64)

def decode_counter(blob):
    value = 0
    for limb in np.asarray(blob).ravel():
        value = value * COUNTER_BASE + int(limb)
    return value

def _header_value(config, field):
    value = config[field]
    if field == 'mechanism':
        return _MECHANISMS.index(value)
    if field == 'precision':
        return _PRECISIONS.index(value)
    return value

def encode_checkpoint(config, blobs):
    """@param config An EncoderConfig.
    @param blobs An ordered mapping of names to arrays; values are stored as f32.
    @returns The file contents as bytes.
    """
    writer = BinaryWriter()
    writer.raw(MAGIC)
    writer.pack('I', VERSION)
    for field, code in CONFIG_FIELDS:
        writer.pack(code, _header_value(config, field))
    writer.pack('I', len(blobs))
    for name, value in blobs.items():
        value = np.asarray(value)
        writer.text(name)
        writer.pack('B', value.ndim)
        for size in value.shape:
            writer.pack('I', size)
        writer.array(value)
    return writer.getvalue()

def decode_checkpoint(payload, path=None):
    """@returns A Checkpoint.
    @throws BadMagic, UnsupportedVersion, TruncatedPayload or FormatError.
    """
    reader = BinaryReader(payload, path)
    reader.magic(MAGIC)
    reader.version(VERSION)
    start = reader.offset
    values = {}
    for field, code in CONFIG_FIELDS:
        values[field] = reader.unpack(code)
    try:
        values['mechanism'] = _MECHANISMS[values['mechanism']]
        values['precision'] = _PRECISIONS[values['precision']]
    except IndexError:
        raise FormatError('unknown mechanism or precision index in header', start, path)
    # f32 header fields are read back at single precision significant digits.
    values['drop_path_rate'] = float('{:.7g}'.format(values['drop_path_rate']))
    config = EncoderConfig(values)
    blobs = OrderedDict()
    for _ in range(reader.unpack('I')):
        name = reader.text()
        rank = reader.unpack('B')
        shape = tuple(reader.unpack('I') for _ in range(rank))
        blobs[name] = reader.array(int(np.prod(shape, dtype=np.int64)) if shape else 1).reshape(shape)
    reader.finish()
    return Checkpoint(config, blobs)

def save_checkpoint(path, model, optimizer=None, step=0, epoch=0, system=None, extra=None):
    """Writes a model (and optionally its optimizer moments and training position) to @p path.

    @param model An EncoderModel.
    @param optimizer Optionally, an AdamW whose moments are saved.
    @param extra Optionally, further named arrays (e.g. a fine-tuning head) stored after the model parameters.
    """
    system = system or System()
    blobs = model.state()
    blobs.update(extra or {})
    if optimizer is not None:
        for name, (first, second) in optimizer.moments().items():
            blobs[OPTIM_M_PREFIX + name] = first
            blobs[OPTIM_V_PREFIX + name] = second
        blobs[STEP_BLOB] = encode_counter(step)
        blobs[EPOCH_BLOB] = encode_counter(epoch)
    try:
        system.write_bytes(path, encode_checkpoint(model.config, blobs))
    except EnvironmentError as error:
        raise FormatError('cannot write checkpoint ({})'.format(error), path=path) from error
    log.info('Wrote checkpoint %s', path)

def load_checkpoint(path, system=None):
    """@returns A Checkpoint.
    @throws FormatError if the file cannot be read or decoded.
    """
    system = system or System()
    try:
        payload = system.read_bytes(path)
    except EnvironmentError as error:
        raise FormatError('cannot read checkpoint ({})'.format(error), path=path) from error
    return decode_checkpoint(payload, path)

def restore(checkpoint):
    """Builds an encoder from a checkpoint's config and loads its parameters.

    @returns An EncoderModel.
    """
    model = build(checkpoint.config, seed=0)
    model.load_state(checkpoint.model_state)
    return model
