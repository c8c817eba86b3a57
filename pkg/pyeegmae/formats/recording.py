"""@ingroup formats
@file
The recording file: a self-describing little-endian container for one multi-channel waveform.

Layout: magic "EEGW", version u32, C u16, T u64, sampling rate f32, C channel ids (u16 length + UTF-8 each), then
T x C f32 samples in time-major order.
"""
import logging

import numpy as np

from ..system import System
from ..tokenizer import InvalidRecording, Recording
from .common import BinaryReader, BinaryWriter, FormatError, NonFiniteSamples, TruncatedPayload

log = logging.getLogger(__name__)

MAGIC = b'EEGW'
VERSION = 1

def encode_recording(recording):
    """@param recording A Recording.
    @returns The file contents as bytes.
    """
    writer = BinaryWriter()
    writer.raw(MAGIC)
    writer.pack('I', VERSION)
    writer.pack('HQf', recording.n_channels, recording.n_samples, recording.sampling_rate)
    for channel_id in recording.channel_ids:
        writer.text(channel_id)
    writer.array(recording.samples)
    return writer.getvalue()

def decode_recording(payload, path=None):
    """Decodes recording file contents; samples are returned exactly as stored (f32, not normalized).

    @returns A Recording.
    @throws BadMagic, UnsupportedVersion, TruncatedPayload, NonFiniteSamples or FormatError.
    """
    reader = BinaryReader(payload, path)
    reader.magic(MAGIC)
    reader.version(VERSION)
    n_channels, n_samples, sampling_rate = reader.unpack('HQf')
    channel_ids = [reader.text() for _ in range(n_channels)]
    start = reader.offset
    expected = n_samples * n_channels * 4
    if reader.remaining < expected:
        raise TruncatedPayload(expected, reader.remaining, start, path)
    samples = reader.array(n_samples * n_channels).reshape(n_samples, n_channels)
    reader.finish()
    if not np.all(np.isfinite(samples)):
        row = int(np.argwhere(~np.isfinite(samples))[0][0])
        raise NonFiniteSamples('non-finite sample in row {}'.format(row), start + row * n_channels * 4, path)
    try:
        return Recording(samples, float(sampling_rate), channel_ids)
    except InvalidRecording as error:
        raise FormatError(str(error), start, path) from error

def save_recording(recording, path, system=None):
    system = system or System()
    system.write_bytes(path, encode_recording(recording))
    log.debug('Wrote %s', path)

def load_recording(path, system=None):
    """Loads a recording file. Z-scoring is a separate step (Recording.zscore).

    @throws FormatError if the file cannot be read or decoded.
    """
    system = system or System()
    try:
        payload = system.read_bytes(path)
    except EnvironmentError as error:
        raise FormatError('cannot read recording ({})'.format(error), path=path) from error
    return decode_recording(payload, path)
