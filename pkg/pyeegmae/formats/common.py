"""@ingroup formats
@file
Little-endian binary encoding helpers and the format error hierarchy shared by recording and checkpoint files.
"""
import struct

import numpy as np

from ..entity import PyEegMaeError

class FormatError(PyEegMaeError):
    """Raised if a binary file cannot be decoded; carries the byte offset at which decoding failed.
    """
    def __init__(self, message, offset=None, path=None):
        if offset is not None:
            message = '{} at byte offset {}'.format(message, offset)
        if path is not None:
            message = '{}: {}'.format(path, message)
        super(FormatError, self).__init__(message)
        self.offset = offset
        self.path = path

class BadMagic(FormatError):
    pass

class TruncatedPayload(FormatError):
    """Raised if a file ends before the bytes its header declares.
    """
    def __init__(self, expected, actual, offset=None, path=None):
        super(TruncatedPayload, self).__init__('expected {} bytes but only {} remain'.format(expected, actual),
                                               offset, path)
        self.expected = expected
        self.actual = actual

class UnsupportedVersion(FormatError):
    pass

class NonFiniteSamples(FormatError):
    pass

class BinaryWriter(object):
    """Accumulates little-endian fields into a byte string.
    """
    def __init__(self):
        self._parts = []

    def pack(self, fmt, *values):
        self._parts.append(struct.pack('<' + fmt, *values))

    def raw(self, payload):
        self._parts.append(bytes(payload))

    def text(self, value):
        """Writes a u16 byte length followed by the UTF-8 bytes of @p value.
        """
        encoded = value.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise FormatError('string of {} bytes does not fit a u16 length'.format(len(encoded)))
        self.pack('H', len(encoded))
        self.raw(encoded)

    def array(self, values, dtype='<f4'):
        self.raw(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self):
        return b''.join(self._parts)

class BinaryReader(object):
    """Reads little-endian fields from a byte string, tracking the offset for diagnostics.
    """
    def __init__(self, payload, path=None):
        self.payload = payload
        self.offset = 0
        self.path = path

    @property
    def remaining(self):
        return len(self.payload) - self.offset

    def take(self, count):
        """@returns The next @p count bytes.
        @throws TruncatedPayload if fewer bytes remain.
        """
        if count > self.remaining:
            raise TruncatedPayload(count, self.remaining, self.offset, self.path)
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        fmt = '<' + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def magic(self, expected):
        """@throws BadMagic if the next bytes differ from @p expected.
        """
        start = self.offset
        found = self.take(len(expected))
        if found != expected:
            raise BadMagic('expected magic {!r}, found {!r}'.format(expected, bytes(found)), start, self.path)

    def version(self, supported):
        """Reads a u32 version.

        @throws UnsupportedVersion if it is newer than @p supported.
        """
        start = self.offset
        version = self.unpack('I')
        if version > supported or version < 1:
            raise UnsupportedVersion('version {} is not supported (newest supported: {})'.format(version, supported),
                                     start, self.path)
        return version

    def text(self):
        length = self.unpack('H')
        start = self.offset
        try:
            return bytes(self.take(length)).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError('string is not valid UTF-8', start, self.path)

    def array(self, count, dtype='<f4'):
        """@returns A writable numpy array of @p count items.
        """
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).copy()

    def finish(self):
        """@throws FormatError if unread bytes remain.
        """
        if self.remaining:
            raise FormatError('{} trailing bytes'.format(self.remaining), self.offset, self.path)
