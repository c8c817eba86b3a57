"""@ingroup pyeegmae
@file
Validated configuration entities and the exception hierarchy shared by every pyeegmae module.
"""
import hashlib
import logging
from abc import abstractmethod
from collections import OrderedDict
from collections.abc import Mapping
from enum import Enum

import voluptuous

log = logging.getLogger(__name__)

class PyEegMaeError(Exception):
    """The base class for all exceptions explicitly raised by pyeegmae.
    """
    pass

class ConfigError(PyEegMaeError):
    """Raised if a configuration cannot be used, either because it is malformed or because it violates a schema.
    """
    def __init__(self, message, key=None, line=None):
        self.detail = message
        if key is not None and line is not None:
            message = '{} (key "{}", line {})'.format(message, key, line)
        elif key is not None:
            message = '{} (key "{}")'.format(message, key)
        super(ConfigError, self).__init__(message)
        self.key = key
        self.line = line

class MalformedConfig(ConfigError):
    """Raised if raw configuration text cannot be decoded into key/value pairs.
    """
    pass

class InvalidConfig(ConfigError):
    """Raised if decoded configuration values violate the entity's schema or one of its cross-field invariants.
    """
    pass

class ContractError(PyEegMaeError):
    """Raised if an operation is called with arguments that violate its documented pre-conditions.
    """
    pass

class RangeError(PyEegMaeError):
    """Raised if an index or size exceeds a configured maximum (channels, patches).
    """
    pass

def _number(value):
    if isinstance(value, bool):
        raise voluptuous.Invalid('expected a number')
    if isinstance(value, (int, float)):
        return value
    try:
        return int(value)
    except (TypeError, ValueError):
        pass
    try:
        return float(value)
    except (TypeError, ValueError):
        raise voluptuous.Invalid('expected a number')

def _sequence_of(item):
    def validator(value):
        if isinstance(value, str):
            value = [part.strip() for part in value.split(',') if part.strip()]
        if not isinstance(value, (list, tuple)):
            raise voluptuous.Invalid('expected a comma separated list')
        try:
            return tuple(item(v) for v in value)
        except (TypeError, ValueError):
            raise voluptuous.Invalid('list entry is not a valid {}'.format(item.__name__))
    return validator

## A schema validator for arbitrary numeric values; text is coerced to int when possible, else float.
Number = _number #pylint: disable=invalid-name

## A schema validator for real values.
Real = voluptuous.All(_number, voluptuous.Coerce(float)) #pylint: disable=invalid-name

## A schema validator for strictly positive integers.
Count = voluptuous.All(voluptuous.Coerce(int), voluptuous.Range(min=1)) #pylint: disable=invalid-name

## A schema validator for nonnegative integers.
Index = voluptuous.All(voluptuous.Coerce(int), voluptuous.Range(min=0)) #pylint: disable=invalid-name

## A schema validator for values in [0, 1].
Fraction = voluptuous.All(Real, voluptuous.Range(min=0.0, max=1.0)) #pylint: disable=invalid-name

## A schema validator for seeds (unsigned 64-bit).
Seed = voluptuous.All(voluptuous.Coerce(int), voluptuous.Range(min=0, max=2 ** 64 - 1)) #pylint: disable=invalid-name

## A schema validator for textual values.
Text = voluptuous.Coerce(str) #pylint: disable=invalid-name

## Schema validators for comma separated lists.
RealList = _sequence_of(float) #pylint: disable=invalid-name
CountList = _sequence_of(int) #pylint: disable=invalid-name
TextList = _sequence_of(str) #pylint: disable=invalid-name

## A schema validator for Adam style (beta1, beta2) pairs.
Betas = voluptuous.All(RealList, voluptuous.Length(min=2, max=2)) #pylint: disable=invalid-name

def decode_run_file(text):
    """Decodes run file text into an ordered key/value mapping.

    The format is one `key = value` pair per line. Everything after a `#` is a comment and blank lines are ignored.

    @param text A string.
    @returns An OrderedDict of strings; its `lines` attribute maps each key to its 1-indexed line number.
    @throws MalformedConfig if a line has no `=`, an empty key, or repeats a key.
    """
    values = RunFileValues()
    for number, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise MalformedConfig('expected "key = value"', line=number, key=line)
        key, value = line.split('=', 1)
        key = key.strip()
        if not key:
            raise MalformedConfig('empty key', key='', line=number)
        if key in values:
            raise MalformedConfig('duplicate key, first defined on line {}'.format(values.lines[key]), key=key,
                                  line=number)
        values[key] = value.strip()
        values.lines[key] = number
    return values

class RunFileValues(OrderedDict):
    """Decoded run file values, remembering the line each key came from.
    """
    def __init__(self, *args, **kwargs):
        super(RunFileValues, self).__init__(*args, **kwargs)
        self.lines = {}

def render_value(value):
    """Renders a decoded configuration value in run file syntax.

    @param value A decoded value.
    @returns A string.
    """
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ', '.join(render_value(v) for v in value)
    if value is None:
        return ''
    return str(value)

class ConfigEntity(Mapping):
    """Represents a single validated configuration.

    The purpose of a ConfigEntity implementation is to act as an immutable, schema-checked data container that can be
    freely passed between the training, benchmark and command line components.

    Most of the functionality of this class is derived from the @p schema property.
    Each key of the schema dictionary becomes an attribute of the entity, so configurations can be defined in terms of
    typed schemas but interacted with as if they were plain Python objects:
    @code
    from voluptuous import Schema, Required

    class ExampleConfig(ConfigEntity):
      @property
      def schema(self):
        return Schema({Required('n_layers', default=8): Count})

    ExampleConfig('n_layers = 4').n_layers # 4, decoded from run file text
    ExampleConfig({'n_layers': 0}) # Raises InvalidConfig because n_layers must be positive
    ExampleConfig({'depth': 3}) # Raises InvalidConfig because depth is not a known key
    @endcode
    """
    def __init__(self, raw=None, **overrides):
        """@param raw A dictionary of values, run file text, or None for all defaults.
        @param overrides Keyword values that replace entries of @p raw.
        @throws MalformedConfig if @p raw is text that cannot be decoded.
        @throws InvalidConfig if the schema or a cross-field invariant is violated.
        """
        self.raw = raw
        lines = {}
        if raw is None:
            raw = {}
        elif not isinstance(raw, Mapping):
            raw = self.decoder(raw) #pylint: disable=not-callable,too-many-function-args
            lines = getattr(raw, 'lines', {})
        values = dict(raw)
        values.update(overrides)
        self.lines = lines
        try:
            self.decoded = self.schema(values) #pylint: disable=not-callable
        except voluptuous.MultipleInvalid as error:
            first = error.errors[0]
            key = str(first.path[0]) if first.path else None
            log.debug('%s failed schema validation: %s', type(self).__name__, error)
            raise InvalidConfig(first.msg, key=key, line=lines.get(key)) from error
        for key in self.schema.schema:
            name = getattr(key, 'schema', key)
            if isinstance(name, str):
                setattr(self, name, self.decoded.get(name))
        self.validate()

    @property
    def decoder(self):
        """Returns the callable decoder that translates raw text into the underlying value dictionary.

        @returns A unary function that accepts a string and returns a dictionary.
        """
        return decode_run_file

    @property
    @abstractmethod
    def schema(self):
        """Returns the voluptuous.Schema instance associated with the entity implementation.

        @returns A voluptuous.Schema instance.
        @see https://pypi.org/project/voluptuous/
        """
        pass

    def validate(self):
        """A hook for cross-field invariants that a schema cannot express.

        @throws InvalidConfig if an invariant is violated.
        """
        pass

    def invalid(self, message, key):
        """Builds an InvalidConfig for @p key, attaching its run file line when known.

        @returns An InvalidConfig instance (not raised).
        """
        return InvalidConfig(message, key=key, line=self.lines.get(key))

    def replace(self, **changes):
        """Returns a copy of the entity with some values replaced; the copy is validated again.

        @returns An instance of the same ConfigEntity subclass.
        """
        values = dict(self.decoded)
        values.update(changes)
        return type(self)(values)

    def to_text(self):
        """Renders the entity as canonical run file text (keys sorted).

        @returns A string.
        """
        return ''.join('{} = {}\n'.format(key, render_value(self.decoded[key])) for key in sorted(self.decoded))

    def config_hash(self):
        """Returns the SHA-256 hex digest of the canonical rendering.

        @returns A string.
        """
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    def __getitem__(self, key):
        return self.decoded[key]

    def __iter__(self):
        return iter(self.decoded)

    def __len__(self):
        return len(self.decoded)

    def __str__(self):
        return str(self.decoded)

    def __repr__(self):
        return '{}({!r})'.format(type(self).__name__, self.decoded)

    def __eq__(self, other):
        return type(self) is type(other) and self.decoded == other.decoded

    def __hash__(self):
        return hash(self.config_hash())
