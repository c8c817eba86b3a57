"""@ingroup formats
@file
CSV metrics logs, each preceded by a reproducibility stanza of "# key=value" comment lines.
"""
import csv
import logging
from collections import OrderedDict

import pandas

from .. import __version__
from ..system import System
from .common import FormatError

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ('epoch', 'step', 'l_masked', 'l_visible', 'total', 'lr')
CLASSIFICATION_COLUMNS = ('epoch', 'split', 'loss', 'balanced_acc', 'auroc', 'aupr')
REGRESSION_COLUMNS = ('epoch', 'split', 'loss', 'r2', 'rmse')

def reproducibility_stanza(config, seed, **extra):
    """@param config The ConfigEntity that drove the run.
    @returns An OrderedDict of config hash, seed, build version and @p extra.
    """
    stanza = OrderedDict([('config_hash', config.config_hash()), ('seed', seed), ('version', __version__)])
    stanza.update(extra)
    return stanza

class MetricsWriter(object):
    """Streams metric rows to a CSV file, flushing after every row so partial runs stay readable.

    @code
    with MetricsWriter(path, PRETRAIN_COLUMNS, reproducibility_stanza(config, seed)) as metrics:
      metrics.write_row({'epoch': 1, ...})
    @endcode
    """
    def __init__(self, path, columns, stanza=None, append=False, system=None):
        """@param append Continue an existing log (resumed runs); the stanza and header are not written again.
        @throws FormatError if the file cannot be opened.
        """
        self.path = path
        self.columns = tuple(columns)
        system = system or System()
        try:
            self._file = system.open_text(path, 'a' if append else 'w')
        except EnvironmentError as error:
            raise FormatError('cannot open metrics log ({})'.format(error), path=path) from error
        self._writer = csv.DictWriter(self._file, fieldnames=self.columns, lineterminator='\n')
        if not append:
            for key, value in (stanza or {}).items():
                self._file.write('# {}={}\n'.format(key, value))
            self._writer.writeheader()
            self._file.flush()

    def write_row(self, row):
        self._writer.writerow({column: row.get(column, '') for column in self.columns})
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *_):
        self.close()

def read_stanza(path, system=None):
    """@returns An OrderedDict of the "# key=value" lines at the top of a metrics file.
    """
    system = system or System()
    stanza = OrderedDict()
    for line in system.read_text(path).splitlines():
        if not line.startswith('#'):
            break
        key, _, value = line[1:].strip().partition('=')
        stanza[key] = value
    return stanza

def read_metrics(path):
    """@returns A pandas.DataFrame of the rows of a metrics file.
    """
    try:
        return pandas.read_csv(path, comment='#')
    except (EnvironmentError, pandas.errors.ParserError) as error:
        raise FormatError('cannot read metrics log ({})'.format(error), path=path) from error
