"""@defgroup pyeegmae pyeegmae
"""

import logging
import os

## The package version, also written into every metrics file and checkpoint stanza.
__version__ = '0.3.0'

logging.getLogger(__name__).addHandler(logging.StreamHandler())

_LEVEL = os.getenv('PYEEGMAE_LOG_LEVEL')
if _LEVEL:
    logging.getLogger(__name__).setLevel(_LEVEL.upper())
