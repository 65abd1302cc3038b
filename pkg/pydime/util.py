"""Utility functions for seeding, batching and writing reports."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

FORMAT_VERSION = 1
FLOAT_FORMAT = '%.9g'

def derive_seed(master, *labels):
    """Derive a child seed from a master seed and a sequence of labels. The same master seed and
    labels always give the same child seed, and different labels give unrelated seeds.

    Parameters
    ----------
    master : int
        The master seed.
    *labels : str or int
        Labels identifying the consumer of the seed, e.g. ('shadow', 3).

    Returns
    -------
    int
        A seed in [0, 2**63).
    """

    key = ':'.join([str(int(master))] + [str(label) for label in labels])
    digest = hashlib.blake2b(key.encode('utf-8'), digest_size=8).digest()

    return int.from_bytes(digest, 'little') >> 1

def get_batches(n, batch_size):
    """Split range(n) into consecutive slices having at most `batch_size` elements.

    Parameters
    ----------
    n : int
        Number of items.
    batch_size : int
        Maximum size of each slice.

    Returns
    -------
    list of slice
        The slices.
    """

    if batch_size<1:
        raise ValueError('`batch_size` must be positive')

    return [slice(start, min(start+batch_size, n)) for start in range(0, n, batch_size)]

def write_table(path, table, float_format=FLOAT_FORMAT):
    """Write a report table as a CSV file. The first line is a comment containing the format
    version, the second line is the header.

    Parameters
    ----------
    path : str or Path
        Output file.
    table : pandas.DataFrame or dict
        The table. A dict is converted to a DataFrame.
    float_format : str
        printf-style format of float cells.

    Returns
    -------
    Path
        The path of the written file.
    """

    path = Path(path)
    if not isinstance(table, pd.DataFrame):
        table = pd.DataFrame(table)

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as fd:
        fd.write(f'# format_version={FORMAT_VERSION}\n')
        table.to_csv(fd, index=False, float_format=float_format, lineterminator='\n')

    return path

def read_table(path):
    """Read a table written by `write_table`."""

    return pd.read_csv(path, comment='#')

def write_json(path, obj):
    """Write a JSON report. A 'format_version' key is added to dictionaries."""

    path = Path(path)
    if isinstance(obj, dict) and 'format_version' not in obj:
        obj = {'format_version': FORMAT_VERSION, **obj}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fd:
        json.dump(obj, fd, indent=2, sort_keys=True, default=_json_default)

    return path

def file_hash(path):
    """SHA-256 of a file, as a hex string."""

    sha = hashlib.sha256()
    with open(path, 'rb') as fd:
        for chunk in iter(lambda: fd.read(1 << 20), b''):
            sha.update(chunk)

    return sha.hexdigest()

def _json_default(obj):
    """Convert numpy scalars and arrays for json.dump."""

    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f'Object of type {type(obj).__name__} is not JSON serializable')
