"""Reading and writing model checkpoints. A checkpoint file contains an 8-byte little-endian
unsigned header length, a UTF-8 JSON header and the parameter vector as little-endian float32."""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..util import FORMAT_VERSION
from .model import Architecture, from_theta
from .schedule import schedule_from_params, schedule_params
from .training import OPTIMIZER_HPARAMS

logger = logging.getLogger(__name__)

HEADER_KEYS = ('format_version', 'arch', 'input_shape', 'schedule', 'step', 'num_params')

def save_checkpoint(path, model, training=None, seed=None):
    """Write a model to the disk.

    Parameters
    ----------
    path : str or Path
        Output file.
    model : DenoiserModel
        The model.
    training : dict, optional
        Training configuration. If None, the configuration stored in the model is used.
    seed : int, optional
        Master seed of the run.

    Returns
    -------
    dict
        The header written.
    """

    path = Path(path)
    if training is None:
        training = model.train_config
    if seed is None and training is not None:
        seed = training.get('seed')

    header = {
        'format_version': FORMAT_VERSION,
        'arch': model.arch.to_dict(),
        'input_shape': list(model.input_shape),
        'schedule': schedule_params(model.schedule),
        'training': training,
        'optimizer': OPTIMIZER_HPARAMS,
        'step': model.step,
        'examples_seen': model.examples_seen,
        'seed': seed,
        'num_params': model.num_params,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    blob = model.theta.astype('<f4').tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as fd:
        fd.write(struct.pack('<Q', len(header_bytes)))
        fd.write(header_bytes)
        fd.write(blob)

    return header

def read_header(path):
    """Read the header and the raw parameter blob of a checkpoint."""

    data = Path(path).read_bytes()
    if len(data)<8:
        raise FormatError(f'Checkpoint {path} is too short to hold a header length')
    header_len = struct.unpack('<Q', data[:8])[0]
    if 8+header_len>len(data):
        raise FormatError(f'Checkpoint {path} declares a header of {header_len} bytes but the file '
                          f'has {len(data)} bytes')
    try:
        header = json.loads(data[8:8+header_len].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f'Invalid checkpoint header in {path}: {exc}') from exc

    missing = [key for key in HEADER_KEYS if key not in header]
    if missing:
        raise FormatError(f'Checkpoint header of {path} lacks keys {missing}')
    if header['format_version']!=FORMAT_VERSION:
        raise FormatError(f'Unsupported checkpoint format version {header["format_version"]}')

    return header, data[8+header_len:]

def load_checkpoint(path):
    """Read a model written by `save_checkpoint`.

    Returns
    -------
    model : DenoiserModel
        The model, with `step`, `examples_seen` and `train_config` restored.
    header : dict
        The checkpoint header.
    """

    header, blob = read_header(path)
    if len(blob)!=4*header['num_params']:
        raise FormatError(f'Checkpoint {path} holds {len(blob)} parameter bytes, expected '
                          f'{4*header["num_params"]}')

    theta = np.frombuffer(blob, dtype='<f4')
    schedule = schedule_from_params(header['schedule'])
    arch = Architecture.from_dict(header['arch'])
    model = from_theta(arch, tuple(header['input_shape']), schedule, theta)
    model.step = header['step']
    model.examples_seen = header.get('examples_seen', 0)
    model.train_config = header.get('training')
    logger.debug('Loaded checkpoint %s at step %d', path, model.step)

    return model, header
