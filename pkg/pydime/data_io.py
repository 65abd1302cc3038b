"""Utility functions for reading and writing datasets."""

import json
import logging
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import FormatError
from .util import FORMAT_VERSION

logger = logging.getLogger(__name__)

CIFAR10_RECORD_SIZE = 3073
CIFAR10_SHAPE = (3, 32, 32)
CIFAR10_NUM_CLASSES = 10

def read_dataset(path):
    """Read a dataset from the disk. Supported formats are CIFAR-10 binary batches ('bin') and raw
    float32 tensors described by a JSON manifest ('json').

    Parameters
    ----------
    path : str or Path or list
        Location of the file. A list of CIFAR-10 batch files is also accepted.

    Returns
    -------
    Dataset
        The dataset read.
    """

    if isinstance(path, (list, tuple)):
        return read_cifar10(path)

    file_type = str(path).split('.')[-1]
    if file_type=='bin':
        reader_func = read_cifar10
    elif file_type=='json':
        reader_func = read_raw
    else:
        raise FormatError(f"Dataset type '{file_type}' is not supported by the reader."
                          " Current supported extensions: 'bin' (CIFAR-10), 'json' (raw manifest).")

    return reader_func(path)

def read_cifar10(paths):
    """Read CIFAR-10 binary batch files. Each record has 3073 bytes: one label byte followed by the
    red, green and blue planes of a 32x32 image, in row-major order. Pixel values are divided
    by 255. Record order is preserved across files.

    Parameters
    ----------
    paths : str or Path or list
        One or more batch files.

    Returns
    -------
    Dataset
        Dataset with 10 classes. provenance['records'] contains (file, byte offset) for each image.
    """

    if isinstance(paths, (str, Path)):
        paths = [paths]

    images = []
    labels = []
    records = []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size==0:
            logger.warning('CIFAR-10 file %s is empty', path)
            continue
        remainder = raw.size%CIFAR10_RECORD_SIZE
        if remainder!=0:
            offset = raw.size - remainder
            raise FormatError(f'Truncated record at byte offset {offset} in {path}: '
                              f'file size {raw.size} is not a multiple of {CIFAR10_RECORD_SIZE}')

        raw = raw.reshape(-1, CIFAR10_RECORD_SIZE)
        file_labels = raw[:, 0]
        invalid = np.nonzero(file_labels>=CIFAR10_NUM_CLASSES)[0]
        if invalid.size>0:
            offset = int(invalid[0])*CIFAR10_RECORD_SIZE
            raise FormatError(f'Invalid label {file_labels[invalid[0]]} at byte offset {offset} in {path}')

        pixels = raw[:, 1:].reshape(-1, *CIFAR10_SHAPE).transpose(0, 2, 3, 1)
        images.append(pixels.astype(np.float32)/255)
        labels.append(file_labels.astype(np.int64))
        records.extend((str(path), idx*CIFAR10_RECORD_SIZE) for idx in range(len(raw)))

    if images:
        images = np.concatenate(images)
        labels = np.concatenate(labels)
    else:
        images = np.zeros((0, 32, 32, 3), dtype=np.float32)
        labels = np.zeros(0, dtype=np.int64)

    provenance = {'source': [str(path) for path in paths], 'format': 'cifar10', 'records': records}

    return Dataset(images, labels, CIFAR10_NUM_CLASSES, provenance)

def read_raw(manifest_path):
    """Read a raw tensor dataset. The manifest is a JSON file with keys 'shape' (N, H, W, C),
    'tensor_file' (path relative to the manifest), and optionally 'labels' and 'num_classes'.
    The tensor file contains little-endian float32 values. Values outside [0, 1] are clamped
    and the number of clamped values is reported as a warning.

    Parameters
    ----------
    manifest_path : str or Path
        Location of the manifest.

    Returns
    -------
    Dataset
        The dataset read.
    """

    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        shape = tuple(int(v) for v in manifest['shape'])
        tensor_path = manifest_path.parent/manifest['tensor_file']
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f'Invalid raw manifest {manifest_path}: {exc}') from exc

    if len(shape)!=4:
        raise FormatError(f'Manifest shape must be (N, H, W, C), got {shape}')

    data = np.fromfile(tensor_path, dtype='<f4')
    expected = int(np.prod(shape))
    if data.size!=expected:
        raise FormatError(f'Tensor file {tensor_path} holds {data.size} values, manifest declares '
                          f'shape {shape} ({expected} values)')

    images = data.reshape(shape).astype(np.float32)
    num_outside = int(np.sum((images<0) | (images>1) | np.isnan(images)))
    if num_outside>0:
        logger.warning('Clamped %d values outside [0, 1] in %s', num_outside, tensor_path)
        images = np.clip(np.nan_to_num(images, nan=0.), 0, 1)

    provenance = {'source': str(manifest_path), 'format': 'raw', 'clamped': num_outside}
    if 'provenance' in manifest:
        provenance['original'] = manifest['provenance']

    return Dataset(images, manifest.get('labels'), manifest.get('num_classes'), provenance)

def export_raw(dataset, manifest_path):
    """Write a dataset as a raw little-endian float32 tensor plus JSON manifest. The tensor file
    is saved next to the manifest with suffix '.f32'.

    Parameters
    ----------
    dataset : Dataset
        The dataset to write.
    manifest_path : str or Path
        Location of the manifest.

    Returns
    -------
    tuple of Path
        Paths of the manifest and the tensor file.
    """

    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensor_path = manifest_path.with_suffix('.f32')

    dataset.images.astype('<f4').tofile(tensor_path)
    manifest = {
        'format_version': FORMAT_VERSION,
        'shape': [len(dataset), *dataset.shape],
        'tensor_file': tensor_path.name,
        'labels': None if dataset.labels is None else dataset.labels.tolist(),
        'num_classes': dataset.num_classes if dataset.labels is not None else None,
        'provenance': _serializable(dataset.provenance),
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))

    return manifest_path, tensor_path

def export_tensor(images, manifest_path):
    """Write an image batch (e.g. generations or inpainting reconstructions) in the raw format."""

    return export_raw(Dataset(np.clip(images, 0, 1)), manifest_path)

def _serializable(obj):
    """Keep only JSON-compatible content of a provenance dictionary."""

    try:
        json.dumps(obj)
        return obj
    except TypeError:
        return str(obj)
