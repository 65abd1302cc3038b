"""Dataset class used for storing image collections."""

import numpy as np
from skimage.transform import resize

from .errors import ArgumentError

class Dataset:
    """Class representing a collection of images with the same shape. Pixel values are stored in
    attribute `images` as a float32 array of shape (N, H, W, C) with values in [0, 1]. Datasets are
    never modified in place, derived datasets (subsets, deduplicated or canary-inserted versions)
    are new objects whose provenance links to the original.

    Parameters
    ----------
    images : array_like
        Array of shape (N, H, W, C).
    labels : array_like, optional
        Class id of each image.
    num_classes : int, optional
        Number of classes. If None and `labels` is given, it is set to max(labels)+1.
    provenance : dict, optional
        Information about the origin of the data (source file, record offsets, parent dataset
        and operation).

    Attributes
    ----------
    images : ndarray
        The pixel values.
    labels : ndarray or None
        The class ids.
    ids : ndarray
        Stable dense ids 0..N-1.
    num_classes : int
        Number of classes, 0 if the dataset is unlabeled.
    provenance : dict
        Information about the origin of the data.
    shape : tuple of int
        Shape (H, W, C) of each image.
    """

    def __init__(self, images, labels=None, num_classes=None, provenance=None):

        images = np.array(images, dtype=np.float32)
        if images.ndim!=4:
            raise ArgumentError(f'`images` must have shape (N, H, W, C), got {images.shape}')
        if images.size>0 and (images.min()<0 or images.max()>1):
            raise ArgumentError('Image values must be in [0, 1]')

        if labels is not None:
            labels = np.array(labels, dtype=np.int64)
            if labels.shape!=(len(images),):
                raise ArgumentError('`labels` must contain one entry per image')
            if num_classes is None:
                num_classes = int(labels.max())+1 if len(labels)>0 else 0
            if len(labels)>0 and (labels.min()<0 or labels.max()>=num_classes):
                raise ArgumentError(f'Labels must be in [0, {num_classes})')
        elif num_classes is None:
            num_classes = 0

        if provenance is None:
            provenance = {}

        images.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)

        self.images = images
        self.labels = labels
        self.ids = np.arange(len(images))
        self.num_classes = int(num_classes)
        self.provenance = provenance
        self.shape = tuple(images.shape[1:])

    def __len__(self):

        return len(self.images)

    def label_of(self, idx):
        """Class id of image `idx`, or None for unlabeled datasets."""

        if self.labels is None:
            return None
        return int(self.labels[idx])

    def subset(self, ids, operation='subset'):
        """Create a new dataset containing the images with the given ids. Ids of the new dataset
        are dense again; the ids in the original dataset are stored in provenance['parent_ids'].

        Parameters
        ----------
        ids : array_like of int
            Ids to keep, in the desired order.
        operation : str
            Name of the operation recorded in the provenance.

        Returns
        -------
        Dataset
            The new dataset.
        """

        ids = np.asarray(ids, dtype=np.int64)
        if ids.size>0 and (ids.min()<0 or ids.max()>=len(self)):
            raise ArgumentError('Subset ids out of range')

        labels = None if self.labels is None else self.labels[ids]
        provenance = {'operation': operation, 'parent': self.provenance.get('source'),
                      'parent_ids': ids.tolist()}

        return Dataset(self.images[ids], labels, self.num_classes, provenance)

    def concat(self, images, labels=None, operation='concat'):
        """Create a new dataset with `images` appended at the end.

        Parameters
        ----------
        images : array_like
            Array of shape (M, H, W, C).
        labels : array_like, optional
            Labels of the new images. Required if the dataset is labeled.
        operation : str
            Name of the operation recorded in the provenance.

        Returns
        -------
        Dataset
            The new dataset.
        """

        images = np.asarray(images, dtype=np.float32)
        if images.shape[1:]!=self.shape:
            raise ArgumentError(f'Cannot append images of shape {images.shape[1:]} to {self.shape}')

        if self.labels is None:
            new_labels = None
        else:
            if labels is None:
                raise ArgumentError('Labels are required when appending to a labeled dataset')
            new_labels = np.concatenate((self.labels, np.asarray(labels, dtype=np.int64)))

        provenance = {'operation': operation, 'parent': self.provenance.get('source'),
                      'parent_size': len(self)}

        return Dataset(np.concatenate((self.images, images)), new_labels, self.num_classes,
                       provenance)

    def copy(self):
        """Copy the dataset. The provenance dictionary is also copied."""

        return Dataset(self.images.copy(), None if self.labels is None else self.labels.copy(),
                       self.num_classes, dict(self.provenance))

    def get_info(self):
        """Return string containing information about the dataset."""

        repr_str = f'Source: {self.provenance.get("source")}\n'
        repr_str += f'Size: {len(self)}\n'
        repr_str += f'Image shape: {self.shape}\n'
        repr_str += f'Classes: {self.num_classes}\n'

        return repr_str

    def __repr__(self):

        return self.get_info()

def make_toy_dataset(n, shape=(16, 16, 3), duplicates=None, num_classes=10, base_grid=4, seed=0):
    """Create a synthetic dataset of smooth random images. Each unique image is a random
    `base_grid` x `base_grid` color pattern upsampled with bilinear interpolation. Planted images
    are exact copies of some unique images.

    Parameters
    ----------
    n : int
        Total number of images, including planted copies.
    shape : tuple of int
        Image shape (H, W, C).
    duplicates : dict, optional
        Maps the index of a unique image to the total number of times it appears in the dataset.
        For instance, {0: 32} results in image 0 appearing 32 times.
    num_classes : int
        Number of classes. Labels are drawn uniformly. If 0, the dataset is unlabeled.
    base_grid : int
        Resolution of the random pattern before upsampling.
    seed : int
        Random seed.

    Returns
    -------
    Dataset
        The dataset. provenance['duplicate_groups'] maps each planted index to the ids of all its
        copies.
    """

    if duplicates is None:
        duplicates = {}
    duplicates = {int(k): int(v) for k, v in duplicates.items()}
    num_extra = sum(count-1 for count in duplicates.values())
    num_unique = n - num_extra
    if num_unique<1 or any(count<1 for count in duplicates.values()):
        raise ArgumentError('Invalid duplicate specification')
    if any(idx>=num_unique for idx in duplicates):
        raise ArgumentError('Duplicated index must refer to a unique image')

    rng = np.random.default_rng(seed)
    height, width, channels = shape
    images = np.empty((num_unique, *shape), dtype=np.float32)
    for idx in range(num_unique):
        pattern = rng.random((base_grid, base_grid, channels))
        images[idx] = resize(pattern, shape, order=1, mode='edge', anti_aliasing=False)
    images = np.clip(images, 0, 1)

    labels = rng.integers(0, num_classes, num_unique) if num_classes>0 else None

    groups = {}
    extra_images = []
    extra_labels = []
    next_id = num_unique
    for idx, count in sorted(duplicates.items()):
        groups[idx] = [idx] + list(range(next_id, next_id+count-1))
        next_id += count-1
        extra_images.extend([images[idx]]*(count-1))
        if labels is not None:
            extra_labels.extend([labels[idx]]*(count-1))

    if extra_images:
        images = np.concatenate((images, np.stack(extra_images)))
        if labels is not None:
            labels = np.concatenate((labels, np.asarray(extra_labels, dtype=labels.dtype)))

    provenance = {'source': f'toy(n={n}, seed={seed})', 'duplicate_groups': groups}

    return Dataset(images, labels, num_classes if num_classes>0 else None, provenance)
