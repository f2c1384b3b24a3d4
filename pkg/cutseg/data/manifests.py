"""
Subject manifests and PNG slice/mask files.

A manifest is a JSON file::

    {"subject_id": "s01", "modality": "t2",
     "slices": ["s01/0000.png", ...],
     "masks": ["s01_masks/0000.png", ...]}

with paths relative to the manifest's directory. Slices are stored as 8-bit
grayscale PNG with value v written as round(v * 255); masks are 8-bit PNG
with values {0, 255}.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from PIL import Image

from cutseg.data.images import Mask, Slice, quantize
from cutseg.errors import ManifestError

logger = logging.getLogger(__name__)


@dataclass
class SubjectRecord:
    """Verified file listing for one subject."""
    subject_id: str
    slice_paths: List[str]
    mask_paths: Optional[List[str]] = None
    modality: str = ''
    manifest_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if (self.mask_paths is not None and
                len(self.mask_paths) != len(self.slice_paths)):
            raise ManifestError(
                f'subject {self.subject_id!r} lists {len(self.slice_paths)} '
                f'slices but {len(self.mask_paths)} masks')

    def to_dict(self, relative_to=None):
        def rel(p):
            return os.path.relpath(p, relative_to) if relative_to else p
        out = {'subject_id': self.subject_id, 'modality': self.modality,
               'slices': [rel(p) for p in self.slice_paths]}
        if self.mask_paths is not None:
            out['masks'] = [rel(p) for p in self.mask_paths]
        return out


def _missing(path):
    return FileNotFoundError(2, 'No such file', path)


def load_subject(manifest_path):
    """Reads a manifest and checks that every listed file exists.

    Parameters
    ----------
    manifest_path : str
      path to the JSON manifest

    Returns
    -------
    record : SubjectRecord
      with absolute, verified paths
    """
    if not os.path.isfile(manifest_path):
        raise _missing(manifest_path)
    try:
        with open(manifest_path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestError(f'{manifest_path}: not valid JSON ({exc})')
    if not isinstance(data, dict):
        raise ManifestError(f'{manifest_path}: expected a JSON object')
    for key in ('subject_id', 'slices'):
        if key not in data:
            raise ManifestError(f'{manifest_path}: missing "{key}"')
    if not isinstance(data['slices'], list):
        raise ManifestError(f'{manifest_path}: "slices" must be a list')

    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(paths):
        out = []
        for p in paths:
            full = os.path.normpath(os.path.join(base, p))
            if not os.path.isfile(full):
                raise _missing(full)
            out.append(full)
        return out

    masks = data.get('masks')
    if masks is not None and len(masks) != len(data['slices']):
        raise ManifestError(
            f'{manifest_path}: {len(data["slices"])} slices but '
            f'{len(masks)} masks')
    record = SubjectRecord(
        subject_id=str(data['subject_id']),
        slice_paths=resolve(data['slices']),
        mask_paths=resolve(masks) if masks is not None else None,
        modality=str(data.get('modality', '')),
        manifest_path=os.path.abspath(manifest_path))
    logger.debug('loaded manifest %s (%d slices)', manifest_path,
                 len(record.slice_paths))
    return record


def write_manifest(record, path):
    """Writes `record` as a manifest whose paths are relative to `path`."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, 'w') as f:
        json.dump(record.to_dict(relative_to=base), f, indent=2,
                  sort_keys=True)
        f.write('\n')


def write_slice_png(image, path):
    Image.fromarray(quantize(image.pixels)).save(path)


def read_png_pixels(path):
    """Reads an 8-bit grayscale PNG as float intensities in [0, 1]."""
    if not os.path.isfile(path):
        raise _missing(path)
    with Image.open(path) as im:
        raw = np.asarray(im.convert('L'), dtype=np.float32)
    return raw / 255.0


def read_slice_png(path, subject_id='', index=0):
    return Slice(read_png_pixels(path), subject_id, index)


def write_mask_png(mask, path):
    pixels = np.where(mask.pixels, 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def read_mask_png(path, subject_id='', index=0):
    if not os.path.isfile(path):
        raise _missing(path)
    with Image.open(path) as im:
        raw = np.asarray(im.convert('L'))
    return Mask(raw > 127, subject_id, index)


def write_mask_dir(masks, root):
    """Writes masks as ``root/<subject_id>/<index:04d>.png``.

    Returns
    -------
    paths : list of str
    """
    paths = []
    for mask in masks:
        subject_dir = os.path.join(root, mask.subject_id)
        os.makedirs(subject_dir, exist_ok=True)
        paths.append(os.path.join(subject_dir, f'{mask.index:04d}.png'))
        write_mask_png(mask, paths[-1])
    return paths


def read_mask_dir(root):
    """Reads every mask written by `write_mask_dir` under `root`, ordered by
    subject and index."""
    if not os.path.isdir(root):
        raise FileNotFoundError(2, 'No such directory', root)
    masks = []
    for subject_id in sorted(os.listdir(root)):
        subject_dir = os.path.join(root, subject_id)
        if not os.path.isdir(subject_dir):
            continue
        for name in sorted(os.listdir(subject_dir)):
            stem, ext = os.path.splitext(name)
            if ext.lower() != '.png' or not stem.isdigit():
                continue
            masks.append(read_mask_png(os.path.join(subject_dir, name),
                                       subject_id, int(stem)))
    return masks
