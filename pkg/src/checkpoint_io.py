"""
Checkpoint container shared by both stages: one zip archive holding a JSON
manifest and a torch-serialized tensor dictionary.
"""
import io
import json
import logging
import os
import zipfile

import torch

from errors import DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
TENSORS_NAME = 'tensors.pt'
FORMAT_VERSION = 1


def save_checkpoint(path, tensors, manifest):
    """
    Write `tensors` (nested dict of tensors and primitives) and `manifest`
    (JSON-serializable) to `path`. The file is replaced atomically.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    buffer = io.BytesIO()
    torch.save(tensors, buffer)
    manifest = dict(manifest, format_version=FORMAT_VERSION)

    tmp_path = path + '.tmp'
    with zipfile.ZipFile(tmp_path, 'w', compression=zipfile.ZIP_STORED) as archive:
        archive.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True, default=str))
        archive.writestr(TENSORS_NAME, buffer.getvalue())
    os.replace(tmp_path, path)
    logger.info('Saved checkpoint %s', path)
    return path


def read_manifest(path):
    if not os.path.exists(path):
        raise DataError(f'Checkpoint not found: {path}')
    try:
        with zipfile.ZipFile(path, 'r') as archive:
            return json.loads(archive.read(MANIFEST_NAME))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f'{path}: not a checkpoint archive ({e})') from e


def load_checkpoint(path):
    """Returns (tensors, manifest)"""
    manifest = read_manifest(path)
    if manifest.get('format_version') != FORMAT_VERSION:
        raise DataError(f'{path}: unsupported checkpoint version {manifest.get("format_version")}')
    with zipfile.ZipFile(path, 'r') as archive:
        payload = archive.read(TENSORS_NAME)
    tensors = torch.load(io.BytesIO(payload), map_location='cpu', weights_only=True)
    return tensors, manifest
