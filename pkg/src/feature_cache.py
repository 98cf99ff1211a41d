import json
import logging
import os
import struct

import numpy as np

from errors import CacheFormatError, DataError

logger = logging.getLogger(__name__)

MAGIC = b'PHFC'
CACHE_VERSION = 1
INDEX_NAME = 'index.json'
SUPPORTED_DTYPES = ('float32', 'float64')
# magic, version, header length
_PREAMBLE = struct.Struct('<4sII')


class FeatureCache:
    """
    On-disk per-video frame features.

    One `<video_id>.feat` file per video: magic, format version, a JSON header
    (video_id, d, length, dtype, version), the T x d feature matrix in row-major
    order, then the T int64 phase labels. `index.json` lists completed entries.
    Writes go through a temporary file and a rename, so an entry is either
    complete or absent.
    """

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._index_path = os.path.join(root, INDEX_NAME)
        self.index = self._read_index()

    def _read_index(self):
        if not os.path.exists(self._index_path):
            return {}
        try:
            with open(self._index_path, 'r') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise CacheFormatError(f'{self._index_path}: corrupt cache index ({e})') from e

    def _write_index(self):
        tmp = self._index_path + '.tmp'
        with open(tmp, 'w') as f:
            json.dump(self.index, f, indent=2, sort_keys=True)
        os.replace(tmp, self._index_path)

    def path_for(self, video_id):
        return os.path.join(self.root, f'{video_id}.feat')

    def video_ids(self):
        return sorted(self.index)

    def has_entry(self, video_id, length=None, d=None, source=None):
        entry = self.index.get(video_id)
        if entry is None or not os.path.exists(self.path_for(video_id)):
            return False
        if length is not None and entry['length'] != length:
            return False
        if source is not None and entry.get('source') != source:
            return False
        return d is None or entry['d'] == d

    def feature_dim(self):
        dims = {entry['d'] for entry in self.index.values()}
        if len(dims) > 1:
            raise CacheFormatError(f'{self.root}: mixed feature widths {sorted(dims)}')
        return dims.pop() if dims else None

    def write(self, video_id, features, labels, source=None):
        features = np.ascontiguousarray(features)
        labels = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise DataError(f'Features for {video_id} must be T x d, got {features.shape}')
        if features.shape[0] != labels.size:
            raise DataError(f'Features for {video_id}: {features.shape[0]} rows '
                            f'for {labels.size} labels')
        dtype = str(features.dtype)
        if dtype not in SUPPORTED_DTYPES:
            features = features.astype(np.float32)
            dtype = 'float32'

        header = {'video_id': video_id, 'd': int(features.shape[1]),
                  'length': int(features.shape[0]), 'dtype': dtype,
                  'version': CACHE_VERSION}
        header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
        path = self.path_for(video_id)
        tmp = path + '.tmp'
        with open(tmp, 'wb') as f:
            f.write(_PREAMBLE.pack(MAGIC, CACHE_VERSION, len(header_bytes)))
            f.write(header_bytes)
            f.write(features.tobytes(order='C'))
            f.write(labels.tobytes())
        os.replace(tmp, path)

        self.index[video_id] = {'d': header['d'], 'length': header['length'], 'dtype': dtype,
                                'source': source}
        self._write_index()
        logger.debug('Cached %s: %d x %d', video_id, header['length'], header['d'])

    def read(self, video_id):
        """Returns (features T x d, labels T) for one video"""
        path = self.path_for(video_id)
        if not os.path.exists(path):
            raise DataError(f'No cached features for video {video_id} under {self.root}')
        with open(path, 'rb') as f:
            blob = f.read()

        if len(blob) < _PREAMBLE.size:
            raise CacheFormatError(f'{path}: truncated cache file')
        magic, version, header_len = _PREAMBLE.unpack_from(blob)
        if magic != MAGIC:
            raise CacheFormatError(f'{path}: not a feature cache file (bad magic)')
        if version != CACHE_VERSION:
            raise CacheFormatError(f'{path}: cache version {version}, expected {CACHE_VERSION}')
        offset = _PREAMBLE.size
        try:
            header = json.loads(blob[offset:offset + header_len].decode('utf-8'))
            d, length, dtype = int(header['d']), int(header['length']), header['dtype']
        except (ValueError, KeyError, UnicodeDecodeError) as e:
            raise CacheFormatError(f'{path}: corrupt cache header ({e})') from e
        if dtype not in SUPPORTED_DTYPES or header.get('video_id') != video_id:
            raise CacheFormatError(f'{path}: header does not describe {video_id} '
                                   f'with a supported dtype')

        offset += header_len
        feature_bytes = length * d * np.dtype(dtype).itemsize
        if len(blob) != offset + feature_bytes + length * 8:
            raise CacheFormatError(f'{path}: size does not match header '
                                   f'({length} x {d} {dtype})')
        features = np.frombuffer(blob, dtype=dtype, count=length * d, offset=offset)
        labels = np.frombuffer(blob, dtype=np.int64, count=length, offset=offset + feature_bytes)
        return features.reshape(length, d).copy(), labels.copy()

    def require(self, video_ids):
        missing = [vid for vid in video_ids if not self.has_entry(vid)]
        if missing:
            raise DataError(f'Feature cache {self.root} is missing videos: {missing}')
