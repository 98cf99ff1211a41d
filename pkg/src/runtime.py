import hashlib
import json
import logging
import os
import platform
import random
import sys

import numpy as np
import torch

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'PHASE_LAB_OUTPUT_ROOT'
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def setup_logging(level='INFO'):
    """Configure the root logger once for command-line runs"""
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.INFO),
                        format=LOG_FORMAT, stream=sys.stderr, force=True)


def set_seed(seed):
    """Seed every random number generator the pipeline touches"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def derive_seed(*parts):
    """Stable 63-bit seed from a tuple of integers/strings"""
    text = '/'.join(str(p) for p in parts).encode('utf-8')
    return int.from_bytes(hashlib.sha256(text).digest()[:8], 'little') & ((1 << 63) - 1)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), default=str)


def config_digest(obj):
    """SHA-256 of the canonical JSON form of a config mapping"""
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def package_versions():
    versions = {'python': platform.python_version()}
    for name in ('numpy', 'scipy', 'pandas', 'matplotlib', 'torch', 'torchvision'):
        module = sys.modules.get(name)
        if module is None:
            try:
                module = __import__(name)
            except ImportError:
                continue
        versions[name] = getattr(module, '__version__', 'unknown')
    return versions


def resolve_output_root(configured):
    """The environment variable wins over the configured output root"""
    return os.environ.get(OUTPUT_ROOT_ENV) or configured


def write_manifest(out_dir, command, config, seed, argv=None, extra=None):
    """
    Write manifest.json beside a command's outputs.
    Holds enough to re-run the command: argv, full config, digest, seed, versions.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        'command': command,
        'argv': list(argv) if argv is not None else None,
        'config': config,
        'config_digest': config_digest(config),
        'seed': seed,
        'versions': package_versions(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    logger.debug('Wrote manifest %s', path)
    return path
