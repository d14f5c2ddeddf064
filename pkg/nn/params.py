"""
Binary parameter files.

Layout (all little-endian):

    offset  size  field
    0       4     magic b"EURN"
    4       4     version (uint32) = 1
    8       72    config: depth, width, num_classes, input_dim, seed,
                  use_bn, identity_embed, init_rule, activation   (9 x int64)
    80      16    config: h, init_gain                            (2 x float64)
    96      8     value count V (uint64)
    104     8*V   values (float64): every trainable parameter in
                  Network.named_parameters() order (rows of W row-major),
                  then BN running_mean / running_var per block
    104+8V  32    SHA-256 of all preceding bytes
"""
import hashlib
import logging
import os
import struct

import numpy as np

from errors import ConfigError
from nn.layers import Network, NetworkConfig

log = logging.getLogger(__name__)

MAGIC = b"EURN"
VERSION = 1
_HEADER = struct.Struct("<4sI9q2dQ")
_INIT_RULES = ["variance_preserving", "zero_residual"]
_ACTIVATIONS = ["relu", "identity"]


def _arrays(net):
    return [v for _, v, _ in net.named_parameters()] + [v for _, v in net.buffers()]


def encode(net):
    c = net.config
    values = np.concatenate([a.ravel() for a in _arrays(net)]) if _arrays(net) else np.zeros(0)
    header = _HEADER.pack(
        MAGIC, VERSION,
        c.depth, c.width, c.num_classes, c.input_dim, c.seed,
        int(c.use_bn), int(c.identity_embed),
        _INIT_RULES.index(c.init_rule), _ACTIVATIONS.index(c.activation),
        c.h, c.init_gain,
        values.size,
    )
    body = header + values.astype("<f8").tobytes()
    return body + hashlib.sha256(body).digest()


def decode(blob, expected_config=None):
    if len(blob) < _HEADER.size + 32:
        raise ConfigError("parameter file is truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ConfigError("parameter file hash mismatch")
    (magic, version, depth, width, num_classes, input_dim, seed, use_bn, identity_embed,
     init_rule, activation, h, init_gain, count) = _HEADER.unpack_from(body)
    if magic != MAGIC or version != VERSION:
        raise ConfigError(f"not a parameter file (magic={magic!r}, version={version})")

    config = NetworkConfig(
        depth=depth, width=width, num_classes=num_classes, input_dim=input_dim,
        seed=seed, use_bn=bool(use_bn), identity_embed=bool(identity_embed),
        init_rule=_INIT_RULES[init_rule], activation=_ACTIVATIONS[activation],
        h=h, init_gain=init_gain,
    )
    if expected_config is not None and config != expected_config:
        raise ConfigError(
            f"parameter file config does not match the experiment: {config} != {expected_config}"
        )

    net = Network(config)
    if config.identity_embed:
        net.input_embed.W[...] = np.eye(config.width)
    values = np.frombuffer(body, dtype="<f8", offset=_HEADER.size)
    arrays = _arrays(net)
    if values.size != count or count != sum(a.size for a in arrays):
        raise ConfigError(
            f"parameter file holds {values.size} values, config needs "
            f"{sum(a.size for a in arrays)}"
        )
    pos = 0
    for a in arrays:
        a[...] = values[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return net


def save_params(net, filepath):
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, "wb") as f:
        f.write(encode(net))
    log.info(f"Saved {net.parameter_count()} parameters to {filepath}")
    return filepath


def load_params(filepath, expected_config=None):
    with open(filepath, "rb") as f:
        blob = f.read()
    net = decode(blob, expected_config)
    log.info(f"Loaded network D={net.config.depth} h={net.config.h} from {filepath}")
    return net
