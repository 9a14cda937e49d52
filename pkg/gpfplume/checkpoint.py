"""
Binary checkpoint of a GPF network, its Adam state and run metadata.

Layout (all little-endian, see docs/formats.rst):

    header      int32[3]   magic, format version, layer count
    per layer   int32[4]   uid, fan_out, fan_in, frozen flag
    per layer   W, b, h (float64), mask (np.packbits, uint8), stab_min, stab_max (float64),
                stable_since (int64), Adam step count (int64), mW, mb, vW, vb (float64), the
                torch.optim.Adam exp_avg and exp_avg_sq of weight and bias
    meta        int64 byte length, then UTF-8 JSON with sorted keys: plateau tracker,
                next uid, growth RNG state, GpfConfig, Adam hyperparameters and any
                caller metadata (episode, eval score, run config, agent RNG state)

The encoding is canonical, so save(load(save(x))) reproduces the same bytes.
"""
from dataclasses import dataclass, asdict, field
import json
import logging
import numpy as np

from gpfplume.config import GpfConfig
from gpfplume.gpf import GpfNetwork, GpfLayer, AdamState, PlateauTracker
from gpfplume.util import CheckpointError

logger = logging.getLogger('gpfplume')

MAGIC = 20240917
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net: GpfNetwork
    adam: AdamState
    meta: dict = field(default_factory=dict)


def _f8(a):
    return(np.ascontiguousarray(a, dtype='<f8').tobytes())


def _i8(a):
    return(np.ascontiguousarray(a, dtype='<i8').tobytes())


def rng_state(rng: np.random.Generator) -> dict:
    return(rng.bit_generator.state)


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state['bit_generator'])()
    bitgen.state = state
    return(np.random.Generator(bitgen))


def to_bytes(net: GpfNetwork, adam: AdamState, meta=None) -> bytes:
    parts = [np.array([MAGIC, FORMAT_VERSION, len(net.layers)], dtype='<i4').tobytes()]
    for layer in net.layers:
        out_dim, in_dim = layer.W.shape
        parts.append(np.array([layer.uid, out_dim, in_dim, int(layer.frozen)], dtype='<i4').tobytes())
    for layer in net.layers:
        parts.append(_f8(layer.W))
        parts.append(_f8(layer.b))
        parts.append(_f8(layer.h))
        parts.append(np.packbits(layer.mask.ravel()).tobytes())
        parts.append(_f8(layer.stab_min))
        parts.append(_f8(layer.stab_max))
        parts.append(_i8(layer.stable_since))
        (mW, mb), (vW, vb) = adam.moments(layer)
        parts.append(_i8([adam.t[layer.uid]]))
        for arr in (mW, mb, vW, vb):
            parts.append(_f8(arr))
    doc = {'tracker': asdict(net.tracker),
           'next_uid': net.next_uid,
           'version': net.version,
           'rng': rng_state(net.rng),
           'gpf_config': asdict(net.config),
           'adam': {'lr': adam.lr, 'beta1': adam.beta1, 'beta2': adam.beta2, 'eps': adam.eps},
           'meta': {} if meta is None else meta}
    blob = json.dumps(doc, sort_keys=True).encode('utf-8')
    parts.append(_i8([len(blob)]))
    parts.append(blob)
    return(b''.join(parts))


class _Reader:

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f'checkpoint truncated: need {n} bytes at offset {self.pos}, '
                                  f'file has {len(self.buf)}')
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return(chunk)

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return(np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder('=')))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic, version, n_layers = r.array('<i4', (3,))
    if magic != MAGIC:
        raise CheckpointError('not a GPF checkpoint (magic number mismatch)')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'unsupported checkpoint version {version}, expected {FORMAT_VERSION}')
    if n_layers < 2:
        raise CheckpointError(f'checkpoint declares {n_layers} layers')
    descr = [r.array('<i4', (4,)) for _ in range(n_layers)]

    layers = []
    adam_arrays = []
    for uid, out_dim, in_dim, frozen in descr:
        shape = (int(out_dim), int(in_dim))
        W = r.array('<f8', shape)
        b = r.array('<f8', (shape[0],))
        h = r.array('<f8', shape)
        nbytes = (shape[0] * shape[1] + 7) // 8
        bits = np.frombuffer(r.take(nbytes), dtype=np.uint8)
        mask = np.unpackbits(bits, count=shape[0] * shape[1]).astype(bool).reshape(shape)
        layer = GpfLayer(uid=int(uid), W=W, b=b, h=h, mask=mask, frozen=bool(frozen),
                         stab_min=r.array('<f8', shape), stab_max=r.array('<f8', shape),
                         stable_since=r.array('<i8', shape))
        t = int(r.array('<i8', (1,))[0])
        moments = [r.array('<f8', s) for s in (shape, (shape[0],), shape, (shape[0],))]
        layers.append(layer)
        adam_arrays.append((layer.uid, t, moments))

    n_meta = int(r.array('<i8', (1,))[0])
    try:
        doc = json.loads(r.take(n_meta).decode('utf-8'))
    except ValueError as exc:
        raise CheckpointError('checkpoint metadata is not valid JSON') from exc
    if r.pos != len(buf):
        raise CheckpointError(f'{len(buf) - r.pos} trailing bytes after checkpoint payload')

    config = GpfConfig(**doc['gpf_config'])
    net = GpfNetwork(layers=layers, config=config, rng=rng_from_state(doc['rng']),
                     tracker=PlateauTracker(**doc['tracker']), next_uid=doc['next_uid'],
                     version=doc['version'])
    adam = AdamState(**doc['adam'])
    for uid, t, (mW, mb, vW, vb) in adam_arrays:
        adam.m[uid] = (mW, mb)
        adam.v[uid] = (vW, vb)
        adam.t[uid] = t
    return(Checkpoint(net=net, adam=adam, meta=doc['meta']))


def save_checkpoint(path, net: GpfNetwork, adam: AdamState, meta=None):
    """
    :param path: output file
    :param meta: JSON-serialisable dict stored alongside the network
    """
    buf = to_bytes(net, adam, meta)
    with open(path, 'wb') as fh:
        fh.write(buf)
    logger.info(f'wrote checkpoint {path} ({len(buf)} bytes, {len(net.layers) - 1} hidden layers)')
    return(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, 'rb') as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError('cannot read checkpoint: ' + str(exc)) from exc
    return(from_bytes(buf))
