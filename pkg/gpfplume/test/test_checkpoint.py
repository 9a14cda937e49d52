import numpy as np
import pytest

from gpfplume.config import GpfConfig
from gpfplume import gpf
from gpfplume.checkpoint import save_checkpoint, load_checkpoint, to_bytes, from_bytes, MAGIC, FORMAT_VERSION
from gpfplume.util import CheckpointError


def _trained_net(seed=0):
    """
    a grown, pruned and partly frozen network with live Adam moments
    """
    net = gpf.build_network(GpfConfig(hidden_width=16), seed=seed, hidden_layers=2)
    opt = gpf.GpfOptimizer(net)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        q, cache = gpf.forward(net, rng.normal(size=22))
        _, g = gpf.td_loss_grad(q, int(rng.integers(6)), float(rng.normal()))
        gpf.backward_and_step(net, cache, g, opt)
    gpf.update_beliefs(net, 1)
    gpf.update_stability(net, 1)
    gpf.prune(net)
    net.layers[0].frozen = True
    net.tracker.best = 0.25
    net.tracker.last_improve = 500
    gpf.grow(net, 1000)
    return(net, opt.export())


def test_save_load_save_is_byte_identical(tmp_path):
    net, adam = _trained_net()
    meta = {'episode': 1000, 'score': 0.5}
    p1 = save_checkpoint(tmp_path / 'a.ckpt', net, adam, meta)
    ck = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / 'b.ckpt', ck.net, ck.adam, ck.meta)
    assert open(p1, 'rb').read() == open(p2, 'rb').read()


def test_round_trip_state():
    net, adam = _trained_net(1)
    ck = from_bytes(to_bytes(net, adam, {'episode': 7}))
    assert ck.meta == {'episode': 7}
    assert ck.net.hidden_layers == net.hidden_layers
    assert ck.net.next_uid == net.next_uid
    assert ck.net.tracker == net.tracker
    for a, b in zip(net.layers, ck.net.layers):
        assert a.uid == b.uid and a.frozen == b.frozen
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.h, b.h)
        np.testing.assert_array_equal(a.stable_since, b.stable_since)
        assert adam.t[a.uid] == ck.adam.t[b.uid]
        np.testing.assert_array_equal(adam.m[a.uid][0], ck.adam.m[b.uid][0])
        np.testing.assert_array_equal(adam.v[a.uid][1], ck.adam.v[b.uid][1])
    x = np.random.default_rng(2).normal(size=(4, 22))
    np.testing.assert_array_equal(gpf.q_values(net, x), gpf.q_values(ck.net, x))
    # the growth RNG continues where it left off
    assert net.rng.random() == ck.net.rng.random()


def test_header():
    net, adam = _trained_net()
    head = np.frombuffer(to_bytes(net, adam)[:12], dtype='<i4')
    assert list(head) == [MAGIC, FORMAT_VERSION, len(net.layers)]


def test_bad_magic_and_version():
    net, adam = _trained_net()
    buf = bytearray(to_bytes(net, adam))
    bad = bytearray(buf)
    bad[0:4] = np.array([1234], dtype='<i4').tobytes()
    with pytest.raises(CheckpointError, match='magic'):
        from_bytes(bytes(bad))
    bad = bytearray(buf)
    bad[4:8] = np.array([FORMAT_VERSION + 1], dtype='<i4').tobytes()
    with pytest.raises(CheckpointError, match='version'):
        from_bytes(bytes(bad))


def test_truncated_and_trailing():
    net, adam = _trained_net()
    buf = to_bytes(net, adam)
    for cut in (5, 40, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointError):
            from_bytes(buf[:cut])
    with pytest.raises(CheckpointError, match='trailing'):
        from_bytes(buf + b'\x00')


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'nope.ckpt')


def test_resumed_training_matches_uninterrupted():
    net, _ = _trained_net(3)
    opt = gpf.GpfOptimizer(net)
    rng = np.random.default_rng(5)
    batch = [(rng.normal(size=22), int(rng.integers(6)), float(rng.normal())) for _ in range(30)]

    def steps(n, o, items):
        for x, a, y in items:
            q, cache = gpf.forward(n, x)
            _, g = gpf.td_loss_grad(q, a, y)
            gpf.backward_and_step(n, cache, g, o)

    steps(net, opt, batch[:10])
    ck = from_bytes(to_bytes(net, opt.export()))
    resumed = gpf.GpfOptimizer(ck.net, ck.adam)
    steps(net, opt, batch[10:])
    steps(ck.net, resumed, batch[10:])
    for a, b in zip(net.layers, ck.net.layers):
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.b, b.b)
    assert opt.export().t == resumed.export().t
