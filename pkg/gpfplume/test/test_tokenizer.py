import numpy as np
import pytest

from gpfplume.tokenizer import quantize_concentration, quantize_wind, encode_onehot, decode_onehot, all_tokens, \
    serialize_episode, parse_episode, to_ids, from_ids, write_token_file, read_token_file, tokenize_observation, \
    ObservationToken, ActionToken, Special, DEFAULT_EDGES, VOCAB_SIZE
from gpfplume.env import RawObservation
from gpfplume.util import GrammarError


def test_concentration_bins():
    assert quantize_concentration(1e-4) == 0
    assert quantize_concentration(0.05) == 4
    assert quantize_concentration(0.7) == 6
    np.testing.assert_allclose(DEFAULT_EDGES, [0.003, 0.006, 0.015, 0.045, 0.15, 0.6])
    # an edge value belongs to the lower bin
    for k, e in enumerate(DEFAULT_EDGES):
        assert quantize_concentration(e) == k
        assert quantize_concentration(np.nextafter(e, 1.0)) == k + 1
    with pytest.raises(ValueError):
        quantize_concentration(float('nan'))


def test_bins_are_monotone():
    cs = np.sort(np.random.default_rng(0).uniform(0, 1, 2000) ** 4)
    bins = [quantize_concentration(c) for c in cs]
    assert np.all(np.diff(bins) >= 0)


def test_wind_octants():
    assert quantize_wind(0.0, 1.0) == 0
    assert quantize_wind(2.0, 0.01) == 0
    # 90 degrees clockwise of the heading is negative in the counter-clockwise agent frame
    assert quantize_wind(-np.pi / 2, 1.0) == 2
    assert quantize_wind(np.pi / 2, 1.0) == 6
    assert quantize_wind(np.pi, 1.0) == 4
    assert quantize_wind(-np.radians(22.4), 1.0) == 0
    assert quantize_wind(np.radians(22.4), 1.0) == 0
    assert quantize_wind(-np.radians(22.6), 1.0) == 1


def test_wind_octant_edges():
    # an angle on an edge belongs to the octant counter-clockwise of it
    assert quantize_wind(-np.radians(22.5), 1.0) == 0
    assert quantize_wind(-np.radians(67.5), 1.0) == 1
    assert quantize_wind(-np.radians(157.5), 1.0) == 3
    assert quantize_wind(np.radians(22.5), 1.0) == 7
    assert quantize_wind(np.radians(157.5), 1.0) == 4
    assert quantize_wind(-np.pi, 1.0) == 4


def test_tokenize_observation():
    raw = RawObservation(left_conc=1e-4, right_conc=0.05, wind_speed=1.0, wind_dir_rel=-np.pi / 2, distance=3.0)
    assert tokenize_observation(raw) == ObservationToken(0, 4, 2)


def test_onehot():
    x = encode_onehot(ObservationToken(0, 0, 0))
    assert set(np.flatnonzero(x)) == {0, 7, 14}
    x = encode_onehot(ObservationToken(3, 0, 2))
    assert set(np.flatnonzero(x)) == {3, 7, 16}
    with pytest.raises(ValueError):
        encode_onehot(ObservationToken(7, 0, 0))


def test_onehot_bijection():
    """
    all 392 tokens map to distinct vectors with exactly three ones and decode back
    """
    toks = all_tokens()
    assert len(toks) == 392
    vecs = np.array([encode_onehot(t) for t in toks])
    assert vecs.shape == (392, 22)
    np.testing.assert_array_equal(vecs.sum(axis=1), 3)
    assert len({v.tobytes() for v in vecs}) == 392
    assert [decode_onehot(v) for v in vecs] == toks


def test_serialize_lengths():
    o = ObservationToken(1, 2, 3)
    assert serialize_episode([o], []) == [Special.BOS, o, Special.EOS]
    seq = serialize_episode([o, o, o], [0, 5])
    assert len(seq) == 7
    with pytest.raises(ValueError):
        serialize_episode([o, o], [0, 1])


def _random_episode(rng):
    T = int(rng.integers(0, 40))
    obs = [ObservationToken(int(rng.integers(7)), int(rng.integers(7)), int(rng.integers(8))) for _ in range(T + 1)]
    acts = [int(rng.integers(6)) for _ in range(T)]
    resets = sorted(set(int(t) for t in rng.integers(1, T + 1, size=2))) if T > 0 else []
    return(obs, acts, resets)


def test_round_trip_random_episodes():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        obs, acts, resets = _random_episode(rng)
        seq = serialize_episode(obs, acts, resets)
        assert parse_episode(seq) == (obs, acts, resets)
        ids = to_ids(seq)
        assert all(0 <= i < VOCAB_SIZE for i in ids)
        assert from_ids(ids) == seq


def test_grammar_errors():
    o = ObservationToken(0, 0, 0)
    with pytest.raises(GrammarError):
        parse_episode([o, Special.EOS])
    with pytest.raises(GrammarError):
        parse_episode([Special.BOS, o, o, Special.EOS])
    with pytest.raises(GrammarError):
        parse_episode([Special.BOS, o, ActionToken(1), Special.EOS])
    with pytest.raises(GrammarError):
        parse_episode([Special.BOS, Special.RESET, o, Special.EOS])
    with pytest.raises(GrammarError):
        parse_episode([Special.BOS, o, Special.PAD, Special.EOS])
    with pytest.raises(GrammarError):
        from_ids([29, 0, 30])
    with pytest.raises(GrammarError):
        from_ids([40])


def test_token_file(tmp_path):
    rng = np.random.default_rng(9)
    episodes = [serialize_episode(*_random_episode(rng)) for _ in range(20)]
    path = write_token_file(episodes, tmp_path / 'tokens.txt')
    lines = open(path).read().strip().split('\n')
    assert len(lines) == 20
    assert read_token_file(path) == episodes
