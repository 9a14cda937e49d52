"""
Observation tokenizer and episode serialization.

A raw bilateral reading becomes (b_left, b_right, wind_octant) in 7 x 7 x 8 = 392 states,
fed to the Q-network as a 22-dim one-hot (7 + 7 + 8, in that order). Episodes are written as
BOS o_0 a_0 ... o_{T-1} a_{T-1} o_T EOS over a flat 32-id vocabulary:

    0-6    left concentration bin
    7-13   right concentration bin
    14-21  wind octant
    22-27  action
    28 PAD, 29 BOS, 30 EOS, 31 RESET
"""
from enum import IntEnum
from typing import NamedTuple
import logging
import numpy as np

from gpfplume.util import GrammarError

logger = logging.getLogger('gpfplume')

BIN_MULTIPLIERS = (3.0, 6.0, 15.0, 45.0, 150.0, 600.0)
N_BINS = 7
N_OCTANTS = 8
N_ACTIONS = 6
ONEHOT_DIM = N_BINS + N_BINS + N_OCTANTS

LEFT_OFFSET = 0
RIGHT_OFFSET = 7
WIND_OFFSET = 14
ACTION_OFFSET = 22
VOCAB_SIZE = 32


class Special(IntEnum):
    PAD = 28
    BOS = 29
    EOS = 30
    RESET = 31


class ObservationToken(NamedTuple):
    b_left: int
    b_right: int
    wind: int


class ActionToken(NamedTuple):
    action: int


def bin_edges(noise_std=1e-3):
    """ absolute concentration edges e_k = m_k * noise_std """
    return(np.array(BIN_MULTIPLIERS) * noise_std)


DEFAULT_EDGES = bin_edges()


def quantize_concentration(c, edges=DEFAULT_EDGES) -> int:
    """
    bin 0 if c <= e_0, bin k if e_{k-1} < c <= e_k, bin 6 if c > e_5

    :param c: concentration
    :param edges: the six ascending edges
    """
    c = float(c)
    if np.isnan(c):
        raise ValueError('concentration is NaN')
    return(int(np.searchsorted(edges, c, side='left')))


def quantize_wind(dir_rel, speed, calm_threshold=0.05) -> int:
    """
    octant of the wind arrival direction, relative to heading.
    Octant 0 is a headwind, octants increase clockwise, each covers 45 degrees centred on
    k * 45. An angle on an edge goes to the lower octant, the one counter-clockwise of the
    edge, so octant k is (k * 45 - 22.5, k * 45 + 22.5] and -22.5 reads octant 7.
    Angles within 1e-9 degrees of an edge count as on it.

    :param dir_rel: arrival direction in the agent frame, radians, counter-clockwise positive
    :param speed: wind speed, below calm_threshold the octant is 0
    """
    if speed < calm_threshold:
        return(0)
    clockwise_deg = round(float(np.degrees(-float(dir_rel))), 9)
    octant = int(np.ceil((clockwise_deg - 22.5) / 45.0))
    return(octant % N_OCTANTS)


def tokenize_observation(raw, edges=DEFAULT_EDGES, calm_threshold=0.05) -> ObservationToken:
    """
    :param raw: env.RawObservation
    """
    return(ObservationToken(quantize_concentration(raw.left_conc, edges),
                            quantize_concentration(raw.right_conc, edges),
                            quantize_wind(raw.wind_dir_rel, raw.wind_speed, calm_threshold)))


def _check_token(t):
    if not (0 <= t.b_left < N_BINS and 0 <= t.b_right < N_BINS and 0 <= t.wind < N_OCTANTS):
        raise ValueError('invalid observation token: ' + str(t))


def encode_onehot(t: ObservationToken) -> np.ndarray:
    _check_token(t)
    x = np.zeros(ONEHOT_DIM)
    x[LEFT_OFFSET + t.b_left] = 1.0
    x[RIGHT_OFFSET + t.b_right] = 1.0
    x[WIND_OFFSET + t.wind] = 1.0
    return(x)


def decode_onehot(x) -> ObservationToken:
    x = np.asarray(x)
    if x.shape != (ONEHOT_DIM,) or np.sum(x) != 3:
        raise ValueError('not a 22-dim one-hot observation')
    return(ObservationToken(int(np.argmax(x[:RIGHT_OFFSET])),
                            int(np.argmax(x[RIGHT_OFFSET:WIND_OFFSET])),
                            int(np.argmax(x[WIND_OFFSET:]))))


def all_tokens():
    """ the 392 observation tokens in (left, right, wind) lexical order """
    return([ObservationToken(l, r, w) for l in range(N_BINS) for r in range(N_BINS) for w in range(N_OCTANTS)])


def serialize_episode(obs: list, acts: list, resets=None) -> list:
    """
    interleave an episode as BOS, o_0, a_0, ..., o_T, EOS

    :param obs: ObservationTokens, one more than actions
    :param acts: action indices 0-5
    :param resets: optional step indices t (1..T) where a RESET precedes o_t

    :return: list of ObservationToken | ActionToken | Special
    """
    if len(obs) != len(acts) + 1:
        raise ValueError(f'need len(obs) == len(acts) + 1, got {len(obs)} and {len(acts)}')
    resets = set() if resets is None else set(resets)
    if any((t < 1) or (t > len(acts)) for t in resets):
        raise ValueError('RESET positions must lie in 1..T')
    seq = [Special.BOS, ObservationToken(*obs[0])]
    for t, a in enumerate(acts):
        if not (0 <= int(a) < N_ACTIONS):
            raise ValueError('invalid action ' + str(a))
        seq.append(ActionToken(int(a)))
        if (t + 1) in resets:
            seq.append(Special.RESET)
        seq.append(ObservationToken(*obs[t + 1]))
    seq.append(Special.EOS)
    return(seq)


def parse_episode(seq: list):
    """
    inverse of serialize_episode

    :return: (obs, acts, resets)
    """
    if len(seq) < 3 or seq[0] != Special.BOS or seq[-1] != Special.EOS:
        raise GrammarError('episode must start with BOS and end with EOS')
    obs, acts, resets = [], [], []
    expect_obs = True
    for tok in seq[1:-1]:
        if isinstance(tok, ObservationToken):
            if not expect_obs:
                raise GrammarError('two observations without an action between them')
            obs.append(tok)
            expect_obs = False
        elif isinstance(tok, ActionToken):
            if expect_obs:
                raise GrammarError('action where an observation was expected')
            acts.append(tok.action)
            expect_obs = True
        elif tok == Special.RESET:
            if not expect_obs or len(acts) == 0:
                raise GrammarError('RESET must sit between an action and the next observation')
            resets.append(len(acts))
        else:
            raise GrammarError('unexpected token ' + repr(tok))
    if expect_obs:
        raise GrammarError('episode must end with an observation before EOS')
    return(obs, acts, resets)


def to_ids(seq: list) -> list:
    """ flatten a serialized episode onto the 32-id vocabulary """
    ids = []
    for tok in seq:
        if isinstance(tok, ObservationToken):
            _check_token(tok)
            ids.extend([LEFT_OFFSET + tok.b_left, RIGHT_OFFSET + tok.b_right, WIND_OFFSET + tok.wind])
        elif isinstance(tok, ActionToken):
            ids.append(ACTION_OFFSET + tok.action)
        else:
            ids.append(int(Special(tok)))
    return(ids)


def from_ids(ids: list) -> list:
    """
    regroup flat ids into tokens; an observation is the id triple left, right, wind
    """
    seq = []
    i = 0
    while i < len(ids):
        k = int(ids[i])
        if LEFT_OFFSET <= k < RIGHT_OFFSET:
            if i + 2 >= len(ids):
                raise GrammarError('truncated observation at position ' + str(i))
            r, w = int(ids[i + 1]), int(ids[i + 2])
            if not (RIGHT_OFFSET <= r < WIND_OFFSET and WIND_OFFSET <= w < ACTION_OFFSET):
                raise GrammarError('malformed observation triple at position ' + str(i))
            seq.append(ObservationToken(k - LEFT_OFFSET, r - RIGHT_OFFSET, w - WIND_OFFSET))
            i += 3
        elif ACTION_OFFSET <= k < Special.PAD:
            seq.append(ActionToken(k - ACTION_OFFSET))
            i += 1
        elif Special.PAD <= k < VOCAB_SIZE:
            seq.append(Special(k))
            i += 1
        else:
            raise GrammarError('id out of vocabulary or out of place: ' + str(k))
    return(seq)


def write_token_file(episodes: list, filepath):
    """
    one episode per line, whitespace separated integer ids

    :param episodes: list of serialized episodes
    """
    with open(filepath, 'w') as fh:
        for seq in episodes:
            fh.write(' '.join(str(i) for i in to_ids(seq)) + '\n')
    logger.info('wrote ' + str(len(episodes)) + ' token sequences to ' + str(filepath))
    return(filepath)


def read_token_file(filepath) -> list:
    episodes = []
    with open(filepath) as fh:
        for line in fh:
            bits = line.split()
            if len(bits) > 0:
                episodes.append(from_ids([int(b) for b in bits]))
    return(episodes)
