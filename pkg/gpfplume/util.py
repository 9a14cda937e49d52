import hashlib
import logging
import numpy as np
import pandas as pd

logger = logging.getLogger('gpfplume')


class ConfigError(ValueError):
    """ a config field failed validation, the message names the key """


class CheckpointError(ValueError):
    """ unreadable checkpoint: bad magic, version or truncated payload """


class EpisodeTerminatedError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


class GrammarError(ValueError):
    """ token sequence does not follow BOS (Obs Act)* Obs EOS """


class SpectralError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def wrap_angle(theta):
    """
    wrap an angle (or array of angles) into (-pi, pi]

    :param theta: radians
    :return: wrapped radians
    """
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return(float(wrapped))
    return(wrapped)


def check_positive(section, **fields):
    """
    QC on config values that must be strictly positive.

    :param section: config section name used in the error message
    :param fields: key=value pairs to check
    """
    for key, value in fields.items():
        if not (value > 0):
            raise ConfigError(f'{section}.{key} must be > 0, got {value}')
    return(True)


def check_non_negative(section, **fields):
    for key, value in fields.items():
        if value < 0:
            raise ConfigError(f'{section}.{key} must be >= 0, got {value}')
    return(True)


def sha256_text(txt):
    return(hashlib.sha256(txt.encode('utf-8')).hexdigest())


def write_table(df: pd.DataFrame, path, sep=','):
    """
    write a table of results, one header row, delimiter separated

    :param df: the pandas data frame
    :param path: output file path
    :param sep: the delimiter
    """
    df.to_csv(path, sep=sep, index=False)
    logger.info('wrote ' + str(len(df)) + ' rows to ' + str(path))
    return(path)


def read_z_grid(filepath):
    """
    read a custom grid of complex evaluation points, one per line.
    A line holds either 're im' (whitespace or comma separated) or a python complex literal.

    :param filepath: path to the grid file
    :return: numpy complex array
    """
    txt = open(filepath).read().split('\n')
    zs = []
    for line in txt:
        line = line.strip()
        if len(line) == 0 or line.startswith('#'):
            continue
        bits = line.replace(',', ' ').split()
        if len(bits) == 2:
            zs.append(complex(float(bits[0]), float(bits[1])))
        elif len(bits) == 1:
            zs.append(complex(bits[0].replace('i', 'j')))
        else:
            raise ValueError('ERROR: could not parse z grid line: ' + line)
    return(np.array(zs, dtype=complex))
