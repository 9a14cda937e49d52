"""
Filament plume on a rectangular 2-D domain.

Odor leaves the source as discrete Gaussian packets (filaments) which are advected by a
wind whose speed and direction follow coupled discrete-time Ornstein-Uhlenbeck processes
and which spread by molecular diffusion. Filament state is kept column-wise in numpy
arrays so a concentration query is one vectorised kernel evaluation.
"""
from dataclasses import dataclass, field
import logging
import numpy as np
import pandas as pd

from gpfplume.config import PlumeConfig, validate_plume_config

logger = logging.getLogger('gpfplume')


@dataclass
class WindState:
    speed: float
    direction: float   # radians, the direction the wind blows toward


@dataclass
class PlumeState:
    positions: np.ndarray          # (n, 2)
    ages: np.ndarray               # (n,)
    ids: np.ndarray                # (n,)
    wind: WindState
    source: np.ndarray             # (2,)
    time: float
    rng: np.random.Generator
    next_id: int = 0
    emitted: int = field(default=0)

    def num_filaments(self):
        return(len(self.ages))


def _empty_state(source, wind, rng):
    return(PlumeState(positions=np.zeros((0, 2)), ages=np.zeros(0), ids=np.zeros(0, dtype=np.int64),
                      wind=wind, source=source, time=0.0, rng=rng))


def place_source(config: PlumeConfig, rng: np.random.Generator):
    """
    source position on the upwind half of the domain: the domain center shifted upwind by
    source_upwind_offset of the width, then a uniform jitter of +-source_jitter of the width
    on both axes.

    :param config: PlumeConfig
    :param rng: numpy Generator

    :return: (2,) source position
    """
    width, height = config.domain
    center = np.array([width / 2.0, height / 2.0])
    downwind = np.array([np.cos(config.wind_dir_mean), np.sin(config.wind_dir_mean)])
    biased = center - config.source_upwind_offset * width * downwind
    jitter = rng.uniform(-config.source_jitter, config.source_jitter, size=2) * np.array([width, height])
    source = np.clip(biased + jitter, [0.0, 0.0], [width, height])
    return(source)


def plume_reset(config: PlumeConfig, seed: int) -> PlumeState:
    """
    start a new episode: fresh RNG stream, source placed upwind, no filaments, mean wind

    :param config: PlumeConfig
    :param seed: integer seed, the whole episode is a function of (config, seed)

    :return: PlumeState
    """
    validate_plume_config(config)
    rng = np.random.default_rng(seed)
    source = place_source(config, rng)
    wind = WindState(speed=config.wind_speed_mean, direction=config.wind_dir_mean)
    return(_empty_state(source, wind, rng))


def wind_step(w: WindState, config: PlumeConfig, rng: np.random.Generator) -> WindState:
    """
    one OU update of speed and direction, speed clamped from below at wind_speed_min.

        v' = v - a (v - v_mean) + s_v sqrt(2a) e_v
    """
    a = config.alpha
    eps_v, eps_th = rng.standard_normal(2)
    speed = w.speed - a * (w.speed - config.wind_speed_mean) + config.wind_speed_std * np.sqrt(2.0 * a) * eps_v
    direction = w.direction - a * (w.direction - config.wind_dir_mean) + config.wind_dir_std * np.sqrt(2.0 * a) * eps_th
    return(WindState(speed=max(float(speed), config.wind_speed_min), direction=float(direction)))


def plume_step(s: PlumeState, config: PlumeConfig, rng=None) -> PlumeState:
    """
    advance the plume by one tick of config.dt, in place.

    Order: emit Poisson(lambda dt) filaments at the source, advect all of them with the current
    wind, age them, drop the expired or escaped ones, then update the wind.

    :param s: PlumeState (mutated and returned)
    :param config: PlumeConfig
    :param rng: optional Generator, defaults to the state's own stream
    """
    if rng is None:
        rng = s.rng
    n_new = int(rng.poisson(config.emission_rate * config.dt))
    if n_new > 0:
        new_pos = s.source + rng.normal(0.0, config.init_radius, size=(n_new, 2))
        s.positions = np.vstack([s.positions, new_pos])
        s.ages = np.concatenate([s.ages, np.zeros(n_new)])
        s.ids = np.concatenate([s.ids, np.arange(s.next_id, s.next_id + n_new, dtype=np.int64)])
        s.next_id += n_new
        s.emitted += n_new

    step = s.wind.speed * config.dt
    s.positions = s.positions + step * np.array([np.cos(s.wind.direction), np.sin(s.wind.direction)])
    s.ages = s.ages + config.dt

    keep = s.ages <= config.decay_time
    if config.boundary_removal:
        width, height = config.domain
        inside = ((s.positions[:, 0] >= 0.0) & (s.positions[:, 0] <= width) &
                  (s.positions[:, 1] >= 0.0) & (s.positions[:, 1] <= height))
        keep = keep & inside
    if not np.all(keep):
        s.positions = s.positions[keep]
        s.ages = s.ages[keep]
        s.ids = s.ids[keep]

    s.wind = wind_step(s.wind, config, rng)
    s.time += config.dt
    return(s)


def filament_radius(tau, config: PlumeConfig):
    """
    Gaussian radius of a filament of age tau: sqrt(sigma_0^2 + 2 D tau)

    :param tau: age in seconds, scalar or array
    """
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr < 0):
        raise ValueError('filament age must be >= 0, got ' + str(tau))
    sigma = np.sqrt(config.init_radius ** 2 + 2.0 * config.diffusion_rate * tau_arr)
    if sigma.ndim == 0:
        return(float(sigma))
    return(sigma)


def filament_kernel(d2, sigma2, mass):
    """ Gaussian packet (m / 2 pi sigma^2) exp(-d^2 / 2 sigma^2), no cutoff """
    return(mass / (2.0 * np.pi * sigma2) * np.exp(-d2 / (2.0 * sigma2)))


def _in_domain(p, config):
    width, height = config.domain
    return((0.0 <= p[0] <= width) and (0.0 <= p[1] <= height))


def concentration_field(s: PlumeState, points, config: PlumeConfig):
    """
    noiseless, unclamped kernel sum at many points

    :param points: (k, 2) array
    :return: (k,) concentrations
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if s.num_filaments() == 0:
        return(np.zeros(points.shape[0]))
    sigma2 = filament_radius(s.ages, config) ** 2
    diff = points[:, None, :] - s.positions[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    # filaments further than 3 sigma are excluded
    near = d2 <= 9.0 * sigma2[None, :]
    kernel = filament_kernel(d2, sigma2[None, :], config.filament_mass)
    return(np.sum(np.where(near, kernel, 0.0), axis=1))


def concentration_at(s: PlumeState, p, config: PlumeConfig, rng=None, noisy=True) -> float:
    """
    sensor reading at point p: kernel sum, plus N(0, noise_std^2), clamped to [0, conc_clamp]

    :param s: PlumeState
    :param p: (x, y) inside the domain
    :param config: PlumeConfig
    :param rng: Generator for the sensor noise, defaults to the state's stream
    :param noisy: False evaluates the noiseless field (still clamped)
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (2,) or not _in_domain(p, config):
        raise ValueError('query point outside the domain: ' + str(p))
    c = float(concentration_field(s, p[None, :], config)[0])
    if noisy and config.noise_std > 0:
        if rng is None:
            rng = s.rng
        c = c + float(rng.normal(0.0, config.noise_std))
    return(min(max(c, 0.0), config.conc_clamp))


def plume_snapshot(s: PlumeState) -> pd.DataFrame:
    """
    filament table for offline visualisation: time, filament_id, x, y, age
    """
    df = pd.DataFrame({'time': np.full(s.num_filaments(), s.time),
                       'filament_id': s.ids,
                       'x': s.positions[:, 0],
                       'y': s.positions[:, 1],
                       'age': s.ages})
    return(df)


def simulate(config: PlumeConfig, seed: int, steps: int, every: int = 1) -> pd.DataFrame:
    """
    run the plume alone and collect snapshots every `every` ticks

    :return: concatenated snapshot table
    """
    s = plume_reset(config, seed)
    frames = []
    for t in range(steps):
        plume_step(s, config)
        if (t + 1) % every == 0:
            frames.append(plume_snapshot(s))
    logger.info('simulated ' + str(steps) + ' ticks, ' + str(s.emitted) + ' filaments emitted')
    if len(frames) == 0:
        return(plume_snapshot(_empty_state(s.source, s.wind, s.rng)))
    return(pd.concat(frames, axis=0, ignore_index=True))
