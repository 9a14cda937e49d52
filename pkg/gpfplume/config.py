"""
Run configuration: one dataclass per section, defaults for the 20 m plume task.

Files are YAML with the sections ``plume``, ``env``, ``gpf`` and ``train``; every key
is a dataclass field name. Loading goes through omegaconf structured configs so
unknown keys and wrong types are rejected before our own range checks run.
"""
from dataclasses import dataclass, field, asdict
from typing import Optional
import math
import logging

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
import yaml

from gpfplume.util import ConfigError, check_positive, check_non_negative, sha256_text
from gpfplume.tokenizer import BIN_MULTIPLIERS

logger = logging.getLogger('gpfplume')


@dataclass
class PlumeConfig:
    domain_width: float = 20.0
    domain_height: float = 20.0
    dt: float = 0.1
    emission_rate: float = 5.0           # filaments / s
    filament_mass: float = 0.1
    init_radius: float = 0.01            # m, also the emission jitter
    diffusion_rate: float = 0.05         # m^2 / s
    decay_time: float = 30.0             # s
    noise_std: float = 1e-3
    conc_clamp: float = 1.0
    wind_speed_mean: float = 1.0         # m/s
    wind_dir_mean_deg: float = 0.0       # direction the wind blows toward
    wind_speed_std: float = 0.2
    wind_dir_std_deg: float = 15.0
    wind_corr_time: float = 2.0          # s
    wind_speed_min: float = 0.1
    calm_threshold: float = 0.05
    source_upwind_offset: float = 0.25   # fraction of the domain width
    source_jitter: float = 0.15          # fraction of the domain width
    boundary_removal: bool = True

    @property
    def domain(self):
        return((self.domain_width, self.domain_height))

    @property
    def wind_dir_mean(self):
        return(math.radians(self.wind_dir_mean_deg))

    @property
    def wind_dir_std(self):
        return(math.radians(self.wind_dir_std_deg))

    @property
    def alpha(self):
        """ OU mean-reversion coefficient dt / wind_corr_time """
        return(self.dt / self.wind_corr_time)


@dataclass
class EnvConfig:
    step_length: float = 0.5
    antenna_separation: float = 0.10
    success_radius: float = 0.5
    max_steps: int = 1200
    spawn_min: float = 3.0
    spawn_max: float = 10.0
    heading_noise_deg: float = 30.0
    max_spawn_retries: int = 100
    time_penalty: float = -0.01
    success_reward: float = 100.0
    whiff_reward: float = 1.0
    blank_penalty: float = -0.05
    blank_streak_limit: int = 20
    shaping_beta: float = 0.1
    gamma: float = 0.99

    @property
    def heading_noise(self):
        return(math.radians(self.heading_noise_deg))


@dataclass
class GpfConfig:
    input_dim: int = 22
    hidden_width: int = 64
    output_dim: int = 6
    max_hidden_layers: int = 4
    max_epochs: int = 4500               # episodes the belief schedule spans
    stagnation_threshold: float = 1e-3
    belief_prune_threshold: float = 1e-6
    prune_percentile: float = 30.0       # of active |w| per layer
    prune_magnitude: Optional[float] = None  # absolute cut, overrides the percentile
    freeze_threshold: float = 0.01
    freeze_fraction: float = 0.99
    enable_patience: int = 0
    grow_patience: int = 1000
    prune_patience: int = 500
    freeze_patience: int = 3000
    belief_increment: Optional[float] = None  # None means 1 / max_epochs
    belief_magnitude: float = 0.01       # |w| needed to gain belief
    belief_decay: float = 1.0            # share of belief lost in an episode spent at or below belief_magnitude
    batch_decay: float = 0.0
    base_batch_size: int = 1
    standalone_prune: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def belief_step(self):
        if self.belief_increment is not None:
            return(self.belief_increment)
        return(1.0 / self.max_epochs)


@dataclass
class TrainConfig:
    episodes: int = 4500
    eval_every: int = 500
    eval_episodes: int = 200
    test_episodes: int = 100
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.9995
    eval_epsilon: float = 0.05
    env_seed: int = 42
    agent_seed: int = 43
    eval_seed_base: int = 1_000_000
    probe_size: int = 2048
    gpf: bool = True
    target: str = 'expected'             # or 'greedy' (Q-learning target)
    cores: int = 1
    progress: bool = True


@dataclass
class RunConfig:
    plume: PlumeConfig = field(default_factory=PlumeConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    gpf: GpfConfig = field(default_factory=GpfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def validate_plume_config(cfg: PlumeConfig):
    """
    QC on the plume parameters.
    The concentration bin edges scale with noise_std, so the top edge must stay below the clamp.

    :param cfg: PlumeConfig
    """
    check_positive('plume', domain_width=cfg.domain_width, domain_height=cfg.domain_height,
                   dt=cfg.dt, emission_rate=cfg.emission_rate, filament_mass=cfg.filament_mass,
                   init_radius=cfg.init_radius, diffusion_rate=cfg.diffusion_rate,
                   decay_time=cfg.decay_time, conc_clamp=cfg.conc_clamp,
                   wind_corr_time=cfg.wind_corr_time, wind_speed_min=cfg.wind_speed_min,
                   noise_std=cfg.noise_std)
    check_non_negative('plume', wind_speed_std=cfg.wind_speed_std,
                       wind_dir_std_deg=cfg.wind_dir_std_deg, calm_threshold=cfg.calm_threshold,
                       source_jitter=cfg.source_jitter)
    if cfg.dt >= cfg.wind_corr_time:
        raise ConfigError(f'plume.dt ({cfg.dt}) must be smaller than plume.wind_corr_time ({cfg.wind_corr_time})')
    top_edge = cfg.noise_std * BIN_MULTIPLIERS[-1]
    if top_edge >= cfg.conc_clamp:
        raise ConfigError(f'plume.noise_std ({cfg.noise_std}) puts the top bin edge ({top_edge:g}) at or above '
                          f'plume.conc_clamp ({cfg.conc_clamp})')
    if not (0.0 <= cfg.source_upwind_offset < 0.5):
        raise ConfigError('plume.source_upwind_offset must be in [0, 0.5)')
    return(True)


def validate_env_config(cfg: EnvConfig):
    check_positive('env', success_radius=cfg.success_radius, max_steps=cfg.max_steps,
                   spawn_max=cfg.spawn_max, max_spawn_retries=cfg.max_spawn_retries)
    check_non_negative('env', step_length=cfg.step_length, antenna_separation=cfg.antenna_separation,
                       spawn_min=cfg.spawn_min, heading_noise_deg=cfg.heading_noise_deg,
                       blank_streak_limit=cfg.blank_streak_limit, shaping_beta=cfg.shaping_beta)
    if cfg.spawn_min > cfg.spawn_max:
        raise ConfigError('env.spawn_min must not exceed env.spawn_max')
    if not (0.0 < cfg.gamma <= 1.0):
        raise ConfigError(f'env.gamma must be in (0, 1], got {cfg.gamma}')
    return(True)


def validate_gpf_config(cfg: GpfConfig):
    check_positive('gpf', input_dim=cfg.input_dim, hidden_width=cfg.hidden_width,
                   output_dim=cfg.output_dim, max_hidden_layers=cfg.max_hidden_layers,
                   max_epochs=cfg.max_epochs, stagnation_threshold=cfg.stagnation_threshold,
                   belief_prune_threshold=cfg.belief_prune_threshold,
                   freeze_threshold=cfg.freeze_threshold, belief_magnitude=cfg.belief_magnitude,
                   base_batch_size=cfg.base_batch_size, learning_rate=cfg.learning_rate)
    check_non_negative('gpf', enable_patience=cfg.enable_patience, grow_patience=cfg.grow_patience,
                       prune_patience=cfg.prune_patience, freeze_patience=cfg.freeze_patience,
                       batch_decay=cfg.batch_decay)
    if not (0.0 < cfg.freeze_fraction <= 1.0):
        raise ConfigError(f'gpf.freeze_fraction must be in (0, 1], got {cfg.freeze_fraction}')
    if not (0.0 <= cfg.prune_percentile <= 100.0):
        raise ConfigError('gpf.prune_percentile must be in [0, 100]')
    if cfg.belief_increment is not None and cfg.belief_increment <= 0:
        raise ConfigError('gpf.belief_increment must be > 0')
    if not (0.0 <= cfg.belief_decay <= 1.0):
        raise ConfigError(f'gpf.belief_decay must be in [0, 1], got {cfg.belief_decay}')
    return(True)


def validate_train_config(cfg: TrainConfig):
    check_non_negative('train', episodes=cfg.episodes, eval_episodes=cfg.eval_episodes,
                       test_episodes=cfg.test_episodes)
    check_positive('train', eval_every=cfg.eval_every, cores=cfg.cores, probe_size=cfg.probe_size)
    if not (0.0 < cfg.gamma <= 1.0):
        raise ConfigError(f'train.gamma must be in (0, 1], got {cfg.gamma}')
    if not (0.0 <= cfg.epsilon_min <= cfg.epsilon_start <= 1.0):
        raise ConfigError('train epsilon must satisfy 0 <= epsilon_min <= epsilon_start <= 1')
    if not (0.0 <= cfg.eval_epsilon <= 1.0):
        raise ConfigError('train.eval_epsilon must be in [0, 1]')
    if cfg.target not in ['expected', 'greedy']:
        raise ConfigError("train.target must be 'expected' or 'greedy', got " + str(cfg.target))
    return(True)


def validate_run_config(run: RunConfig):
    validate_plume_config(run.plume)
    validate_env_config(run.env)
    validate_gpf_config(run.gpf)
    validate_train_config(run.train)
    # shaping and the TD target share one discount
    if run.env.gamma != run.train.gamma:
        raise ConfigError(f'env.gamma ({run.env.gamma}) must equal train.gamma ({run.train.gamma})')
    return(True)


def load_config(filepath=None, overrides=None) -> RunConfig:
    """
    read a YAML run config on top of the built-in defaults

    :param filepath: path to the YAML file, None for pure defaults
    :param overrides: optional dict of dotted keys, e.g. {'train.episodes': 10}

    :return: validated RunConfig
    """
    schema = OmegaConf.structured(RunConfig)
    try:
        merged = schema
        if filepath is not None:
            merged = OmegaConf.merge(merged, OmegaConf.load(filepath))
        if overrides:
            dotlist = [f'{k}={_yaml_value(v)}' for k, v in overrides.items()]
            merged = OmegaConf.merge(merged, OmegaConf.from_dotlist(dotlist))
        run = OmegaConf.to_object(merged)
    except OmegaConfBaseException as exc:
        raise ConfigError('ERROR: bad config: ' + str(exc)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError('ERROR: config file is not valid YAML: ' + str(exc)) from exc
    except OSError as exc:
        raise ConfigError('ERROR: config file not readable: ' + str(exc)) from exc
    validate_run_config(run)
    return(run)


def dump_config(run: RunConfig) -> str:
    return(OmegaConf.to_yaml(OmegaConf.structured(run)))


def config_hash(run: RunConfig) -> str:
    return(sha256_text(dump_config(run)))


def config_dict(cfg):
    return(asdict(cfg))


def _yaml_value(v):
    if v is None:
        return('null')
    if isinstance(v, bool):
        return('true' if v else 'false')
    return(str(v))
