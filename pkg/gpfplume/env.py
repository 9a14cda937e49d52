"""
Episode wrapper around the plume: agent pose, the six discrete actions, bilateral
antenna sensing, reward and termination.
"""
from dataclasses import dataclass, field
from enum import IntEnum, Enum
from typing import NamedTuple
import logging
import numpy as np
import pandas as pd

from gpfplume.config import PlumeConfig, EnvConfig, validate_env_config
from gpfplume.plume import PlumeState, plume_reset, plume_step, concentration_at
from gpfplume.tokenizer import DEFAULT_EDGES, bin_edges, tokenize_observation
from gpfplume.util import EpisodeTerminatedError, PlacementError, wrap_angle

logger = logging.getLogger('gpfplume')

# sub-streams of the episode seed
_AGENT_STREAM = 1
_SENSOR_STREAM = 2


class Action(IntEnum):
    SurgeForward = 0
    TurnLeft15 = 1
    TurnRight15 = 2
    TurnAround180 = 3
    CastLeft30 = 4
    CastRight30 = 5


# heading change in radians, counter-clockwise positive
HEADING_CHANGE = {
    Action.SurgeForward: 0.0,
    Action.TurnLeft15: np.radians(15.0),
    Action.TurnRight15: -np.radians(15.0),
    Action.TurnAround180: np.pi,
    Action.CastLeft30: np.radians(30.0),
    Action.CastRight30: -np.radians(30.0),
}


class Termination(str, Enum):
    NONE = 'none'
    SUCCESS = 'success'
    TIMEOUT = 'timeout'


@dataclass
class AgentPose:
    position: np.ndarray
    heading: float


class RawObservation(NamedTuple):
    left_conc: float
    right_conc: float
    wind_speed: float
    wind_dir_rel: float   # direction the wind arrives from, agent frame
    distance: float       # privileged, reward shaping and metrics only


class RewardComponents(NamedTuple):
    time: float
    event: float
    shape: float


class StepOutcome(NamedTuple):
    observation: RawObservation
    reward: float
    terminated: Termination
    components: RewardComponents
    info: dict


@dataclass
class EnvState:
    plume: PlumeState
    plume_config: PlumeConfig
    env_config: EnvConfig
    pose: AgentPose
    sensor_rng: np.random.Generator
    distance: float
    steps: int = 0
    blank_streak: int = 0
    terminated: Termination = Termination.NONE
    edges: np.ndarray = field(default_factory=lambda: DEFAULT_EDGES)


def _inside(p, domain):
    return((0.0 <= p[0] <= domain[0]) and (0.0 <= p[1] <= domain[1]))


def place_agent(source, plume_config: PlumeConfig, env_config: EnvConfig, rng):
    """
    draw d ~ U(spawn_min, spawn_max) downwind of the source along the mean wind axis,
    heading toward the source with uniform noise. Placements outside the domain are redrawn.

    :return: AgentPose
    """
    downwind = np.array([np.cos(plume_config.wind_dir_mean), np.sin(plume_config.wind_dir_mean)])
    for _ in range(env_config.max_spawn_retries):
        d = rng.uniform(env_config.spawn_min, env_config.spawn_max)
        noise = rng.uniform(-env_config.heading_noise, env_config.heading_noise)
        pos = source + d * downwind
        if _inside(pos, plume_config.domain):
            to_source = source - pos
            heading = wrap_angle(np.arctan2(to_source[1], to_source[0]) + noise)
            return(AgentPose(position=pos, heading=heading))
    raise PlacementError(f'no in-domain agent placement after {env_config.max_spawn_retries} draws')


def antenna_positions(pose: AgentPose, env_config: EnvConfig, domain):
    """ left antenna sits at +90 degrees from the heading, both clipped to the domain """
    half = env_config.antenna_separation / 2.0
    perp = np.array([np.cos(pose.heading + np.pi / 2.0), np.sin(pose.heading + np.pi / 2.0)])
    left = np.clip(pose.position + half * perp, [0.0, 0.0], domain)
    right = np.clip(pose.position - half * perp, [0.0, 0.0], domain)
    return(left, right)


def _observe(state: EnvState) -> RawObservation:
    left, right = antenna_positions(state.pose, state.env_config, state.plume_config.domain)
    c_left = concentration_at(state.plume, left, state.plume_config, rng=state.sensor_rng)
    c_right = concentration_at(state.plume, right, state.plume_config, rng=state.sensor_rng)
    wind = state.plume.wind
    # the wind arrives from the opposite of where it blows
    dir_rel = wrap_angle(wind.direction + np.pi - state.pose.heading)
    return(RawObservation(c_left, c_right, wind.speed, dir_rel, state.distance))


def source_distance(state: EnvState) -> float:
    return(float(np.linalg.norm(state.pose.position - state.plume.source)))


def env_reset(plume_config: PlumeConfig, env_config: EnvConfig, seed: int):
    """
    new episode from one integer seed

    :param plume_config: PlumeConfig
    :param env_config: EnvConfig
    :param seed: the episode seed, plume, placement and sensor noise streams are derived from it

    :return: (EnvState, RawObservation)
    """
    validate_env_config(env_config)
    plume = plume_reset(plume_config, seed)
    agent_rng = np.random.default_rng([seed, _AGENT_STREAM])
    pose = place_agent(plume.source, plume_config, env_config, agent_rng)
    state = EnvState(plume=plume, plume_config=plume_config, env_config=env_config, pose=pose,
                     sensor_rng=np.random.default_rng([seed, _SENSOR_STREAM]), distance=0.0,
                     edges=bin_edges(plume_config.noise_std))
    state.distance = source_distance(state)
    return(state, _observe(state))


def potential(distance, beta=0.1):
    return(-beta * distance)


def reward_components(prev_dist, new_dist, whiff, blank_streak, success, gamma,
                      env_config: EnvConfig = None) -> RewardComponents:
    """
    time penalty, event reward and potential-based shaping term of one step

    :param prev_dist: agent to source distance before the step
    :param new_dist: distance after the step
    :param whiff: either antenna above the noise floor this step
    :param blank_streak: consecutive blank steps, including this one
    :param success: the step reached the source
    :param gamma: discount shared with the TD target
    """
    if prev_dist < 0 or new_dist < 0:
        raise ValueError('distances must be >= 0')
    if env_config is None:
        env_config = EnvConfig()
    r_event = 0.0
    if success:
        r_event += env_config.success_reward
    if whiff:
        r_event += env_config.whiff_reward
    if blank_streak > env_config.blank_streak_limit:
        r_event += env_config.blank_penalty
    beta = env_config.shaping_beta
    r_shape = gamma * potential(new_dist, beta) - potential(prev_dist, beta)
    return(RewardComponents(env_config.time_penalty, r_event, r_shape))


def reward_of(prev_dist, new_dist, whiff, blank_streak, success, gamma, env_config: EnvConfig = None) -> float:
    c = reward_components(prev_dist, new_dist, whiff, blank_streak, success, gamma, env_config)
    return(c.time + c.event + c.shape)


def env_step(state: EnvState, a) -> StepOutcome:
    """
    turn, move step_length along the new heading, advance the plume one tick, sense, reward.

    :param state: EnvState, mutated
    :param a: Action or its integer index
    """
    if state.terminated != Termination.NONE:
        raise EpisodeTerminatedError('episode already ended: ' + state.terminated.value)
    a = Action(int(a))
    cfg = state.env_config
    pose = state.pose
    pose.heading = wrap_angle(pose.heading + HEADING_CHANGE[a])
    move = cfg.step_length * np.array([np.cos(pose.heading), np.sin(pose.heading)])
    pose.position = np.clip(pose.position + move, [0.0, 0.0], state.plume_config.domain)
    plume_step(state.plume, state.plume_config)
    state.steps += 1

    prev_dist = state.distance
    state.distance = source_distance(state)
    obs = _observe(state)
    token = tokenize_observation(obs, state.edges, state.plume_config.calm_threshold)
    whiff = (token.b_left >= 1) or (token.b_right >= 1)
    state.blank_streak = 0 if whiff else state.blank_streak + 1

    success = state.distance <= cfg.success_radius
    if success:
        state.terminated = Termination.SUCCESS
    elif state.steps >= cfg.max_steps:
        state.terminated = Termination.TIMEOUT

    comps = reward_components(prev_dist, state.distance, whiff, state.blank_streak, success, cfg.gamma, cfg)
    reward = comps.time + comps.event + comps.shape
    info = {'whiff': whiff, 'blank_streak': state.blank_streak, 'token': token, 'action': a}
    return(StepOutcome(obs, reward, state.terminated, comps, info))


class EpisodeTrace:
    """
    per-step rows of one episode, exported as a table:
    step, x, y, heading, c_left, c_right, wind_octant, action, r_time, r_event, r_shape, terminated
    """

    def __init__(self):
        self.rows = []

    def record(self, state: EnvState, outcome: StepOutcome):
        self.rows.append({'step': state.steps,
                          'x': float(state.pose.position[0]),
                          'y': float(state.pose.position[1]),
                          'heading': float(state.pose.heading),
                          'c_left': outcome.observation.left_conc,
                          'c_right': outcome.observation.right_conc,
                          'wind_octant': outcome.info['token'].wind,
                          'action': int(outcome.info['action']),
                          'r_time': outcome.components.time,
                          'r_event': outcome.components.event,
                          'r_shape': outcome.components.shape,
                          'terminated': outcome.terminated.value})

    def __len__(self):
        return(len(self.rows))

    def to_frame(self) -> pd.DataFrame:
        cols = ['step', 'x', 'y', 'heading', 'c_left', 'c_right', 'wind_octant', 'action',
                'r_time', 'r_event', 'r_shape', 'terminated']
        return(pd.DataFrame(self.rows, columns=cols))
