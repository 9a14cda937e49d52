"""
Expected SARSA training of a GPF Q-network on the plume task.

Online single-transition updates against a detached target, epsilon-greedy exploration with
multiplicative decay, periodic held-out evaluation and the grow / prune / freeze schedule
run at every evaluation checkpoint. The best evaluated network is kept.
"""
from dataclasses import dataclass, asdict
from multiprocessing import Pool
import logging
import os
import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from gpfplume.config import RunConfig, validate_run_config, config_dict
from gpfplume.env import env_reset, env_step, Termination, EpisodeTrace
from gpfplume.tokenizer import encode_onehot, tokenize_observation, N_ACTIONS
from gpfplume import gpf
from gpfplume.checkpoint import Checkpoint, save_checkpoint, rng_state
from gpfplume.util import TrainingDiverged

logger = logging.getLogger('gpfplume')

_POLICY_STREAM = 3

METRIC_COLUMNS = ['episode', 'success_rate', 'mean_steps', 'layers', 'retained_fraction', 'events',
                  'val_loss', 'epsilon', 'r_time', 'r_event', 'r_shape']


@dataclass
class TrainRecord:
    episode: int
    success_rate: float
    mean_steps: float
    layers: int
    retained_fraction: float
    events: str
    val_loss: float
    epsilon: float = 0.0
    r_time: float = 0.0
    r_event: float = 0.0
    r_shape: float = 0.0


@dataclass
class Probe:
    """ fixed transitions (x, a, r, x', done) for the validation loss """
    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return(len(self.a))


@dataclass
class EvalResult:
    success_rate: float
    outcomes: pd.DataFrame

    @property
    def mean_steps(self) -> float:
        won = self.outcomes[self.outcomes['outcome'] == Termination.SUCCESS.value]
        if len(won) == 0:
            return(float('nan'))
        return(float(won['steps'].mean()))


def expected_sarsa_target(r, q_next, eps, gamma, terminated) -> float:
    """
    r + gamma * E_pi[q(s', .)] under the epsilon-greedy policy

    :param r: reward
    :param q_next: Q-values of the next state
    :param eps: exploration rate of the target policy
    :param gamma: discount
    :param terminated: no bootstrap when True
    """
    if not (0.0 <= eps <= 1.0):
        raise ValueError('epsilon must be in [0, 1]')
    if terminated:
        return(float(r))
    q_next = np.asarray(q_next, dtype=float)
    expectation = (eps / len(q_next)) * np.sum(q_next) + (1.0 - eps) * np.max(q_next)
    return(float(r + gamma * expectation))


def greedy_target(r, q_next, eps, gamma, terminated) -> float:
    """ Q-learning target, the eps = 0 limit of the above """
    return(expected_sarsa_target(r, q_next, 0.0, gamma, terminated))


TARGETS = {'expected': expected_sarsa_target, 'greedy': greedy_target}


def select_action(q, eps, rng: np.random.Generator) -> int:
    """ epsilon-greedy; greedy ties go to the lowest action index """
    if not (0.0 <= eps <= 1.0):
        raise ValueError('epsilon must be in [0, 1]')
    if rng.random() < eps:
        return(int(rng.integers(len(q))))
    return(int(np.argmax(q)))


def decay_epsilon(eps, decay=0.9995, floor=0.05) -> float:
    return(max(floor, eps * decay))


def training_seeds(env_seed, n, upper):
    """ per-episode env seeds, drawn below the evaluation seed range """
    return(np.random.default_rng(env_seed).integers(0, upper, size=n))


def _observe(state, raw):
    return(encode_onehot(tokenize_observation(raw, state.edges, state.plume_config.calm_threshold)))


def run_episode(net, run: RunConfig, seed, eps, max_transitions=0):
    """
    roll out one episode without learning

    :param max_transitions: keep the first this many (x, a, r, x', done) tuples

    :return: dict with seed, outcome, steps, return and the kept transitions
    """
    policy_rng = np.random.default_rng([int(seed), _POLICY_STREAM])
    state, raw = env_reset(run.plume, run.env, int(seed))
    x = _observe(state, raw)
    total = 0.0
    transitions = []
    while state.terminated == Termination.NONE:
        a = select_action(gpf.q_values(net, x), eps, policy_rng)
        out = env_step(state, a)
        x_next = encode_onehot(out.info['token'])
        total += out.reward
        if len(transitions) < max_transitions:
            transitions.append((x, a, out.reward, x_next, out.terminated != Termination.NONE))
        x = x_next
    return({'seed': int(seed), 'outcome': state.terminated.value, 'steps': state.steps,
            'return': total, 'final_distance': state.distance, 'transitions': transitions})


def record_episode(net, run: RunConfig, seed, eps):
    """
    roll out one episode keeping its tokens and per-step trace; net=None is the uniform random policy

    :return: (observation tokens, actions, EpisodeTrace)
    """
    policy_rng = np.random.default_rng([int(seed), _POLICY_STREAM])
    state, raw = env_reset(run.plume, run.env, int(seed))
    tok = tokenize_observation(raw, state.edges, run.plume.calm_threshold)
    obs, acts = [tok], []
    trace = EpisodeTrace()
    while state.terminated == Termination.NONE:
        if net is None:
            a = int(policy_rng.integers(N_ACTIONS))
        else:
            a = select_action(gpf.q_values(net, encode_onehot(tok)), eps, policy_rng)
        out = env_step(state, a)
        trace.record(state, out)
        tok = out.info['token']
        obs.append(tok)
        acts.append(a)
    return(obs, acts, trace)


_worker = {}


def _init_worker(net, run):
    torch.set_num_threads(1)
    _worker['net'] = net
    _worker['run'] = run


def _worker_episode(seed, eps):
    return(run_episode(_worker['net'], _worker['run'], seed, eps))


def evaluate(checkpoint, n_episodes, seed_base, run: RunConfig, epsilon=None, cores=1) -> EvalResult:
    """
    success rate over n_episodes held-out seeds seed_base + i

    :param checkpoint: Checkpoint or GpfNetwork
    :param epsilon: policy epsilon, defaults to train.eval_epsilon
    :param cores: worker processes, results are reduced in seed order either way
    """
    if n_episodes <= 0:
        raise ValueError('evaluation needs at least one episode')
    net = checkpoint.net if isinstance(checkpoint, Checkpoint) else checkpoint
    eps = run.train.eval_epsilon if epsilon is None else epsilon
    arglist = [(seed_base + i, eps) for i in range(n_episodes)]
    if cores > 1:
        # one copy of the network per worker
        with Pool(processes=cores, initializer=_init_worker, initargs=(net, run)) as pool:
            results = pool.starmap_async(_worker_episode, arglist).get()
    else:
        results = [run_episode(net, run, seed, e) for seed, e in arglist]

    outcomes = pd.DataFrame([{k: v for k, v in res.items() if k != 'transitions'} for res in results])
    rate = float(np.mean(outcomes['outcome'] == Termination.SUCCESS.value))
    return(EvalResult(rate, outcomes))


def collect_probe(net, run: RunConfig, size, seed_base, eps) -> Probe:
    """
    roll out evaluation episodes seed_base, seed_base + 1, ... until `size` transitions are in hand

    :return: Probe of exactly `size` transitions
    """
    if size <= 0:
        raise ValueError('probe size must be positive')
    transitions = []
    seed = seed_base
    while len(transitions) < size:
        res = run_episode(net, run, seed, eps, max_transitions=size - len(transitions))
        transitions.extend(res['transitions'])
        seed += 1
    return(build_probe(transitions, size))


def build_probe(transitions, size) -> Probe:
    if len(transitions) == 0:
        raise ValueError('no transitions to build a probe from')
    chosen = transitions[:size]
    return(Probe(x=np.array([t[0] for t in chosen]),
                 a=np.array([t[1] for t in chosen], dtype=np.int64),
                 r=np.array([t[2] for t in chosen]),
                 x_next=np.array([t[3] for t in chosen]),
                 done=np.array([t[4] for t in chosen], dtype=bool)))


def probe_loss(net, probe: Probe, eps, gamma, target='expected') -> float:
    """ mean squared TD error over the probe, one batched pass for s and one for s' """
    q = gpf.q_values(net, probe.x)
    q_next = gpf.q_values(net, probe.x_next)
    if target == 'greedy':
        eps = 0.0
    expectation = (eps / q_next.shape[1]) * q_next.sum(axis=1) + (1.0 - eps) * q_next.max(axis=1)
    y = probe.r + np.where(probe.done, 0.0, gamma * expectation)
    err = q[np.arange(len(probe)), probe.a] - y
    return(float(np.mean(err * err)))


def _diverged(net, optimizer, out_dir, episode, step):
    path = None
    if out_dir is not None:
        path = os.path.join(out_dir, f'diverged_ep{episode}.ckpt')
        save_checkpoint(path, net, optimizer.export(), {'episode': episode, 'step': step})
    msg = f'NaN loss at episode {episode}, step {step}'
    logger.error(msg + ('' if path is None else ', state dumped to ' + path))
    return(TrainingDiverged(msg, dump_path=path))


def _flush(net, optimizer, count):
    """ average the gradients of `count` accumulated transitions and take one step """
    if count == 0:
        return
    gpf.apply_gradients(net, optimizer, scale=1.0 / count)


def _checkpoint_meta(run, episode, score, agent_rng):
    return({'episode': int(episode), 'score': None if score is None else float(score),
            'run_config': {k: config_dict(getattr(run, k)) for k in ('plume', 'env', 'gpf', 'train')},
            'agent_rng': rng_state(agent_rng)})


class MetricsWriter:
    """ appends one CSV row per checkpoint and flushes, a partial run leaves a valid file """

    def __init__(self, path):
        self.path = path
        self.fh = None
        if path is not None:
            self.fh = open(path, 'w')
            pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.fh, index=False)
            self.fh.flush()

    def append(self, rec: TrainRecord):
        if self.fh is None:
            return
        pd.DataFrame([asdict(rec)], columns=METRIC_COLUMNS).to_csv(self.fh, header=False, index=False)
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def train(run: RunConfig, out_dir=None, metrics_path=None, best_path=None, net=None):
    """
    Expected SARSA with GPF structural updates.

    The best checkpoint is copied before the structural step of its evaluation, so it holds
    the network that earned its score.

    :param run: RunConfig
    :param out_dir: where diverged-state dumps go
    :param metrics_path: CSV file receiving one TrainRecord row per checkpoint
    :param best_path: checkpoint file rewritten whenever the eval score improves
    :param net: optional starting network, a fresh one-hidden-layer net otherwise

    :return: (best Checkpoint, list of TrainRecord)
    """
    validate_run_config(run)
    tc = run.train
    agent_rng = np.random.default_rng(tc.agent_seed)
    if net is None:
        net = gpf.build_network(run.gpf, seed=agent_rng.integers(2 ** 32))
    optimizer = gpf.GpfOptimizer(net, gpf.AdamState.from_config(run.gpf))
    target_fn = TARGETS[tc.target]
    seeds = training_seeds(tc.env_seed, tc.episodes, tc.eval_seed_base)

    best = Checkpoint(gpf.snapshot(net), optimizer.export(), _checkpoint_meta(run, 0, None, agent_rng))
    best_score = -1.0
    records = []
    probe = None
    eps = tc.epsilon_start
    bsize = gpf.batch_size(0, 0.0, run.gpf)
    comp_sums = np.zeros(3)
    comp_steps = 0
    writer = MetricsWriter(metrics_path)

    try:
        for ep in tqdm(range(tc.episodes), disable=not tc.progress, desc='episodes'):
            state, raw = env_reset(run.plume, run.env, int(seeds[ep]))
            x = _observe(state, raw)
            count = 0
            while state.terminated == Termination.NONE:
                q, cache = gpf.forward(net, x)
                a = select_action(q, eps, agent_rng)
                out = env_step(state, a)
                x_next = encode_onehot(out.info['token'])
                done = out.terminated != Termination.NONE
                q_next = None if done else gpf.q_values(net, x_next)
                y = target_fn(out.reward, q_next, eps, tc.gamma, done)
                loss, grad = gpf.td_loss_grad(q, a, y)
                if not np.isfinite(loss):
                    raise _diverged(net, optimizer, out_dir, ep, state.steps)
                gpf.compute_gradients(net, cache, grad)
                count += 1
                if count >= bsize:
                    _flush(net, optimizer, count)
                    count = 0
                comp_sums += out.components
                comp_steps += 1
                x = x_next
            _flush(net, optimizer, count)

            episode = ep + 1
            eps = decay_epsilon(eps, tc.epsilon_decay, tc.epsilon_min)
            if tc.gpf:
                gpf.update_beliefs(net, episode)
                gpf.update_stability(net, episode)

            if episode % tc.eval_every != 0 or tc.eval_episodes == 0:
                continue
            res = evaluate(net, tc.eval_episodes, tc.eval_seed_base, run, cores=tc.cores)
            if probe is None:
                probe = collect_probe(net, run, tc.probe_size, tc.eval_seed_base, tc.eval_epsilon)
            val_loss = probe_loss(net, probe, tc.eval_epsilon, tc.gamma, tc.target)
            if not np.isfinite(val_loss):
                raise _diverged(net, optimizer, out_dir, episode, state.steps)
            if res.success_rate > best_score:
                best_score = res.success_rate
                best = Checkpoint(gpf.snapshot(net), optimizer.export(),
                                  _checkpoint_meta(run, episode, res.success_rate, agent_rng))
                if best_path is not None:
                    save_checkpoint(best_path, best.net, best.adam, best.meta)
            events = []
            if tc.gpf:
                events = gpf.structural_step(net, val_loss, episode)
                bsize = gpf.batch_size(episode, val_loss, run.gpf)
            means = comp_sums / max(comp_steps, 1)
            rec = TrainRecord(episode=episode, success_rate=res.success_rate, mean_steps=res.mean_steps,
                              layers=net.hidden_layers, retained_fraction=gpf.retained_fraction(net),
                              events=''.join(events), val_loss=val_loss, epsilon=eps,
                              r_time=float(means[0]), r_event=float(means[1]), r_shape=float(means[2]))
            records.append(rec)
            writer.append(rec)
            comp_sums[:] = 0.0
            comp_steps = 0
            logger.info(f'episode {episode}: success {100.0 * res.success_rate:.1f}%, '
                        f'{net.hidden_layers} hidden layers, kept {100.0 * rec.retained_fraction:.1f}%, '
                        f'val loss {val_loss:.4g} {rec.events}')
    finally:
        writer.close()
    return(best, records)


def records_frame(records) -> pd.DataFrame:
    return(pd.DataFrame([asdict(r) for r in records], columns=METRIC_COLUMNS))
