"""
gpfplume command line.

    gpfplume train   [--config FILE] [--episodes N] [--gpf on|off] [--target expected|greedy] ...
    gpfplume eval    --checkpoint FILE [--episodes 100] [--seed-base N]
    gpfplume spectra --checkpoint FILE [FILE ...] [--z-grid FILE]
    gpfplume tokens  (--checkpoint FILE | --policy random) [--episodes N]
    gpfplume plume   [--seed N] [--steps N] [--every K]

Exit codes: 0 success, 1 config / checkpoint / shape error, 2 NaN abort or token grammar violation.
Outputs go to --out, else $GPF_OUT_DIR, else ./gpf_out.
"""
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
import argparse
import json
import logging
import os
import sys

from gpfplume import __version__
from gpfplume.config import load_config, dump_config, config_hash, RunConfig, PlumeConfig, EnvConfig, \
    GpfConfig, TrainConfig, validate_run_config
from gpfplume.checkpoint import load_checkpoint, save_checkpoint
from gpfplume import learner, spectral, tokenizer, plume
from gpfplume.util import ConfigError, CheckpointError, TrainingDiverged, GrammarError, SpectralError, \
    write_table, read_z_grid

logger = logging.getLogger('gpfplume')

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ABORT = 2

MANIFEST_NAME = 'manifest.json'


def _now():
    return(datetime.now(timezone.utc).isoformat())


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = None
    status: str = 'running'
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, 'w') as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return(path)

    def finalize(self, out_dir, status='finished'):
        self.finished = _now()
        self.status = status
        return(self.write(out_dir))


def output_dir(flag):
    out = flag or os.environ.get('GPF_OUT_DIR') or 'gpf_out'
    os.makedirs(out, exist_ok=True)
    return(out)


def _on_off(txt):
    if txt not in ('on', 'off'):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return(txt == 'on')


def _run_config(args, extra=None) -> RunConfig:
    overrides = {} if extra is None else dict(extra)
    return(load_config(getattr(args, 'config', None), overrides))


def _run_from_meta(meta, fallback: RunConfig) -> RunConfig:
    doc = meta.get('run_config')
    if not doc:
        return(fallback)
    run = RunConfig(plume=PlumeConfig(**doc['plume']), env=EnvConfig(**doc['env']),
                    gpf=GpfConfig(**doc['gpf']), train=TrainConfig(**doc['train']))
    validate_run_config(run)
    return(run)


def cmd_train(args) -> int:
    overrides = {}
    if args.episodes is not None:
        overrides['train.episodes'] = args.episodes
    if args.gpf is not None:
        overrides['train.gpf'] = args.gpf
    if args.target is not None:
        overrides['train.target'] = args.target
    if args.seed_env is not None:
        overrides['train.env_seed'] = args.seed_env
    if args.seed_agent is not None:
        overrides['train.agent_seed'] = args.seed_agent
    if args.eval_every is not None:
        overrides['train.eval_every'] = args.eval_every
    if args.eval_episodes is not None:
        overrides['train.eval_episodes'] = args.eval_episodes
    if args.cores is not None:
        overrides['train.cores'] = args.cores
    if args.no_progress:
        overrides['train.progress'] = False
    run = _run_config(args, overrides)

    out = output_dir(args.out)
    paths = {'config': os.path.join(out, 'config.yaml'),
             'metrics': os.path.join(out, 'metrics.csv'),
             'best_checkpoint': os.path.join(out, 'best.ckpt')}
    with open(paths['config'], 'w') as fh:
        fh.write(dump_config(run))
    manifest = RunManifest(command='train', config_hash=config_hash(run),
                           seeds={'env': run.train.env_seed, 'agent': run.train.agent_seed,
                                  'eval_base': run.train.eval_seed_base},
                           outputs=paths)
    manifest.write(out)
    try:
        best, records = learner.train(run, out_dir=out, metrics_path=paths['metrics'], best_path=None)
    except TrainingDiverged as exc:
        if exc.dump_path is not None:
            manifest.outputs['diverged_dump'] = exc.dump_path
        manifest.finalize(out, status='diverged')
        raise
    save_checkpoint(paths['best_checkpoint'], best.net, best.adam, best.meta)
    manifest.finalize(out)
    score = best.meta.get('score')
    logger.info('best checkpoint: episode ' + str(best.meta.get('episode')) + ', success ' + str(score))
    return(EXIT_OK)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    run = _run_from_meta(ckpt.meta, _run_config(args))
    seed_base = args.seed_base
    if seed_base is None:
        # past the seeds used for checkpoint selection
        seed_base = run.train.eval_seed_base + run.train.eval_episodes
    eps = run.train.eval_epsilon if args.epsilon is None else args.epsilon
    res = learner.evaluate(ckpt, args.episodes, seed_base, run, epsilon=eps, cores=args.cores)
    counts = res.outcomes['outcome'].value_counts()
    print(f'success rate: {res.success_rate:.4f} ({int(counts.get("success", 0))}/{args.episodes})')
    print(f'mean steps to source: {res.mean_steps:.1f}')
    for mode, n in counts.items():
        if mode != 'success':
            print(f'failures ({mode}): {int(n)}')
    if args.out is not None:
        write_table(res.outcomes, os.path.join(output_dir(args.out), 'eval_outcomes.csv'))
    return(EXIT_OK)


def cmd_spectra(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    zs = spectral.default_z_grid() if args.z_grid is None else read_z_grid(args.z_grid)
    nets = [c.net for c in ckpts]
    s_table, c_table = spectral.depth_composition_probe(nets, zs)
    mean_ks, threshold = spectral.calibrate_ks_threshold(width=nets[-1].config.hidden_width,
                                                         draws=args.calibration_draws, seed=args.seed)
    logger.info(f'KS calibration over {args.calibration_draws} fresh layers: mean {mean_ks:.4f}, '
                f'threshold {threshold:.4f}')
    out = output_dir(args.out)
    outputs = {}
    for k, (c, net) in enumerate(zip(ckpts, nets)):
        prefix = '' if len(nets) == 1 else f'ckpt{k}_'
        episode = c.meta.get('episode')
        for i, esd in enumerate(spectral.network_spectra(net, episode)[:-1]):
            name = f'{prefix}esd_layer{i}.csv'
            outputs[name] = write_table(spectral.esd_table([esd]), os.path.join(out, name))
        ks = spectral.ks_table(net, threshold)
        outputs[prefix + 'ks.csv'] = write_table(ks, os.path.join(out, prefix + 'ks.csv'))
    outputs['stieltjes.csv'] = write_table(s_table, os.path.join(out, 'stieltjes.csv'))
    outputs['contraction.csv'] = write_table(c_table, os.path.join(out, 'contraction.csv'))
    manifest = RunManifest(command='spectra', config_hash='', seeds={'calibration': args.seed}, outputs=outputs)
    manifest.finalize(out)
    return(EXIT_OK)


def cmd_tokens(args) -> int:
    if args.checkpoint is None and args.policy != 'random':
        raise ConfigError('tokens needs --checkpoint or --policy random')
    net = None
    run = _run_config(args)
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        net = ckpt.net
        run = _run_from_meta(ckpt.meta, run)
    eps = run.train.eval_epsilon if args.epsilon is None else args.epsilon
    episodes = []
    for i in range(args.episodes):
        obs, acts, _ = learner.record_episode(net, run, args.seed_base + i, eps)
        seq = tokenizer.serialize_episode(obs, acts)
        back_obs, back_acts, _ = tokenizer.parse_episode(tokenizer.from_ids(tokenizer.to_ids(seq)))
        if back_obs != obs or back_acts != acts:
            raise GrammarError(f'episode {i} does not survive the id round trip')
        episodes.append(seq)
    out = output_dir(args.out)
    path = tokenizer.write_token_file(episodes, os.path.join(out, 'tokens.txt'))
    manifest = RunManifest(command='tokens', config_hash=config_hash(run),
                           seeds={'seed_base': args.seed_base}, outputs={'tokens': path})
    manifest.finalize(out)
    return(EXIT_OK)


def cmd_plume(args) -> int:
    run = _run_config(args)
    df = plume.simulate(run.plume, args.seed, args.steps, args.every)
    out = output_dir(args.out)
    path = write_table(df, os.path.join(out, 'plume_snapshots.csv'))
    manifest = RunManifest(command='plume', config_hash=config_hash(run), seeds={'plume': args.seed},
                           outputs={'snapshots': path})
    manifest.finalize(out)
    return(EXIT_OK)


def build_parser():
    parser = argparse.ArgumentParser(prog='gpfplume', description='Grow-Prune-Freeze agents for odor plume navigation')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train an Expected SARSA GPF agent')
    p.add_argument('--config', default=None, help='YAML run config')
    p.add_argument('--episodes', type=int, default=None)
    p.add_argument('--gpf', type=_on_off, default=None, help='on|off, off keeps the single hidden layer')
    p.add_argument('--target', choices=['expected', 'greedy'], default=None)
    p.add_argument('--seed-env', type=int, default=None)
    p.add_argument('--seed-agent', type=int, default=None)
    p.add_argument('--eval-every', type=int, default=None)
    p.add_argument('--eval-episodes', type=int, default=None)
    p.add_argument('--cores', type=int, default=None, help='evaluation worker processes')
    p.add_argument('--no-progress', action='store_true')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint on held-out episodes')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--config', default=None, help='used when the checkpoint carries no run config')
    p.add_argument('--episodes', type=int, default=100)
    p.add_argument('--seed-base', type=int, default=None)
    p.add_argument('--epsilon', type=float, default=None)
    p.add_argument('--cores', type=int, default=1)
    p.add_argument('--out', default=None, help='also write per-episode outcomes here')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('spectra', help='layer spectra, MP KS statistics and depth Stieltjes tables')
    p.add_argument('--checkpoint', nargs='+', required=True, help='one or more snapshots, in order')
    p.add_argument('--z-grid', default=None, help="file of complex points, 're im' per line")
    p.add_argument('--calibration-draws', type=int, default=50)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser('tokens', help='roll episodes and write token sequences')
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--policy', choices=['random', 'checkpoint'], default='checkpoint')
    p.add_argument('--config', default=None)
    p.add_argument('--episodes', type=int, default=1)
    p.add_argument('--seed-base', type=int, default=0)
    p.add_argument('--epsilon', type=float, default=None)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser('plume', help='simulate the plume alone and write filament snapshots')
    p.add_argument('--config', default=None)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--steps', type=int, default=600)
    p.add_argument('--every', type=int, default=10)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_plume)
    return(parser)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return(args.func(args))
    except (TrainingDiverged, GrammarError) as exc:
        logger.error(str(exc))
        return(EXIT_ABORT)
    except (ConfigError, CheckpointError, SpectralError, ValueError) as exc:
        logger.error(str(exc))
        return(EXIT_INPUT)


if __name__ == '__main__':
    sys.exit(main())
