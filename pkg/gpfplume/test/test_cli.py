import json
import os
import numpy as np
import pandas as pd
import pytest

from gpfplume.cli import main, EXIT_OK, EXIT_INPUT, EXIT_ABORT
from gpfplume.config import GpfConfig, load_config
from gpfplume.util import ConfigError
from gpfplume import gpf
from gpfplume.checkpoint import save_checkpoint, load_checkpoint
from gpfplume.tokenizer import read_token_file, parse_episode

SMALL = """
env:
  max_steps: 20
gpf:
  hidden_width: 8
train:
  eval_every: 2
  eval_episodes: 2
  probe_size: 32
  progress: false
"""


def _small_config(tmp_path):
    path = tmp_path / 'small.yaml'
    path.write_text(SMALL)
    return(str(path))


def test_train_zero_episodes(tmp_path):
    out = tmp_path / 'run'
    code = main(['train', '--config', _small_config(tmp_path), '--episodes', '0', '--out', str(out)])
    assert code == EXIT_OK
    manifest = json.load(open(out / 'manifest.json'))
    assert manifest['status'] == 'finished'
    assert manifest['command'] == 'train'
    assert manifest['finished'] is not None
    metrics = pd.read_csv(out / 'metrics.csv')
    assert len(metrics) == 0 and 'success_rate' in metrics.columns
    ck = load_checkpoint(out / 'best.ckpt')
    assert ck.net.hidden_layers == 1
    assert (out / 'config.yaml').exists()


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / 'run'
    assert main(['train', '--config', _small_config(tmp_path), '--episodes', '2', '--out', str(out)]) == EXIT_OK
    assert len(pd.read_csv(out / 'metrics.csv')) == 1
    code = main(['eval', '--checkpoint', str(out / 'best.ckpt'), '--episodes', '3', '--out', str(tmp_path / 'ev')])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert 'success rate' in printed
    outcomes = pd.read_csv(tmp_path / 'ev' / 'eval_outcomes.csv')
    assert len(outcomes) == 3


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / 'bad.ckpt'
    bad.write_bytes(b'junk')
    assert main(['eval', '--checkpoint', str(bad)]) == EXIT_INPUT
    assert main(['spectra', '--checkpoint', str(bad), '--out', str(tmp_path)]) == EXIT_INPUT


def test_bad_config_key(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('train:\n  bogus: 1\n')
    assert main(['train', '--config', str(path), '--out', str(tmp_path / 'run')]) == EXIT_INPUT
    path.write_text('plume:\n  dt: 5.0\n')
    assert main(['plume', '--config', str(path), '--out', str(tmp_path / 'run')]) == EXIT_INPUT


def test_tokens_random_policy(tmp_path):
    out = tmp_path / 'tok'
    code = main(['tokens', '--policy', 'random', '--episodes', '3', '--config', _small_config(tmp_path),
                 '--out', str(out)])
    assert code == EXIT_OK
    episodes = read_token_file(out / 'tokens.txt')
    assert len(episodes) == 3
    for seq in episodes:
        obs, acts, _ = parse_episode(seq)
        assert len(obs) == len(acts) + 1
    # neither a checkpoint nor the random policy
    assert main(['tokens', '--out', str(out)]) == EXIT_INPUT


def test_plume_and_out_dir_env(tmp_path, monkeypatch):
    target = tmp_path / 'from_env'
    monkeypatch.setenv('GPF_OUT_DIR', str(target))
    assert main(['plume', '--steps', '50', '--every', '10']) == EXIT_OK
    df = pd.read_csv(target / 'plume_snapshots.csv')
    assert list(df.columns) == ['time', 'filament_id', 'x', 'y', 'age']
    assert json.load(open(target / 'manifest.json'))['command'] == 'plume'


def test_spectra_four_layers(tmp_path):
    net = gpf.build_network(GpfConfig(hidden_width=16), seed=0, hidden_layers=4)
    adam = gpf.AdamState.from_config(net.config)
    ckpt = save_checkpoint(tmp_path / 'deep.ckpt', net, adam, {'episode': 3000})
    grid = tmp_path / 'z.txt'
    grid.write_text('0.5 0.1\n1.0 0.1\n')
    out = tmp_path / 'spec'
    code = main(['spectra', '--checkpoint', str(ckpt), '--z-grid', str(grid), '--calibration-draws', '3',
                 '--out', str(out)])
    assert code == EXIT_OK
    esd_files = sorted(f for f in os.listdir(out) if f.startswith('esd_layer'))
    assert esd_files == ['esd_layer0.csv', 'esd_layer1.csv', 'esd_layer2.csv', 'esd_layer3.csv']
    first = pd.read_csv(out / 'esd_layer0.csv')
    assert len(first) == 22 and set(first['episode']) == {3000}
    s_table = pd.read_csv(out / 'stieltjes.csv')
    assert len(s_table) == 4 * 2
    np.testing.assert_allclose(sorted(set(s_table['re_z'])), [0.5, 1.0])
    assert len(pd.read_csv(out / 'contraction.csv')) == 3
    assert len(pd.read_csv(out / 'ks.csv')) == 5


def test_malformed_yaml(tmp_path):
    path = tmp_path / 'broken.yaml'
    path.write_text('train:\n  episodes: [1, 2\n')
    assert main(['train', '--config', str(path), '--out', str(tmp_path / 'run')]) == EXIT_INPUT
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(str(path))


def test_train_nan_exits_with_dump(tmp_path, monkeypatch):
    real = gpf.build_network

    def build(*args, **kw):
        net = real(*args, **kw)
        net.layers[0].W[0, :] = np.nan
        return(net)
    monkeypatch.setattr(gpf, 'build_network', build)
    out = tmp_path / 'run'
    code = main(['train', '--config', _small_config(tmp_path), '--episodes', '2', '--out', str(out)])
    assert code == EXIT_ABORT
    manifest = json.load(open(out / 'manifest.json'))
    assert manifest['status'] == 'diverged'
    dumps = sorted(f for f in os.listdir(out) if f.startswith('diverged_ep'))
    assert dumps == ['diverged_ep0.ckpt']
    assert manifest['outputs']['diverged_dump'] == str(out / 'diverged_ep0.ckpt')
    assert not (out / 'best.ckpt').exists()
