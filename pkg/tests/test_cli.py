import argparse
import contextlib
import io
import shutil
import tempfile
import unittest
from unittest import mock

import pandas

from pyeegmae import cli
from pyeegmae.entity import ConfigError, InvalidConfig
from pyeegmae.formats.metrics import read_metrics
from pyeegmae.system import System
from pyeegmae.tensor import Precision

TINY_RUN = '''# a two layer encoder on a toy corpus
preset = small
seed = 3
data_dir = {root}/corpus
out = {root}/runs
encoder.n_layers = 2
encoder.n_heads = 2
encoder.embed_dim = 4
encoder.mlp_dim = 8
encoder.patch_len = 4
encoder.max_channels = 6
encoder.max_patches = 6
synth.n_examples = 8
synth.n_channels = 2
synth.n_samples = 16
synth.sampling_rate = 16
synth.frequencies = 2, 5
pretrain.batch_size = 4
pretrain.max_epochs = 3
pretrain.warmup_epochs = 1
pretrain.stop_epoch = 2
finetune.batch_size = 4
finetune.epochs = 2
finetune.warmup_epochs = 1
'''

def quiet_system(run_text=None):
    """A mocked System with no environment and, optionally, a pyeegmae.run in the working directory.
    """
    system = mock.Mock(spec=System)
    system.get_environment_variable.return_value = None
    system.is_file.return_value = run_text is not None
    system.read_text.return_value = run_text
    return system

class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        run = cli.RunConfig()
        self.assertEqual((run.preset, run.seed, run.data_dir, run.out), ('small', 0, 'corpus', 'runs'))
        self.assertEqual(run.encoder.n_layers, 8)
        self.assertEqual(run.pretrain.batch_size, 4096)

    def test_sections(self):
        run = cli.RunConfig(TINY_RUN.format(root='/tmp'))
        self.assertEqual((run.encoder.embed_dim, run.encoder.mlp_dim), (4, 8))
        self.assertEqual(run.synth.frequencies, (2.0, 5.0))
        self.assertEqual(run.section('pretrain')['stop_epoch'], '2')
        self.assertEqual((run.pretrain.seed, run.finetune.seed, run.synth.seed, run.bench.seed), (3, 3, 3, 3))

    def test_section_seed_wins(self):
        self.assertEqual(cli.RunConfig('seed = 3\npretrain.seed = 9\n').pretrain.seed, 9)

    def test_section_errors_name_the_prefixed_key(self):
        with self.assertRaises(InvalidConfig) as context:
            cli.RunConfig('seed = 1\n\npretrain.batch_size = 0\n')
        self.assertEqual(context.exception.key, 'pretrain.batch_size')
        self.assertEqual(context.exception.line, 3)
        with self.assertRaises(InvalidConfig) as context:
            cli.RunConfig('encoder.n_layers = 3\n')
        self.assertEqual((context.exception.key, context.exception.line), ('encoder.n_layers', 1))

    def test_unknown_keys(self):
        with self.assertRaises(InvalidConfig) as context:
            cli.RunConfig('optim.lr = 1\n')
        self.assertEqual(context.exception.key, 'optim.lr')
        with self.assertRaises(InvalidConfig) as context:
            cli.RunConfig('preset = huge\n')
        self.assertEqual((context.exception.key, context.exception.line), ('preset', 1))

class TestRunFileResolution(unittest.TestCase):
    def test_explicit_path(self):
        system = quiet_system()
        system.read_text.return_value = 'seed = 1\n'
        self.assertEqual(cli.resolve_run_file('mine.run', system), 'seed = 1\n')
        system.read_text.assert_called_once_with('mine.run')
        system.get_environment_variable.assert_not_called()

    def test_environment_variable(self):
        system = quiet_system()
        system.get_environment_variable.return_value = 'env.run'
        system.read_text.return_value = ''
        cli.resolve_run_file(None, system)
        system.read_text.assert_called_once_with('env.run')

    def test_working_directory(self):
        self.assertEqual(cli.resolve_run_file(None, quiet_system('seed = 2\n')), 'seed = 2\n')
        self.assertIsNone(cli.resolve_run_file(None, quiet_system()))

    def test_unreadable(self):
        system = quiet_system()
        system.read_text.side_effect = IOError(2, 'No such file or directory')
        with self.assertRaises(ConfigError):
            cli.resolve_run_file('missing.run', system)

    def test_flags_override_run_file(self):
        args = argparse.Namespace(config=None, seed=5, precision='f64', out='elsewhere', data_dir=None)
        run = cli.load_run_config(args, quiet_system('seed = 1\nout = runs\npretrain.seed = 2\n'))
        self.assertEqual((run.seed, run.out, run.pretrain.seed, run.synth.seed), (5, 'elsewhere', 5, 5))
        self.assertIs(run.encoder.precision, Precision.F64)
        self.assertIs(run.bench.precision, Precision.F64)

class TestParser(unittest.TestCase):
    def test_global_flags_before_or_after_the_command(self):
        parser = cli.build_parser()
        self.assertEqual(parser.parse_args(['--seed', '4', 'generate']).seed, 4)
        self.assertEqual(parser.parse_args(['generate', '--seed', '4']).seed, 4)
        self.assertIsNone(parser.parse_args(['generate']).config)

    def test_bench_config(self):
        parser = cli.build_parser()
        self.assertEqual(parser.parse_args(['bench', '--config', 'small,base']).config, 'small,base')
        self.assertEqual(parser.parse_args(['--config', 'bench.run', 'bench']).config, 'bench.run')
        self.assertIsNone(parser.parse_args(['bench']).config)

    def test_command_required(self):
        with self.assertRaises(SystemExit), contextlib.redirect_stderr(io.StringIO()):
            cli.build_parser().parse_args([])

class TestCommands(unittest.TestCase):
    def setUp(self):
        self.root = tempfile.mkdtemp(prefix='pyeegmae_cli')
        self.system = System()
        self.run_file = self.system.join(self.root, 'tiny.run')
        self.system.write_bytes(self.run_file, TINY_RUN.format(root=self.root).encode('utf-8'))

    def tearDown(self):
        shutil.rmtree(self.root)

    def main(self, *argv):
        output = io.StringIO()
        with contextlib.redirect_stdout(output):
            status = cli.main(['--config', self.run_file] + list(argv))
        return status, output.getvalue().strip()

    def test_pipeline(self):
        status, manifest = self.main('generate')
        self.assertEqual(status, 0)
        self.assertEqual(len(pandas.read_csv(manifest)), 8)

        status, metrics = self.main('pretrain', '--epochs', '1')
        self.assertEqual(status, 0)
        self.assertEqual(read_metrics(metrics)['epoch'].tolist(), [1])
        checkpoint = self.system.join(self.root, 'runs', 'final.ckpt')

        status, path = self.main('reconstruct', '--checkpoint', checkpoint, '--input',
                                 self.system.join(self.root, 'corpus', 'example_000000.eegw'))
        self.assertEqual(status, 0)
        frame = pandas.read_csv(path)
        self.assertEqual(len(frame), 2 * 4 * 4)
        self.assertTrue(frame.loc[frame['masked'] == 1, 'masked_input'].isna().all())
        self.assertFalse(frame.loc[frame['masked'] == 0, 'masked_input'].isna().any())

        status, metrics = self.main('finetune', '--checkpoint', checkpoint, '--mode', 'linear_probe')
        self.assertEqual(status, 0)
        self.assertEqual(len(read_metrics(metrics)), 4)

    def test_configuration_errors_exit_with_two(self):
        self.assertEqual(self.main('finetune')[0], 2)
        self.assertEqual(self.main('generate', '--seed', '-1')[0], 2)
        self.assertEqual(cli.main(['--config', self.system.join(self.root, 'missing.run'), 'generate']), 2)

    def test_other_errors_exit_with_one(self):
        self.assertEqual(self.main('pretrain')[0], 1)

    def test_bench(self):
        status, path = self.main('bench', '--config', 'small', '--mechanisms', 'intra', '--channels', '1,2',
                                 '--patches', '2', '--repetitions', '3', '--out',
                                 self.system.join(self.root, 'runs'))
        self.assertEqual(status, 0)
        frame = pandas.read_csv(path)
        self.assertEqual(frame['C'].tolist(), [1, 2])
        self.assertEqual(frame['config'].tolist(), ['small', 'small'])
        self.assertTrue(self.system.is_file(self.system.join(self.root, 'runs', 'bench.dat')))
