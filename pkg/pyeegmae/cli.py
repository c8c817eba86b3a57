"""@ingroup pyeegmae
@file
The `pyeegmae` command: generate, pretrain, finetune, reconstruct, bench and verify, driven by a run file.
"""
import argparse
import logging
import sys
from collections import OrderedDict

import numpy as np
import pandas
from voluptuous import Match, Optional, Schema

from . import __version__
from .bench import SweepSpec, check_scaling, run_sweep, write_csv, write_dat
from .data import SynthSpec, collate, generate_synthetic, load_manifest, save_corpus
from .encoder import EncoderConfig, build, forward, reconstruct
from .entity import ConfigEntity, ConfigError, ContractError, InvalidConfig, PyEegMaeError, Seed, Text
from .finetune import FinetuneConfig, finetune_run
from .formats.checkpoint import load_checkpoint, restore
from .formats.recording import load_recording
from .pretrain import PretrainConfig, masked_batch, pretrain_run
from .system import System
from .tensor import no_grad
from .verify import render_table, run_checks

log = logging.getLogger(__name__)

## Name of the run file picked up from the working directory.
DEFAULT_RUN_FILE = 'pyeegmae.run'

## Environment variable holding a run file path.
RUN_FILE_VARIABLE = 'PYEEGMAE_CONFIG'

RECONSTRUCTION_NAME = 'reconstruction.csv'

## Run file sections, in the order they are validated.
SECTIONS = OrderedDict([
    ('encoder', EncoderConfig),
    ('pretrain', PretrainConfig),
    ('finetune', FinetuneConfig),
    ('synth', SynthSpec),
    ('bench', SweepSpec),
])

## Sections whose seed defaults to the run seed.
SEEDED_SECTIONS = ('pretrain', 'finetune', 'synth', 'bench')

class RunConfig(ConfigEntity):
    """Everything one invocation needs: the encoder preset, data paths, the run seed, and `section.key` overrides for
    the encoder, pretrain, finetune, synth and bench configurations.

    @code
    preset = small
    seed = 7
    data_dir = corpus
    encoder.precision = f64
    pretrain.batch_size = 256
    pretrain.stop_epoch = 5
    @endcode
    Each section is validated by its own entity; errors are reported with the prefixed key and its run file line.
    """
    @property
    def schema(self):
        return Schema({
            Optional('preset', default='small'): Text,
            Optional('seed', default=0): Seed,
            Optional('data_dir', default='corpus'): Text,
            Optional('validation_dir', default=''): Text,
            Optional('out', default='runs'): Text,
            Optional('checkpoint', default=''): Text,
            Optional('input', default=''): Text,
            Match(r'^({})\.\w+$'.format('|'.join(SECTIONS))): object,
        })

    def section(self, name):
        """@returns The dictionary of `name.key` values of one section, with the prefix removed.
        """
        prefix = name + '.'
        return {key[len(prefix):]: value for key, value in self.decoded.items() if key.startswith(prefix)}

    def validate(self):
        for name, entity in SECTIONS.items():
            values = self.section(name)
            if name in SEEDED_SECTIONS:
                values.setdefault('seed', self.seed)
            try:
                if name == 'encoder':
                    built = EncoderConfig.preset(self.preset, **values)
                else:
                    built = entity(values)
            except InvalidConfig as error:
                key = error.key if error.key in (None, 'preset') else '{}.{}'.format(name, error.key)
                raise InvalidConfig(error.detail, key=key, line=self.lines.get(key)) from error
            setattr(self, name, built)

def resolve_run_file(path=None, system=None):
    """Finds the run file: @p path, else the PYEEGMAE_CONFIG environment variable, else pyeegmae.run in the working
    directory.

    @returns The run file text, or None if no run file applies.
    @throws ConfigError if an explicitly named run file cannot be read.
    """
    system = system or System()
    if path is None:
        path = system.get_environment_variable(RUN_FILE_VARIABLE)
        if path is not None:
            log.debug('Using run file %s from %s', path, RUN_FILE_VARIABLE)
    if path is None:
        if not system.is_file(DEFAULT_RUN_FILE):
            log.debug('No run file found, using defaults')
            return None
        path = DEFAULT_RUN_FILE
    try:
        return system.read_text(path)
    except EnvironmentError as error:
        log.exception('Run file %s could not be read', path)
        raise ConfigError('cannot read run file {} ({})'.format(path, error.strerror or error))

def load_run_config(args, system=None):
    """Builds the RunConfig of an invocation; command line flags override run file values.

    @returns A RunConfig.
    """
    text = resolve_run_file(getattr(args, 'config', None), system)
    overrides = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
        overrides.update(('{}.seed'.format(name), args.seed) for name in SEEDED_SECTIONS)
    if getattr(args, 'precision', None) is not None:
        overrides['encoder.precision'] = args.precision
        overrides['bench.precision'] = args.precision
    if getattr(args, 'out', None) is not None:
        overrides['out'] = args.out
    if getattr(args, 'data_dir', None) is not None:
        overrides['data_dir'] = args.data_dir
    return RunConfig(text, **overrides)

def _with_epochs(config, epochs):
    if epochs is None:
        return config
    if isinstance(config, PretrainConfig):
        return config.replace(stop_epoch=epochs, max_epochs=max(config.max_epochs, epochs),
                              warmup_epochs=min(config.warmup_epochs, max(config.max_epochs, epochs) - 1))
    return config.replace(epochs=epochs, warmup_epochs=min(config.warmup_epochs, epochs - 1))

def command_generate(args, system):
    run = load_run_config(args, system)
    spec = run.synth if args.examples is None else run.synth.replace(n_examples=args.examples)
    manifest = save_corpus(generate_synthetic(spec), run.data_dir, system)
    print(manifest)
    return 0

def command_pretrain(args, system):
    run = load_run_config(args, system)
    config = _with_epochs(run.pretrain, args.epochs)
    dataset = load_manifest(run.data_dir, system)
    model = build(run.encoder, run.seed)
    log.info('Pre-training a %s encoder (%d parameters) on %d recordings', run.preset, model.param_count(),
             len(dataset))
    result = pretrain_run(model, dataset, config, run.out, resume=args.resume, system=system)
    if len(result.history) > 1 and result.history[-1].total >= result.history[0].total:
        log.warning('Final epoch total %.6g did not improve on the first epoch %.6g', result.history[-1].total,
                    result.history[0].total)
    print(result.metrics_path)
    return 0

def _checkpoint_path(args, run):
    path = args.checkpoint or run.checkpoint
    if not path:
        raise ConfigError('a checkpoint is required (--checkpoint or the run file)', key='checkpoint',
                          line=run.lines.get('checkpoint'))
    return path

def command_finetune(args, system):
    run = load_run_config(args, system)
    config = _with_epochs(run.finetune, args.epochs)
    if args.mode is not None:
        config = config.replace(mode=args.mode)
    model = restore(load_checkpoint(_checkpoint_path(args, run), system))
    dataset = load_manifest(run.data_dir, system)
    validation = load_manifest(run.validation_dir, system) if run.validation_dir else None
    result = finetune_run(model, dataset, config, run.out, validation=validation, system=system)
    print(result.metrics_path)
    return 0

def reconstruction_frame(model, recording, ratio, seed):
    """Masks one recording and reconstructs it.

    @returns A pandas.DataFrame with one row per (channel, patch, sample): the normalized original, the masked input
    (NaN where masked) and the reconstruction.
    """
    config = model.config
    patch_batch = collate([recording.zscore()], config.patch_len, config.patch_stride, config.max_channels,
                          trim=True)
    with no_grad():
        batch = masked_batch(model, patch_batch, ratio, seed)
        predicted = reconstruct(model, forward(model, batch)).numpy()[0]
    original = batch.raw_patches[0]
    mask = batch.mask[0]
    channels, patches, length = original.shape
    channel, position, sample = np.meshgrid(np.arange(channels), np.arange(patches), np.arange(length),
                                            indexing='ij')
    masked = np.broadcast_to(mask[:, :, None], original.shape)
    return pandas.DataFrame(OrderedDict([
        ('channel', channel.ravel()),
        ('patch', position.ravel()),
        ('sample', sample.ravel()),
        ('masked', masked.ravel().astype(int)),
        ('original', original.ravel()),
        ('masked_input', np.where(masked, np.nan, original).ravel()),
        ('reconstructed', predicted.ravel()),
    ]))

def command_reconstruct(args, system):
    run = load_run_config(args, system)
    source = args.input or run.input
    if not source:
        raise ConfigError('an input recording is required (--input or the run file)', key='input',
                          line=run.lines.get('input'))
    model = restore(load_checkpoint(_checkpoint_path(args, run), system))
    frame = reconstruction_frame(model, load_recording(source, system), run.pretrain.mask_ratio, run.seed)
    system.create_directory(run.out)
    path = system.join(run.out, RECONSTRUCTION_NAME)
    frame.to_csv(path, index=False)
    log.info('Wrote %d reconstructed samples to %s', len(frame), path)
    print(path)
    return 0

def command_bench(args, system):
    # --config names a run file if one exists at that path, else comma separated presets
    presets = None
    if args.config is not None and not system.is_file(args.config):
        presets, args.config = args.config, None
    run = load_run_config(args, system)
    changes = {}
    for key, value in (('mechanisms', args.mechanisms), ('configs', presets), ('channels', args.channels),
                       ('n_patches', args.patches), ('repetitions', args.repetitions)):
        if value is not None:
            changes[key] = value
    spec = run.bench.replace(**changes)
    reports = run_sweep(spec, system)
    system.create_directory(run.out)
    csv_path, dat_path = system.join(run.out, 'bench.csv'), system.join(run.out, 'bench.dat')
    write_csv(reports, csv_path)
    write_dat(reports, dat_path, system)
    try:
        for verdict in check_scaling(reports):
            log.info('%r: %s', verdict, 'ok' if verdict.passed else 'MISMATCH')
    except ContractError as error:
        log.info('Slopes not fitted: %s', error)
    print(csv_path)
    return 0

def command_verify(args, system): #pylint: disable=unused-argument
    results = run_checks(full=args.full, seed=args.seed or 0)
    print(render_table(results))
    return 0 if all(r.passed for r in results) else 1

def _global_flags(parser, default):
    parser.add_argument('--config', metavar='PATH', default=default,
                        help='run file (default: ${}, else ./{})'.format(RUN_FILE_VARIABLE, DEFAULT_RUN_FILE))
    _common_flags(parser, default)

def _common_flags(parser, default):
    parser.add_argument('--seed', type=int, metavar='U64', default=default, help='run seed')
    parser.add_argument('--out', metavar='DIR', default=default, help='output directory')
    parser.add_argument('--precision', choices=('f32', 'f64'), default=default, help='parameter precision')
    parser.add_argument('--verbose', action='store_true', default=default, help='debug logging')

def build_parser():
    """@returns The argparse.ArgumentParser of the `pyeegmae` command.
    """
    parser = argparse.ArgumentParser(prog='pyeegmae', description='Compact multi-channel waveform encoder.')
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    _global_flags(parser, None)
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, argparse.SUPPRESS)
    bench_shared = argparse.ArgumentParser(add_help=False)
    _common_flags(bench_shared, argparse.SUPPRESS)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    generate = commands.add_parser('generate', parents=[shared], help='write a synthetic corpus')
    generate.add_argument('--examples', type=int, help='number of recordings')
    generate.add_argument('--data-dir', help='corpus directory')
    generate.set_defaults(handler=command_generate)

    pretrain = commands.add_parser('pretrain', parents=[shared], help='masked-autoencoding pre-training')
    pretrain.add_argument('--epochs', type=int, help='stop after this epoch')
    pretrain.add_argument('--resume', metavar='CKPT', help='continue from a checkpoint')
    pretrain.add_argument('--data-dir', help='corpus directory')
    pretrain.set_defaults(handler=command_pretrain)

    finetune = commands.add_parser('finetune', parents=[shared], help='linear probe or full fine-tuning')
    finetune.add_argument('--checkpoint', metavar='CKPT', help='pre-trained encoder')
    finetune.add_argument('--epochs', type=int, help='number of epochs')
    finetune.add_argument('--mode', choices=('linear_probe', 'full'))
    finetune.add_argument('--data-dir', help='labeled corpus directory')
    finetune.set_defaults(handler=command_finetune)

    recon = commands.add_parser('reconstruct', parents=[shared], help='write masked reconstructions as CSV')
    recon.add_argument('--checkpoint', metavar='CKPT', help='pre-trained encoder')
    recon.add_argument('--input', metavar='EEGW', help='recording to mask and reconstruct')
    recon.set_defaults(handler=command_reconstruct)

    bench = commands.add_parser('bench', parents=[bench_shared], help='attention cost sweep')
    bench.add_argument('--config', metavar='PRESETS|PATH', default=argparse.SUPPRESS,
                       help='comma separated presets (small, base, large), or a run file')
    bench.add_argument('--mechanisms', help='comma separated attention kinds')
    bench.add_argument('--channels', help='comma separated channel counts')
    bench.add_argument('--patches', type=int, help='patches per channel')
    bench.add_argument('--repetitions', type=int, help='timed repetitions per point')
    bench.set_defaults(handler=command_bench)

    verify = commands.add_parser('verify', parents=[shared], help='run the acceptance suite')
    verify.add_argument('--full', action='store_true', help='include toy training and empirical runtime')
    verify.set_defaults(handler=command_verify)
    return parser

def main(argv=None, system=None):
    """Runs one subcommand.

    @param argv The arguments after the program name; defaults to sys.argv[1:].
    @returns The exit status: 0 on success, 2 for configuration errors, 1 for any other failure.
    """
    args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
    if args.verbose:
        logging.getLogger('pyeegmae').setLevel(logging.DEBUG)
    elif logging.getLogger('pyeegmae').level == logging.NOTSET:
        logging.getLogger('pyeegmae').setLevel(logging.INFO)
    system = system or System()
    try:
        return args.handler(args, system)
    except ConfigError as error:
        log.error('Configuration error: %s', error)
        return 2
    except PyEegMaeError as error:
        log.error('%s: %s', type(error).__name__, error)
        return 1
