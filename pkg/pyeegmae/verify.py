"""@ingroup pyeegmae
@file
The acceptance suite behind `pyeegmae verify`: oracle equivalence, invariants, complexity accounting, parameter
counts, loss closed forms, determinism and persistence; with `full`, toy-scale learning and empirical runtime too.
"""
import logging
import tempfile
from collections import OrderedDict

import numpy as np

from . import oracles
from .attention import (AttentionKind, AttentionProbe, MhaParams, attention_cost, inter_channel_attention,
                        intra_channel_attention, make_layer, score_elements, standard_attention)
from .bench import AttentionStack, SweepSpec, check_scaling, run_sweep
from .data import BandpowerClassifier, SynthSpec, generate_synthetic
from .encoder import EncoderConfig, build, forward, param_count, reconstruct
from .entity import PyEegMaeError
from .finetune import FinetuneConfig, finetune_run
from .formats.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, restore, save_checkpoint
from .pretrain import PretrainConfig, make_state, masked_batch, pretrain_run, pretrain_step, reconstruction_loss
from .system import System
from .tensor import Tensor, gradient_check, no_grad, seeded_generator
from .tokenizer import PatchBatch, embed_batch, mask_tokens

log = logging.getLogger(__name__)

## Reference model sizes of the presets, in parameters.
PRESET_SIZES = OrderedDict([('small', 3.58e6), ('base', 39.95e6), ('large', 85.15e6)])

ATTENTION_KINDS = (AttentionKind.Intra, AttentionKind.Inter, AttentionKind.Standard, AttentionKind.TwoAxis,
                   AttentionKind.Bottleneck)

class CheckResult(object):
    def __init__(self, name, passed, detail):
        self.name = name
        self.passed = passed
        self.detail = detail

def tiny_config(**overrides):
    """A two-layer 64-bit encoder small enough for loop oracles and finite differences.
    """
    values = dict(n_layers=2, n_heads=2, embed_dim=4, mlp_dim=8, patch_len=4, max_channels=8, max_patches=8,
                  precision='f64')
    values.update(overrides)
    return EncoderConfig(values)

def random_patch_batch(rng, n_channels, n_patches, patch_len, batch_size=1, width=None):
    """@returns A PatchBatch of standard normal patches, channel-padded to @p width with random pad content.
    """
    width = width or n_channels
    patches = rng.standard_normal((batch_size, width, n_patches, patch_len))
    pad_mask = np.zeros((batch_size, width), dtype=bool)
    pad_mask[:, :n_channels] = True
    channel_index = np.where(pad_mask, np.arange(width)[None, :], -1)
    return PatchBatch(patches, pad_mask, channel_index)

def check_attention_oracles(seed):
    worst = 0.0
    for n_channels in range(1, 5):
        for n_patches in range(1, 6):
            for width in (2, 4, 8):
                for n_heads in (1, 2):
                    rng = seeded_generator(seed, n_channels, n_patches, width, n_heads)
                    grid = rng.standard_normal((2, n_channels, n_patches, width))
                    pad_mask = np.ones((2, n_channels), dtype=bool)
                    pad_mask[1, n_channels - 1] = n_channels == 1
                    for kind in ATTENTION_KINDS:
                        layer = make_layer(kind, width, n_heads, rng, np.float64)
                        out = layer(Tensor(grid), pad_mask).numpy()
                        worst = max(worst, float(np.abs(out - oracles.attention_layer(layer, grid, pad_mask)).max()))
    return worst < 1e-10, 'max abs error {:.3g}'.format(worst)

def check_collapse(seed):
    rng = seeded_generator(seed, 10)
    worst = 0.0
    for width, n_heads in ((4, 2), (8, 1)):
        params = MhaParams.initialize(width, n_heads, rng, np.float64)
        single_channel = Tensor(rng.standard_normal((2, 1, 5, width)))
        worst = max(worst, float(np.abs(intra_channel_attention(single_channel, params).numpy()
                                        - standard_attention(single_channel, params).numpy()).max()))
        single_patch = Tensor(rng.standard_normal((2, 4, 1, width)))
        worst = max(worst, float(np.abs(inter_channel_attention(single_patch, params).numpy()
                                        - standard_attention(single_patch, params).numpy()).max()))
    return worst <= 1e-12, 'max abs error {:.3g}'.format(worst)

def check_pad_invariance(seed, instances=20):
    worst = 0.0
    for instance in range(instances):
        rng = seeded_generator(seed, 11, instance)
        config = tiny_config(embed_dim=8, mechanism=('alternating', 'two_axis', 'bottleneck')[instance % 3])
        model = build(config, seed + instance)
        n_channels, n_patches = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        padded = random_patch_batch(rng, n_channels, n_patches, config.patch_len, width=config.max_channels)
        real = PatchBatch(padded.patches[:, :n_channels], padded.pad_mask[:, :n_channels],
                          padded.channel_index[:, :n_channels])
        with no_grad():
            out_real = forward(model, embed_batch(real, model.embedding)).numpy()
            out_padded = forward(model, embed_batch(padded, model.embedding)).numpy()
        worst = max(worst, float(np.abs(out_real - out_padded[:, :n_channels]).max()))
    return worst < 1e-6, 'max abs change {:.3g} over {} instances'.format(worst, instances)

def check_gradients(seed):
    config = tiny_config(max_channels=4, max_patches=4)
    model = build(config, seed)
    patch_batch = random_patch_batch(seeded_generator(seed, 12), 2, 3, config.patch_len, batch_size=2, width=3)
    def loss():
        batch = mask_tokens(embed_batch(patch_batch, model.embedding), 0.5, seed)
        predicted = reconstruct(model, forward(model, batch))
        return reconstruction_loss(batch.raw_patches, predicted, batch.mask, 0.1, batch.pad_mask).objective
    errors = gradient_check(loss, model.named_parameters())
    name, worst = max(errors, key=lambda e: e[1])
    return worst < 1e-4, 'worst relative error {:.3g} ({})'.format(worst, name)

def check_complexity(seed):
    rng = seeded_generator(seed, 13)
    mismatches = []
    for n_channels in (1, 2, 3, 5, 8):
        for n_patches in (1, 2, 4, 7):
            grid = Tensor(rng.standard_normal((1, n_channels, n_patches, 4)))
            for kind in ATTENTION_KINDS + (AttentionKind.Alternating,):
                config = tiny_config(embed_dim=4, n_heads=1)
                probe = AttentionProbe()
                with no_grad():
                    AttentionStack(kind, config, rng)(grid, probe)
                if probe.peak_layer_elements != score_elements(kind, n_channels, n_patches):
                    mismatches.append((kind.value, n_channels, n_patches))
    ratio = score_elements('standard', 64, 20) / float(score_elements('alternating', 64, 20))
    reports = [attention_cost(kind, c, 20, 768) for kind in ('standard', 'intra') for c in (8, 16, 32, 64)]
    slopes = {v.mechanism.value: v.element_slope for v in check_scaling(reports)}
    passed = (not mismatches and ratio == 20.0 and abs(slopes['standard'] - 2.0) < 1e-9
              and abs(slopes['intra'] - 1.0) < 1e-9)
    return passed, 'ratio {:g}, slopes standard {:.3f} intra {:.3f}, {} count mismatches'.format(
        ratio, slopes['standard'], slopes['intra'], len(mismatches))

def check_param_counts(seed):
    details = []
    passed = True
    for name, target in PRESET_SIZES.items():
        count = param_count(EncoderConfig.preset(name))
        passed = passed and abs(count / target - 1.0) <= 0.02
        details.append('{} {:.2f}M'.format(name, count / 1e6))
    extra = param_count(EncoderConfig.preset('large', mechanism='two_axis')) - param_count(EncoderConfig.preset('large'))
    passed = passed and abs(extra / 20e6 - 1.0) <= 0.1
    built = build(EncoderConfig.preset('small'), seed).param_count()
    passed = passed and built == param_count(EncoderConfig.preset('small'))
    details.append('two-axis +{:.2f}M'.format(extra / 1e6))
    return passed, ', '.join(details)

def check_loss_closed_forms(seed, alpha=0.1, delta=0.3):
    rng = seeded_generator(seed, 14)
    patches = rng.standard_normal((2, 3, 4, 5))
    mask = rng.random((2, 3, 4)) < 0.5
    mask[0, 0, 0] = True
    mask[1, 2, 3] = False
    perfect = reconstruction_loss(patches, Tensor(patches), mask, alpha)
    offset = reconstruction_loss(patches, Tensor(patches + delta), mask, alpha)
    expected = patches.shape[-1] * delta ** 2
    errors = [perfect.total, abs(offset.l_masked - expected), abs(offset.l_visible - expected),
              abs(offset.total - expected * (1 + alpha))]
    additive = abs((offset.total - offset.l_masked) - alpha * offset.l_visible) <= 1e-15 * offset.total
    return max(errors) < 1e-10 and additive, 'max error {:.3g}'.format(max(errors))

def check_determinism(seed):
    config = tiny_config(embed_dim=8, precision='f32', max_channels=4)
    pretrain_config = PretrainConfig(batch_size=2, peak_lr=1e-3, warmup_epochs=0, max_epochs=10, stop_epoch=10)
    rng = seeded_generator(seed, 15)
    first_batch = random_patch_batch(rng, 3, 4, config.patch_len, batch_size=2)
    second_batch = random_patch_batch(rng, 3, 4, config.patch_len, batch_size=2)
    losses = []
    models = []
    for _ in range(2):
        model = build(config, seed)
        state = make_state(model, pretrain_config, steps_per_epoch=1)
        _, breakdown = pretrain_step(model, masked_batch(model, first_batch, 0.5, seed), state, pretrain_config)
        losses.append(breakdown.total)
        models.append((model, state))
    identical = losses[0] == losses[1]
    model, state = models[0]
    with tempfile.TemporaryDirectory() as directory:
        path = System().join(directory, 'step.ckpt')
        save_checkpoint(path, model, state.optimizer, state.step, 1)
        checkpoint = load_checkpoint(path)
        payload = encode_checkpoint(checkpoint.config, checkpoint.blobs)
        round_trip = payload == System().read_bytes(path) and decode_checkpoint(payload).config == config
    resumed = restore(checkpoint)
    resumed_state = make_state(resumed, pretrain_config, steps_per_epoch=1)
    resumed_state.optimizer.load_moments(*checkpoint.moments(), step_count=checkpoint.step)
    _, expected = pretrain_step(model, masked_batch(model, second_batch, 0.5, seed + 1), state, pretrain_config)
    _, actual = pretrain_step(resumed, masked_batch(resumed, second_batch, 0.5, seed + 1), resumed_state,
                              pretrain_config)
    drift = abs(expected.total - actual.total)
    return identical and round_trip and drift < 1e-6, 'first-step losses {}, round trip {}, resume drift {:.3g}'.format(
        'identical' if identical else 'differ', 'exact' if round_trip else 'differs', drift)

def check_bandpower(seed):
    corpus = generate_synthetic(SynthSpec(n_examples=400, frequencies=(6.0, 24.0), noise_std=0.5, seed=seed))
    train, test = corpus.split(0.5, seed)
    classifier = BandpowerClassifier((6.0, 24.0)).fit([train[i] for i in range(len(train))], train.labels)
    accuracy = float(np.mean(classifier.predict([test[i] for i in range(len(test))]) == test.labels))
    return accuracy >= 0.95, 'accuracy {:.3f}'.format(accuracy)

def check_toy_training(seed):
    corpus = generate_synthetic(SynthSpec(n_examples=10000, n_channels=4, n_samples=1280, noise_std=0.3, seed=seed))
    train, held_out = corpus.split(0.8, seed)
    model = build(EncoderConfig(n_layers=2, n_heads=2, embed_dim=32, mlp_dim=64, max_channels=4, max_patches=20),
                  seed)
    pretrain_config = PretrainConfig(batch_size=256, peak_lr=3e-3, min_lr=1e-5, warmup_epochs=1, max_epochs=5,
                                     stop_epoch=5, seed=seed)
    probe_config = FinetuneConfig(mode='linear_probe', batch_size=256, peak_lr=1e-2, epochs=30, warmup_epochs=1,
                                  weight_decay=0.0, seed=seed)
    with tempfile.TemporaryDirectory() as directory:
        history = pretrain_run(model, train, pretrain_config, directory).history
        rows = finetune_run(model, train, probe_config, directory, validation=held_out).history
    drop = 1.0 - history[-1].total / history[0].total
    accuracy = [row for row in rows if row['split'] == 'val'][-1]['balanced_acc']
    return drop >= 0.3 and accuracy >= 0.9, 'loss drop {:.1%}, probe balanced accuracy {:.3f}'.format(drop, accuracy)

def check_runtime(seed):
    reports = run_sweep(SweepSpec(mechanisms=('standard', 'alternating'), configs=('large',), channels=(1, 64),
                                  seed=seed))
    median = {(r.mechanism.value, r.n_channels): r.median_ns for r in reports}
    if any(r.status != 'ok' for r in reports):
        return False, 'sweep status {}'.format(sorted(set(r.status for r in reports)))
    wide = median[('standard', 64)] / float(median[('alternating', 64)])
    narrow = median[('standard', 1)] / float(median[('alternating', 1)])
    return wide >= 2.0 and 0.5 <= narrow <= 2.0, 'standard/alternating at C=64 {:.2f}x, at C=1 {:.2f}x'.format(
        wide, narrow)

FAST_CHECKS = OrderedDict([
    ('attention oracles', check_attention_oracles),
    ('collapse identities', check_collapse),
    ('pad invariance', check_pad_invariance),
    ('gradients', check_gradients),
    ('complexity counts', check_complexity),
    ('parameter counts', check_param_counts),
    ('loss closed forms', check_loss_closed_forms),
    ('determinism and persistence', check_determinism),
])

FULL_CHECKS = OrderedDict([
    ('bandpower oracle', check_bandpower),
    ('toy pre-training and probe', check_toy_training),
    ('empirical runtime', check_runtime),
])

def run_checks(full=False, seed=0):
    """Runs the suite; a check that raises counts as failed.

    @returns A list of CheckResults.
    """
    checks = OrderedDict(FAST_CHECKS)
    if full:
        checks.update(FULL_CHECKS)
    results = []
    for name, check in checks.items():
        log.debug('Running check %s', name)
        try:
            passed, detail = check(seed)
        except PyEegMaeError as error:
            log.exception('Check %s raised', name)
            passed, detail = False, '{}: {}'.format(type(error).__name__, error)
        results.append(CheckResult(name, bool(passed), detail))
    return results

def render_table(results):
    """@returns The pass/fail table as text.
    """
    width = max(len(r.name) for r in results)
    lines = ['{}  result  detail'.format('check'.ljust(width)), '{}  ------  ------'.format('-' * width)]
    for result in results:
        lines.append('{}  {}  {}'.format(result.name.ljust(width), 'PASS  ' if result.passed else 'FAIL  ',
                                         result.detail))
    return '\n'.join(lines)
