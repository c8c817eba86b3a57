import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pyeegmae import oracles
from pyeegmae.attention import AttentionProbe, encoder_cost
from pyeegmae.encoder import EncoderConfig, build, drop_path, forward, param_count, reconstruct
from pyeegmae.entity import InvalidConfig, RangeError
from pyeegmae.tensor import Tensor, seeded_generator
from pyeegmae.tokenizer import PatchBatch, embed_batch

def tiny(**overrides):
    values = dict(n_layers=2, n_heads=2, embed_dim=4, mlp_dim=8, patch_len=4, max_channels=6, max_patches=6,
                  precision='f64')
    values.update(overrides)
    return EncoderConfig(values)

def patch_batch(rng, n_channels=3, n_patches=5, width=4, patch_len=4):
    pad_mask = np.zeros((2, width), dtype=bool)
    pad_mask[:, :n_channels] = True
    pad_mask[1, n_channels - 1] = False
    patches = rng.standard_normal((2, width, n_patches, patch_len)) * pad_mask[:, :, None, None]
    return PatchBatch(patches, pad_mask, np.where(pad_mask, np.arange(width)[None, :], -1))

class TestEncoderConfig(unittest.TestCase):
    def test_presets(self):
        config = EncoderConfig.preset('Large', precision='f64')
        self.assertEqual((config.n_layers, config.embed_dim, config.mlp_dim, config.n_heads), (12, 768, 3072, 12))
        self.assertEqual(config.dtype, np.float64)
        with self.assertRaises(InvalidConfig) as context:
            EncoderConfig.preset('huge')
        self.assertEqual(context.exception.key, 'preset')

    def test_alternating_needs_even_layers(self):
        with self.assertRaises(InvalidConfig) as context:
            EncoderConfig('n_layers = 3\n')
        self.assertEqual(context.exception.key, 'n_layers')
        self.assertEqual(context.exception.line, 1)
        self.assertEqual(EncoderConfig(n_layers=3, mechanism='standard').n_layers, 3)

    def test_heads_divide_width(self):
        with self.assertRaises(InvalidConfig):
            EncoderConfig(embed_dim=10, n_heads=4)

    def test_unknown_mechanism(self):
        with self.assertRaises(InvalidConfig):
            EncoderConfig(mechanism='linformer')

    def test_stride_defaults_to_patch_length(self):
        self.assertEqual(EncoderConfig().patch_stride, 64)
        self.assertEqual(EncoderConfig(stride=32).patch_stride, 32)

class TestParameterCounts(unittest.TestCase):
    def test_closed_form_matches_built_models(self):
        for mechanism in ('alternating', 'standard', 'two_axis', 'bottleneck'):
            config = tiny(mechanism=mechanism)
            self.assertEqual(build(config, 0).param_count(), param_count(config), mechanism)

    def test_preset_sizes(self):
        for name, expected in (('small', 3.58e6), ('base', 39.95e6), ('large', 85.15e6)):
            count = param_count(EncoderConfig.preset(name))
            self.assertLess(abs(count - expected) / expected, 0.02, name)

    def test_two_axis_overhead(self):
        extra = param_count(EncoderConfig.preset('large', mechanism='two_axis')) - param_count(
            EncoderConfig.preset('large'))
        self.assertLess(abs(extra - 20e6) / 20e6, 0.1)

class TestEncoderModel(unittest.TestCase):
    def test_build_is_deterministic(self):
        first, second, other = build(tiny(), 3).state(), build(tiny(), 3).state(), build(tiny(), 4).state()
        self.assertEqual(list(first), list(second))
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])
        self.assertFalse(np.array_equal(first['embedding.proj'], other['embedding.proj']))

    def test_parameter_names(self):
        names = [name for name, _ in build(tiny(), 0).named_parameters()]
        self.assertEqual(names[0], 'embedding.proj')
        self.assertIn('blocks.1.attention.w_q', names)
        self.assertIn('blocks.0.mlp.w_in', names)
        self.assertEqual(names[-2:], ['reconstruction.weight', 'reconstruction.bias'])
        self.assertEqual(len(names), len(set(names)))

    def test_forward_matches_unrolled_encoder(self):
        rng = seeded_generator(9)
        for mechanism in ('alternating', 'standard', 'two_axis', 'bottleneck'):
            model = build(tiny(mechanism=mechanism), 1)
            batch = embed_batch(patch_batch(rng), model.embedding)
            out = forward(model, batch).numpy()
            expected = oracles.encoder(model, batch.tokens.numpy(), batch.pad_mask)
            real = batch.pad_mask[:, :, None, None] & np.ones(out.shape, dtype=bool)
            np.testing.assert_allclose(out[real], expected[real], rtol=0, atol=1e-10, err_msg=mechanism)

    @settings(max_examples=15, deadline=None)
    @given(st.sampled_from(['alternating', 'standard', 'two_axis', 'bottleneck']), st.integers(2, 4),
           st.integers(1, 6), st.integers(0, 2 ** 32))
    def test_padded_forward_matches_unrolled_encoder(self, mechanism, n_channels, n_patches, seed):
        rng = seeded_generator(seed)
        model = build(tiny(mechanism=mechanism), seed % 7)
        batch = embed_batch(patch_batch(rng, n_channels, n_patches, width=n_channels + 1), model.embedding)
        out = forward(model, batch).numpy()
        expected = oracles.encoder(model, batch.tokens.numpy(), batch.pad_mask)
        np.testing.assert_allclose(out[batch.pad_mask], expected[batch.pad_mask], rtol=0, atol=1e-10)

    def test_reconstruction_shape(self):
        model = build(tiny(), 0)
        batch = embed_batch(patch_batch(seeded_generator(0)), model.embedding)
        self.assertEqual(reconstruct(model, forward(model, batch)).shape, (2, 4, 5, 4))

    def test_probe_totals_match_analytic(self):
        config = tiny()
        model = build(config, 0)
        patches = seeded_generator(2).standard_normal((1, 3, 5, 4))
        batch = embed_batch(PatchBatch(patches, np.ones((1, 3), dtype=bool), np.arange(3)[None, :]),
                            model.embedding)
        probe = AttentionProbe()
        forward(model, batch, probe=probe)
        self.assertEqual(probe.score_elements, encoder_cost(config, 3, 5)[0])

    def test_batch_beyond_maxima(self):
        model = build(tiny(max_channels=6, max_patches=6), 0)
        batch = embed_batch(patch_batch(seeded_generator(0), n_patches=5, width=4), model.embedding)
        small = build(tiny(max_channels=3, max_patches=6), 0)
        with self.assertRaises(RangeError):
            forward(small, batch)

    def test_load_state(self):
        model, other = build(tiny(), 0), build(tiny(), 1)
        other.load_state(model.state())
        np.testing.assert_array_equal(other.state()['blocks.0.mlp.w_in'], model.state()['blocks.0.mlp.w_in'])
        state = model.state()
        del state['final_norm.gain']
        with self.assertRaises(RangeError):
            other.load_state(state)
        with self.assertRaises(RangeError):
            other.load_state(build(tiny(embed_dim=8), 0).state())

    def test_drop_path_rates_increase_with_depth(self):
        model = build(tiny(n_layers=4, drop_path_rate=0.3), 0)
        np.testing.assert_allclose([block.drop_path_rate for block in model.blocks], [0.0, 0.1, 0.2, 0.3])

class TestDropPath(unittest.TestCase):
    def test_identity_outside_training(self):
        residual = Tensor(np.ones((4, 3)))
        self.assertIs(drop_path(residual, 0.5, False, None), residual)
        self.assertIs(drop_path(residual, 0.0, True, None), residual)

    def test_examples_dropped_or_rescaled(self):
        out = drop_path(Tensor(np.ones((200, 3))), 0.25, True, seeded_generator(0)).numpy()
        rows = set(np.round(out[:, 0], 12))
        self.assertTrue(rows <= {0.0, round(1.0 / 0.75, 12)})
        self.assertEqual(len(rows), 2)
        for row in out:
            self.assertEqual(len(set(row)), 1)
