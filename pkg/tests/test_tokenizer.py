import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pyeegmae.entity import ContractError, RangeError
from pyeegmae.tensor import seeded_generator
from pyeegmae.tokenizer import (EmbeddingParams, InvalidRecording, PatchBatch, PatchGrid, Recording,
                                RecordingTooShort, count_patches, embed, embed_batch, mask_count, mask_tokens,
                                pad_channels, patch)

def _recording(n_samples=256, n_channels=3, seed=0):
    return Recording(seeded_generator(seed).standard_normal((n_samples, n_channels)), 128.0)

def _params(embed_dim=8, patch_len=16, max_patches=16, max_channels=8, seed=0):
    return EmbeddingParams.initialize(embed_dim, patch_len, max_patches, max_channels, seeded_generator(seed),
                                      np.float64)

class TestRecording(unittest.TestCase):
    def test_invariants(self):
        with self.assertRaises(InvalidRecording):
            Recording(np.ones(10), 100.0)
        with self.assertRaises(InvalidRecording):
            Recording(np.ones((10, 65)), 100.0)
        with self.assertRaises(InvalidRecording):
            Recording(np.array([[np.nan]]), 100.0)
        with self.assertRaises(InvalidRecording):
            Recording(np.ones((10, 2)), 0.0)
        with self.assertRaises(InvalidRecording):
            Recording(np.ones((10, 2)), 100.0, ['a'])

    def test_default_channel_ids(self):
        self.assertEqual(_recording(n_channels=2).channel_ids, ['ch0', 'ch1'])

    def test_zscore(self):
        recording = Recording(np.column_stack([np.arange(10.0) * 3.0 + 5.0, np.full(10, 2.0)]), 10.0)
        samples = recording.zscore().samples
        np.testing.assert_allclose(samples.mean(axis=0), 0.0, atol=1e-12)
        self.assertAlmostEqual(float(samples[:, 0].std()), 1.0)
        np.testing.assert_array_equal(samples[:, 1], 0.0)

class TestPatch(unittest.TestCase):
    def test_non_overlapping_patches(self):
        samples = np.arange(20.0).reshape(10, 2)
        grid = patch(Recording(samples, 10.0), patch_len=4)
        self.assertEqual(grid.patches.shape, (2, 2, 4))
        np.testing.assert_array_equal(grid.patches[1, 0], [8.0, 10.0, 12.0, 14.0])
        np.testing.assert_array_equal(grid.patches[0, 1], [1.0, 3.0, 5.0, 7.0])

    def test_overlapping_patches(self):
        grid = patch(Recording(np.arange(10.0)[:, None], 10.0), patch_len=4, stride=2)
        self.assertEqual(grid.n_patches, 4)
        np.testing.assert_array_equal(grid.patches[3, 0], [6.0, 7.0, 8.0, 9.0])

    @given(st.integers(1, 300), st.integers(1, 64), st.integers(1, 64))
    def test_patch_count(self, n_samples, patch_len, stride):
        recording = Recording(np.zeros((n_samples, 1)), 1.0)
        if patch_len > n_samples:
            with self.assertRaises(RecordingTooShort):
                patch(recording, patch_len, stride)
            return
        grid = patch(recording, patch_len, stride)
        self.assertEqual(grid.n_patches, (n_samples - patch_len) // stride + 1)
        self.assertEqual(grid.n_patches, count_patches(n_samples, patch_len, stride))

    def test_bad_stride(self):
        with self.assertRaises(ContractError):
            patch(_recording(), 16, 0)

class TestEmbed(unittest.TestCase):
    def test_token_is_projection_plus_position_plus_channel(self):
        params = _params()
        grid = patch(_recording(), 16)
        tokens = embed(grid, params).tokens.numpy()
        self.assertEqual(tokens.shape, (1, 3, 16, 8))
        expected = params.proj.data.dot(grid.patches[5, 2]) + params.pos.data[5] + params.chan.data[2]
        np.testing.assert_allclose(tokens[0, 2, 5], expected, rtol=1e-12)

    def test_channel_offsets(self):
        params = _params()
        grid = patch(_recording(n_channels=2), 16)
        tokens = embed(grid, params, channel_offsets=[4, 7]).tokens.numpy()
        expected = params.proj.data.dot(grid.patches[0, 1]) + params.pos.data[0] + params.chan.data[7]
        np.testing.assert_allclose(tokens[0, 1, 0], expected, rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
    def test_affine_in_patch_content(self, a, b):
        params = _params()
        rng = seeded_generator(4)
        x, y = rng.standard_normal((6, 3, 16)), rng.standard_normal((6, 3, 16))
        def tokens(patches):
            return embed(PatchGrid(patches, 16, 16), params).tokens.numpy()
        expected = a * tokens(x) + b * tokens(y) + (1.0 - a - b) * tokens(np.zeros_like(x))
        np.testing.assert_allclose(tokens(a * x + b * y), expected, rtol=0, atol=1e-12)

    def test_distinct_tokens_for_identical_patches(self):
        content = seeded_generator(5).standard_normal(16)
        tokens = embed(PatchGrid(np.tile(content, (16, 3, 1)), 16, 16), _params()).tokens.numpy()[0]
        flat = tokens.reshape(3 * 16, -1)
        distances = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
        self.assertGreater(distances[~np.eye(len(flat), dtype=bool)].min(), 1e-6)

    def test_range_errors(self):
        grid = patch(_recording(n_samples=512), 16)
        with self.assertRaises(RangeError):
            embed(grid, _params(max_patches=16))
        with self.assertRaises(RangeError):
            embed(patch(_recording(), 16), _params(), channel_offsets=[0, 1, 8])

    def test_pad_channels(self):
        params = _params()
        batch = pad_channels(embed(patch(_recording(), 16), params), 5)
        self.assertEqual(batch.n_channels, 5)
        np.testing.assert_array_equal(batch.pad_mask[0], [True, True, True, False, False])
        np.testing.assert_array_equal(batch.channel_index[0, 3:], [-1, -1])
        tokens = batch.tokens.numpy()
        np.testing.assert_allclose(tokens[0, 4, 3], params.pad_token.data + params.pos.data[3], rtol=1e-12)
        with self.assertRaises(RangeError):
            pad_channels(batch, 4)

    def test_embed_batch_uses_pad_token(self):
        params = _params()
        patches = seeded_generator(1).standard_normal((2, 3, 4, 16))
        pad_mask = np.array([[True, True, False], [True, True, True]])
        channel_index = np.where(pad_mask, np.arange(3)[None, :], -1)
        tokens = embed_batch(PatchBatch(patches, pad_mask, channel_index), params).tokens.numpy()
        np.testing.assert_allclose(tokens[0, 2, 1], params.pad_token.data + params.pos.data[1], rtol=1e-12)

class TestMask(unittest.TestCase):
    def _batch(self):
        patches = seeded_generator(2).standard_normal((3, 4, 10, 16))
        pad_mask = np.array([[True] * 4, [True, True, False, False], [True, False, False, False]])
        channel_index = np.where(pad_mask, np.arange(4)[None, :], -1)
        return embed_batch(PatchBatch(patches, pad_mask, channel_index), _params())

    def test_mask_counts_and_pads(self):
        masked = mask_tokens(self._batch(), 0.5, seed=11)
        self.assertEqual([int(m.sum()) for m in masked.mask], [20, 10, 5])
        self.assertFalse(masked.mask[1, 2:].any())
        self.assertFalse(masked.mask[2, 1:].any())

    def test_masked_tokens_carry_mask_embedding(self):
        batch = self._batch()
        params = batch.params
        masked = mask_tokens(batch, 0.5, seed=11)
        c, i = masked.mask_set[0][0]
        expected = params.mask_token.data + params.pos.data[i] + params.chan.data[c]
        np.testing.assert_allclose(masked.tokens.numpy()[0, c, i], expected, rtol=1e-12)

    def test_mask_is_deterministic(self):
        self.assertEqual(mask_tokens(self._batch(), 0.3, 5).mask_set, mask_tokens(self._batch(), 0.3, 5).mask_set)
        self.assertNotEqual(mask_tokens(self._batch(), 0.3, 5).mask_set,
                            mask_tokens(self._batch(), 0.3, 6).mask_set)

    def test_ratio_range(self):
        with self.assertRaises(ContractError):
            mask_tokens(self._batch(), 1.0, 0)
        with self.assertRaises(ContractError):
            mask_tokens(self._batch(), -0.1, 0)
        self.assertFalse(mask_tokens(self._batch(), 0.0, 0).mask.any())

    @settings(max_examples=30)
    @given(st.floats(0.0, 0.99), st.integers(1, 40))
    def test_mask_count_rounds_half_to_even(self, ratio, n_positions):
        self.assertEqual(mask_count(ratio, n_positions), int(round(ratio * n_positions)))
        self.assertEqual(mask_count(0.5, 5), 2)
        self.assertEqual(mask_count(0.5, 7), 4)

    def test_every_position_is_masked_equally_often(self):
        patches = np.zeros((2000, 4, 5, 16))
        pad_mask = np.ones((2000, 4), dtype=bool)
        channel_index = np.tile(np.arange(4), (2000, 1))
        batch = embed_batch(PatchBatch(patches, pad_mask, channel_index), _params())
        frequency = mask_tokens(batch, 0.5, seed=3).mask.mean(axis=0)
        np.testing.assert_allclose(frequency, 0.5, atol=0.06)
