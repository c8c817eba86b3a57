"""@ingroup pyeegmae
@file
Synthetic corpora, corpus manifests, batch collation with channel padding, read-ahead loading and waveform
augmentation.
"""
import logging
import math
import os
import queue
import threading

import numpy as np
import pandas
from scipy.signal import welch
from voluptuous import Optional, Schema

from .entity import ConfigEntity, ContractError, Count, RangeError, Real, RealList, Seed
from .formats.common import FormatError
from .formats.recording import load_recording, save_recording
from .system import System
from .tensor import seeded_generator
from .tokenizer import MAX_CHANNELS, PatchBatch, Recording, patch

log = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'

class SynthSpec(ConfigEntity):
    """Describes a synthetic corpus: every example is a class-dominant sinusoid plus Gaussian noise on all channels.
    """
    @property
    def schema(self):
        return Schema({
            Optional('n_examples', default=10000): Count,
            Optional('n_channels', default=4): Count,
            Optional('n_samples', default=1280): Count,
            Optional('sampling_rate', default=256.0): Real,
            Optional('n_classes', default=2): Count,
            Optional('frequencies', default=(6.0, 24.0)): RealList,
            Optional('noise_std', default=0.5): Real,
            Optional('amplitude', default=1.0): Real,
            Optional('seed', default=0): Seed,
        })

    def validate(self):
        if len(self.frequencies) != self.n_classes:
            raise self.invalid('{} frequencies for {} classes'.format(len(self.frequencies), self.n_classes),
                               'frequencies')
        nyquist = self.sampling_rate / 2.0
        for frequency in self.frequencies:
            if not 0.0 < frequency < nyquist:
                raise self.invalid('frequency {} Hz is not below the Nyquist rate of {} Hz'.format(frequency, nyquist),
                                   'frequencies')
        if self.n_channels > MAX_CHANNELS:
            raise self.invalid('at most {} channels are supported'.format(MAX_CHANNELS), 'n_channels')
        if self.noise_std < 0.0:
            raise self.invalid('noise_std must be nonnegative', 'noise_std')
        if self.sampling_rate <= 0.0:
            raise self.invalid('sampling_rate must be positive', 'sampling_rate')

class RecordingDataset(object):
    """An indexable collection of recordings with optional integer or real-valued labels.

    Items are either Recording instances or paths that are loaded on access.
    """
    def __init__(self, items, labels=None, system=None):
        self.items = list(items)
        self.labels = None if labels is None else np.asarray(labels)
        self.system = system or System()
        if self.labels is not None and len(self.labels) != len(self.items):
            raise ContractError('{} labels for {} recordings'.format(len(self.labels), len(self.items)))

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index):
        item = self.items[index]
        if isinstance(item, Recording):
            return item
        return load_recording(item, self.system)

    def subset(self, indices):
        indices = list(indices)
        labels = None if self.labels is None else self.labels[indices]
        return RecordingDataset([self.items[i] for i in indices], labels, self.system)

    def split(self, fraction, seed):
        """Shuffles and splits the dataset into (first, second) with round(fraction * n) examples in the first part.
        """
        order = seeded_generator(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut]), self.subset(order[cut:])

def generate_synthetic(spec):
    """Generates a labeled synthetic corpus.

    Labels are balanced (class counts differ by at most one) and shuffled. Example k draws its phase and noise from the
    Philox sub-stream (seed, 1, k); the phase is shared by all channels of the example.

    @param spec A SynthSpec.
    @returns A RecordingDataset of f32 recordings.
    """
    labels = np.arange(spec.n_examples) % spec.n_classes
    labels = labels[seeded_generator(spec.seed, 0).permutation(spec.n_examples)]
    times = np.arange(spec.n_samples) / spec.sampling_rate
    recordings = []
    for index, label in enumerate(labels):
        rng = seeded_generator(spec.seed, 1, index)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        wave = spec.amplitude * np.sin(2.0 * math.pi * spec.frequencies[label] * times + phase)
        noise = rng.normal(0.0, spec.noise_std, size=(spec.n_samples, spec.n_channels)) if spec.noise_std else 0.0
        samples = (wave[:, None] + noise) * np.ones((1, spec.n_channels))
        recordings.append(Recording(samples.astype(np.float32), spec.sampling_rate))
    log.info('Generated %d synthetic recordings (%d classes)', spec.n_examples, spec.n_classes)
    return RecordingDataset(recordings, labels)

def save_corpus(dataset, directory, system=None):
    """Writes one recording file per example plus a `path,label` manifest; paths are relative to @p directory.

    @returns The manifest path.
    """
    system = system or System()
    system.create_directory(directory)
    names = []
    for index in range(len(dataset)):
        name = 'example_{:06d}.eegw'.format(index)
        save_recording(dataset[index], system.join(directory, name), system)
        names.append(name)
    labels = dataset.labels if dataset.labels is not None else [''] * len(names)
    manifest = system.join(directory, MANIFEST_NAME)
    pandas.DataFrame({'path': names, 'label': labels}).to_csv(manifest, index=False)
    log.info('Wrote %d recordings and %s', len(names), manifest)
    return manifest

def load_manifest(path, system=None):
    """Opens a corpus from its manifest (or the directory holding it); recordings load lazily.

    @returns A RecordingDataset.
    @throws FormatError if the manifest cannot be read or lacks a path column.
    """
    system = system or System()
    if system.is_directory(path):
        path = system.join(path, MANIFEST_NAME)
    try:
        table = pandas.read_csv(path)
    except (EnvironmentError, pandas.errors.ParserError, pandas.errors.EmptyDataError) as error:
        raise FormatError('cannot read manifest ({})'.format(error), path=path) from error
    if 'path' not in table.columns:
        raise FormatError('manifest has no path column', path=path)
    root = os.path.dirname(path) or '.'
    items = [system.join(root, str(p)) for p in table['path']]
    labels = None
    if 'label' in table.columns and table['label'].notna().all():
        labels = table['label'].to_numpy()
    return RecordingDataset(items, labels, system)

def collate(recordings, patch_len, stride, max_channels, trim=False):
    """Patches a list of recordings into one channel-padded batch.

    Recordings are cropped to the shortest one; example k of the batch is recording k. Channel c of a recording uses
    channel embedding row c.

    @param recordings A list of Recordings.
    @param stride The patch stride; None or 0 for non-overlapping patches.
    @param max_channels C_max, the padded channel count.
    @param trim Pad only up to the widest recording of the batch instead of C_max.
    @returns A PatchBatch with B x C_max x N_p x L patches.
    @throws ContractError if @p recordings is empty.
    @throws RangeError if a recording has more than @p max_channels channels.
    """
    if not recordings:
        raise ContractError('cannot collate an empty batch')
    widest = max(r.n_channels for r in recordings)
    if widest > max_channels:
        raise RangeError('recording has {} channels, more than {}'.format(widest, max_channels))
    shortest = min(r.n_samples for r in recordings)
    stride = stride or patch_len
    grids = [patch(r.crop(shortest), patch_len, stride) for r in recordings]
    n_patches = grids[0].n_patches
    dtype = np.result_type(*[g.patches.dtype for g in grids])
    width = widest if trim else max_channels
    patches = np.zeros((len(recordings), width, n_patches, patch_len), dtype=dtype)
    pad_mask = np.zeros((len(recordings), width), dtype=bool)
    channel_index = np.full((len(recordings), width), -1, dtype=np.int64)
    for example, grid in enumerate(grids):
        channels = grid.n_channels
        patches[example, :channels] = np.transpose(grid.patches, (1, 0, 2))
        pad_mask[example, :channels] = True
        channel_index[example, :channels] = np.arange(channels)
    return PatchBatch(patches, pad_mask, channel_index)

def add_noise(recording, ratio, probability, rng):
    """With probability @p probability, adds N(0, (ratio * sigma_c)^2) noise to every channel c of a recording.

    @returns A Recording (the argument itself when no noise is drawn).
    """
    if ratio <= 0.0 or rng.random() >= probability:
        return recording
    samples = np.asarray(recording.samples)
    scale = ratio * samples.std(axis=0, keepdims=True)
    noisy = samples + rng.normal(size=samples.shape) * scale
    return recording.with_samples(noisy.astype(samples.dtype, copy=False))

def batch_order(n_items, batch_size, seed=None, epoch=0):
    """Splits item indices into batches, shuffled by the Philox sub-stream (seed, 2, epoch) when @p seed is given.

    @returns A list of index arrays; the last batch may be smaller.
    """
    order = np.arange(n_items) if seed is None else seeded_generator(seed, 2, epoch).permutation(n_items)
    return [order[start:start + batch_size] for start in range(0, n_items, batch_size)]

class ReadAheadLoader(object):
    """Prepares batches on a background thread while the caller consumes them.

    At most @p depth prepared batches wait in a bounded queue. Exceptions raised while preparing a batch are re-raised
    in the consuming thread.
    @code
    for indices, batch in ReadAheadLoader(batches, prepare):
      train(batch)
    @endcode
    """
    _DONE = object()

    def __init__(self, batches, prepare, depth=2):
        """@param batches An iterable of index arrays.
        @param prepare A function mapping an index array to a prepared batch.
        """
        self.batches = list(batches)
        self.prepare = prepare
        self.depth = depth

    def _produce(self, pending, stop):
        try:
            for indices in self.batches:
                if stop.is_set():
                    return
                pending.put((indices, self.prepare(indices)))
        except Exception as error: #pylint: disable=broad-except
            pending.put(error)
            return
        pending.put(self._DONE)

    def __iter__(self):
        pending = queue.Queue(maxsize=self.depth)
        stop = threading.Event()
        worker = threading.Thread(target=self._produce, args=(pending, stop), daemon=True)
        worker.start()
        try:
            while True:
                item = pending.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while worker.is_alive():
                try:
                    pending.get_nowait()
                except queue.Empty:
                    worker.join(0.01)

class BandpowerClassifier(object):
    """Classifies recordings by their Welch band power around each class frequency.

    Each example is summarized by the log mean power within +/- @p half_width Hz of every class frequency (averaged
    over channels); prediction picks the nearest class centroid of those features. Fit on labeled recordings. When
    the Welch bins are coarser than the band, the bin nearest the class frequency stands in for it.
    """
    def __init__(self, frequencies, half_width=2.0):
        self.frequencies = tuple(frequencies)
        self.half_width = half_width
        self.centroids = None

    def features(self, recording):
        samples = np.asarray(recording.samples, dtype=np.float64)
        freqs, power = welch(samples, recording.sampling_rate, nperseg=min(samples.shape[0], 256), axis=0)
        power = power.mean(axis=1)
        bands = []
        for frequency in self.frequencies:
            distance = np.abs(freqs - frequency)
            inside = distance <= self.half_width
            if not inside.any():
                inside = distance == distance.min()
            bands.append(np.log(power[inside].mean() + 1e-12))
        return np.asarray(bands)

    def fit(self, recordings, labels):
        features = np.stack([self.features(r) for r in recordings])
        labels = np.asarray(labels)
        self.centroids = np.stack([features[labels == k].mean(axis=0) for k in range(len(self.frequencies))])
        return self

    def predict(self, recordings):
        if self.centroids is None:
            raise ContractError('fit the classifier before predicting')
        features = np.stack([self.features(r) for r in recordings])
        distances = ((features[:, None, :] - self.centroids[None]) ** 2).sum(axis=2)
        return distances.argmin(axis=1)
