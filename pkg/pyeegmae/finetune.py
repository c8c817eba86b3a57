"""@ingroup pyeegmae
@file
Downstream adaptation: pooled-embedding heads, linear probing and full fine-tuning with layer-wise learning rate
decay, Gaussian-noise augmentation and per-epoch evaluation.
"""
import logging
import math
from collections import OrderedDict
from enum import Enum

import numpy as np
from sklearn.metrics import (average_precision_score, balanced_accuracy_score, mean_squared_error, r2_score,
                             roc_auc_score)
from sklearn.preprocessing import label_binarize
from voluptuous import Coerce, Optional, Schema

from .data import add_noise, batch_order, ReadAheadLoader, collate
from .encoder import forward
from .entity import Betas, ConfigEntity, ContractError, Count, Fraction, Index, InvalidConfig, Real, Seed
from .formats.checkpoint import save_checkpoint
from .formats.metrics import (CLASSIFICATION_COLUMNS, REGRESSION_COLUMNS, MetricsWriter, reproducibility_stanza)
from .optim import AdamW, CosineWarmupSchedule, clip_grad_norm
from .system import System
from .tensor import (Tensor, backward, linear, log_softmax, no_grad, parameter, reduce_mean, reduce_sum,
                     seeded_generator, truncated_normal)
from .tokenizer import embed_batch

log = logging.getLogger(__name__)

METRICS_NAME = 'finetune_metrics.csv'
FINETUNED_CHECKPOINT = 'finetuned.ckpt'

class FinetuneMode(Enum):
    LinearProbe = 'linear_probe'
    Full = 'full'

class TaskKind(Enum):
    Classification = 'classification'
    Regression = 'regression'

class FinetuneConfig(ConfigEntity):
    """Fine-tuning hyperparameters. n_outputs is the class count k or the regression target count m.
    """
    @property
    def schema(self):
        return Schema({
            Optional('mode', default='full'): Coerce(FinetuneMode),
            Optional('task', default='classification'): Coerce(TaskKind),
            Optional('n_outputs', default=2): Count,
            Optional('batch_size', default=4096): Count,
            Optional('peak_lr', default=5e-4): Real,
            Optional('min_lr', default=2.5e-7): Real,
            Optional('epochs', default=50): Count,
            Optional('warmup_epochs', default=5): Index,
            Optional('betas', default=(0.9, 0.999)): Betas,
            Optional('weight_decay', default=0.05): Real,
            Optional('layer_decay', default=0.75): Real,
            Optional('label_smoothing', default=0.1): Fraction,
            Optional('noise_amplitude_ratio', default=0.2): Real,
            Optional('noise_probability', default=0.5): Fraction,
            Optional('drop_path', default=0.1): Fraction,
            Optional('clip_norm', default=1.0): Real,
            Optional('validation_fraction', default=0.2): Fraction,
            Optional('seed', default=0): Seed,
        })

    def validate(self):
        if not 0.0 < self.layer_decay <= 1.0:
            raise self.invalid('layer_decay must be in (0, 1], got {}'.format(self.layer_decay), 'layer_decay')
        if self.warmup_epochs >= self.epochs:
            raise self.invalid('warmup_epochs must be below epochs', 'warmup_epochs')
        if self.task is TaskKind.Classification and self.n_outputs < 2:
            raise self.invalid('classification needs at least two classes', 'n_outputs')
        if self.noise_amplitude_ratio < 0.0:
            raise self.invalid('noise_amplitude_ratio must be nonnegative', 'noise_amplitude_ratio')

class Head(object):
    """A single linear layer on the pooled embedding; the weight is stored [out, d_e].
    """
    def __init__(self, kind, weight, bias):
        self.kind = kind
        self.weight = weight
        self.bias = bias

    @classmethod
    def initialize(cls, kind, embed_dim, n_outputs, rng, dtype=np.float32):
        return cls(kind, parameter(truncated_normal(rng, (n_outputs, embed_dim), dtype=dtype)),
                   parameter(np.zeros(n_outputs, dtype=dtype)))

    @property
    def n_outputs(self):
        return self.weight.shape[0]

    def __call__(self, pooled):
        return linear(pooled, self.weight, self.bias)

    def named_parameters(self):
        return [('head.weight', self.weight), ('head.bias', self.bias)]

def mean_pool(embeddings, pad_mask):
    """Averages every example's token embeddings over its real channels and all patches.

    @param embeddings A B x C x N_p x d_e Tensor.
    @param pad_mask B x C boolean, True for real channels.
    @returns A B x d_e Tensor.
    @throws ContractError if an example has no real channel.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    real = pad_mask.sum(axis=1)
    if not real.all():
        raise ContractError('cannot pool an example without real channels')
    weights = pad_mask / (real[:, None] * float(embeddings.shape[2]))
    return reduce_sum(embeddings * weights.astype(embeddings.dtype)[:, :, None, None], axis=(1, 2))

def smoothed_cross_entropy(logits, labels, smoothing):
    """Cross-entropy against targets (1 - smoothing) * one_hot + smoothing / k, averaged over the batch.

    The minimum over predictions is the entropy of the smoothed targets, reached when softmax(logits) equals them.
    """
    n_classes = logits.shape[-1]
    targets = np.full(logits.shape, smoothing / n_classes)
    targets[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] += 1.0 - smoothing
    return -reduce_mean(reduce_sum(log_softmax(logits, axis=-1) * targets.astype(logits.dtype), axis=-1))

def mse_loss(outputs, targets):
    difference = outputs - np.asarray(targets, dtype=outputs.dtype).reshape(outputs.shape)
    return reduce_mean(difference * difference)

def decay_multipliers(n_groups, decay):
    """@returns [decay^0, ..., decay^(n_groups - 1)], the learning rate multipliers from the head inward.
    """
    return [decay ** group for group in range(n_groups)]

def layer_group(name, n_layers):
    """Returns the decay group of a parameter: 0 for the head and final norm, 1 for the last block, ..., n_layers for
    the first block and n_layers + 1 for the embedding.
    """
    if name.startswith('blocks.'):
        return n_layers - int(name.split('.')[1])
    if name.startswith('embedding.'):
        return n_layers + 1
    return 0

def layer_lr_multipliers(named_parameters, n_layers, decay):
    """@returns An OrderedDict mapping parameter names to decay^group.
    """
    return OrderedDict((name, decay ** layer_group(name, n_layers)) for name, _ in named_parameters)

def set_drop_path(model, rate):
    """Sets drop-path rates increasing linearly from 0 in the first block to @p rate in the last.
    """
    last = max(len(model.blocks) - 1, 1)
    for number, block in enumerate(model.blocks):
        block.drop_path_rate = rate * number / last

def encode(model, patch_batch, training=False, rng=None):
    """Embeds and encodes a collated batch without masking.

    @returns The B x C x N_p x d_e Tensor of final embeddings.
    """
    return forward(model, embed_batch(patch_batch, model.embedding), training, rng)

def _collated(model, dataset, indices, augment=None):
    config = model.config
    recordings = [dataset[int(i)].zscore() for i in indices]
    if augment is not None:
        recordings = [augment(int(i), r) for i, r in zip(indices, recordings)]
    return collate(recordings, config.patch_len, config.patch_stride, config.max_channels, trim=True)

def pooled_features(model, dataset, batch_size):
    """Computes pooled embeddings without recording gradients.

    @returns An n x d_e numpy array.
    """
    features = []
    with no_grad():
        for indices, patch_batch in ReadAheadLoader(batch_order(len(dataset), batch_size),
                                                    lambda indices: _collated(model, dataset, indices)):
            features.append(mean_pool(encode(model, patch_batch), patch_batch.pad_mask).numpy())
    return np.concatenate(features, axis=0)

def check_labels(labels, config):
    """@throws InvalidConfig if the labels do not fit the head of @p config.
    """
    if labels is None:
        raise InvalidConfig('fine-tuning needs labels', key='task')
    labels = np.asarray(labels)
    if config.task is TaskKind.Classification:
        if not np.all(np.equal(np.mod(labels, 1), 0)) or labels.min() < 0 or labels.max() >= config.n_outputs:
            raise InvalidConfig('labels must be class indices below {}'.format(config.n_outputs), key='n_outputs')
        return labels.astype(np.int64)
    width = 1 if labels.ndim == 1 else labels.shape[1]
    if width != config.n_outputs:
        raise InvalidConfig('{} regression targets for a head of {}'.format(width, config.n_outputs),
                            key='n_outputs')
    return labels.astype(np.float64).reshape(len(labels), width)

def task_loss(outputs, labels, config):
    if config.task is TaskKind.Classification:
        return smoothed_cross_entropy(outputs, labels, config.label_smoothing)
    return mse_loss(outputs, labels)

def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)

def classification_metrics(labels, logits):
    """@returns An OrderedDict of balanced accuracy and one-vs-rest macro AUROC and AUPR; a score that is undefined
    for the labels present (a single class) is NaN.
    """
    labels = np.asarray(labels)
    probabilities = _softmax(np.asarray(logits, dtype=np.float64))
    n_classes = probabilities.shape[1]
    metrics = OrderedDict(balanced_acc=float(balanced_accuracy_score(labels, probabilities.argmax(axis=1))))
    try:
        if n_classes == 2:
            metrics['auroc'] = float(roc_auc_score(labels, probabilities[:, 1]))
            metrics['aupr'] = float(average_precision_score(labels, probabilities[:, 1]))
        else:
            metrics['auroc'] = float(roc_auc_score(labels, probabilities, multi_class='ovr', average='macro',
                                                   labels=list(range(n_classes))))
            metrics['aupr'] = float(average_precision_score(label_binarize(labels, classes=list(range(n_classes))),
                                                            probabilities, average='macro'))
    except ValueError:
        log.warning('AUROC/AUPR undefined for labels %s', np.unique(labels))
        metrics.setdefault('auroc', float('nan'))
        metrics.setdefault('aupr', float('nan'))
    return metrics

def regression_metrics(targets, predictions):
    """@returns An OrderedDict of R^2 (averaged over targets) and RMSE.
    """
    return OrderedDict(r2=float(r2_score(targets, predictions)),
                       rmse=float(math.sqrt(mean_squared_error(targets, predictions))))

def evaluate(model, head, dataset, config, features=None):
    """Computes the loss and task metrics of @p head over a labeled dataset.

    @param features Optionally, precomputed pooled features of @p dataset.
    @returns An OrderedDict keyed like the metrics CSV (without epoch and split).
    """
    labels = check_labels(dataset.labels, config)
    if features is None:
        features = pooled_features(model, dataset, config.batch_size)
    with no_grad():
        outputs = head(Tensor(features.astype(head.weight.dtype)))
        loss = task_loss(outputs, labels, config).item()
    row = OrderedDict(loss=loss)
    if config.task is TaskKind.Classification:
        row.update(classification_metrics(labels, outputs.numpy()))
    else:
        row.update(regression_metrics(labels, outputs.numpy()))
    return row

class FinetuneResult(object):
    def __init__(self, head, metrics_path, checkpoint_path, history):
        self.head = head
        self.metrics_path = metrics_path
        self.checkpoint_path = checkpoint_path
        self.history = history

def _probe_epoch(head, optimizer, schedule, features, labels, config, epoch):
    for indices in batch_order(len(features), config.batch_size, config.seed, epoch):
        optimizer.zero_grad()
        loss = task_loss(head(Tensor(features[indices].astype(head.weight.dtype))), labels[indices], config)
        backward(loss)
        clip_grad_norm([t for _, t in head.named_parameters()], config.clip_norm)
        optimizer.step(schedule(optimizer.step_count + 1))

def _full_epoch(model, head, optimizer, schedule, dataset, labels, config, epoch):
    def augment(index, recording):
        rng = seeded_generator(config.seed, 4, epoch, index)
        return add_noise(recording, config.noise_amplitude_ratio, config.noise_probability, rng)
    rng = seeded_generator(config.seed, 6, epoch)
    parameters = [t for _, t in optimizer.named_parameters]
    loader = ReadAheadLoader(batch_order(len(dataset), config.batch_size, config.seed, epoch),
                             lambda indices: _collated(model, dataset, indices, augment))
    for indices, patch_batch in loader:
        optimizer.zero_grad()
        pooled = mean_pool(encode(model, patch_batch, training=True, rng=rng), patch_batch.pad_mask)
        backward(task_loss(head(pooled), labels[indices], config))
        clip_grad_norm(parameters, config.clip_norm)
        optimizer.step(schedule(optimizer.step_count + 1))

def finetune_run(model, dataset, config, out_dir, validation=None, system=None):
    """Adapts @p model to a labeled dataset.

    In linear_probe mode the encoder is frozen: pooled features are computed once without recording gradients and
    only the head is trained. In full mode every encoder parameter except the reconstruction head is trained with
    layer-wise learning rate decay, drop-path and Gaussian-noise augmentation in waveform space.
    After every epoch the train and validation splits are evaluated and written to finetune_metrics.csv.

    @param validation Optionally, a held-out RecordingDataset; otherwise validation_fraction of @p dataset is held out.
    @returns A FinetuneResult.
    @throws InvalidConfig if the labels do not match the configured head.
    """
    system = system or System()
    system.create_directory(out_dir)
    if validation is None:
        dataset, validation = dataset.split(1.0 - config.validation_fraction, config.seed)
    labels = check_labels(dataset.labels, config)
    check_labels(validation.labels, config)
    head = Head.initialize(config.task, model.config.embed_dim, config.n_outputs, seeded_generator(config.seed, 5),
                           model.config.dtype)
    probing = config.mode is FinetuneMode.LinearProbe
    if probing:
        named = head.named_parameters()
        train_features = pooled_features(model, dataset, config.batch_size)
        validation_features = pooled_features(model, validation, config.batch_size)
    else:
        set_drop_path(model, config.drop_path)
        named = [(n, t) for n, t in model.named_parameters() if not n.startswith('reconstruction.')]
        named += head.named_parameters()
        train_features = validation_features = None
    scales = layer_lr_multipliers(named, model.config.n_layers, config.layer_decay)
    optimizer = AdamW(named, betas=config.betas, weight_decay=config.weight_decay, lr_scales=scales)
    steps_per_epoch = int(math.ceil(len(dataset) / float(config.batch_size)))
    schedule = CosineWarmupSchedule(config.peak_lr, config.min_lr, config.warmup_epochs * steps_per_epoch,
                                    config.epochs * steps_per_epoch)
    columns = CLASSIFICATION_COLUMNS if config.task is TaskKind.Classification else REGRESSION_COLUMNS
    metrics_path = system.join(out_dir, METRICS_NAME)
    history = []
    stanza = reproducibility_stanza(config, config.seed, encoder_hash=model.config.config_hash())
    with MetricsWriter(metrics_path, columns, stanza, system=system) as metrics:
        for epoch in range(1, config.epochs + 1):
            if probing:
                _probe_epoch(head, optimizer, schedule, train_features, labels, config, epoch)
            else:
                _full_epoch(model, head, optimizer, schedule, dataset, labels, config, epoch)
            for split, data, features in (('train', dataset, train_features), ('val', validation,
                                                                               validation_features)):
                row = evaluate(model, head, data, config, features)
                row.update(epoch=epoch, split=split)
                metrics.write_row(row)
                history.append(row)
            log.info('epoch %d: %s', epoch, ', '.join('{}={:.4g}'.format(k, v) for k, v in history[-1].items()
                                                      if isinstance(v, float)))
    checkpoint_path = system.join(out_dir, FINETUNED_CHECKPOINT)
    save_checkpoint(checkpoint_path, model, system=system,
                    extra=OrderedDict((name, t.data) for name, t in head.named_parameters()))
    return FinetuneResult(head, metrics_path, checkpoint_path, history)
