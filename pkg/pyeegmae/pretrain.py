"""@ingroup pyeegmae
@file
Masked-autoencoding pre-training: the reconstruction objective, a single optimizer step and the epoch loop with
metrics, checkpoints and resumption.
"""
import logging
import math

import numpy as np
from voluptuous import Optional, Schema

from .data import ReadAheadLoader, batch_order, collate
from .encoder import forward, reconstruct
from .entity import Betas, ConfigEntity, ContractError, Count, Fraction, Index, PyEegMaeError, Real, Seed
from .formats.checkpoint import load_checkpoint, save_checkpoint
from .formats.metrics import PRETRAIN_COLUMNS, MetricsWriter, read_metrics, reproducibility_stanza
from .optim import AdamW, CosineWarmupSchedule, clip_grad_norm
from .system import System
from .tensor import backward, reduce_sum, seeded_generator
from .tokenizer import embed_batch, mask_tokens

log = logging.getLogger(__name__)

METRICS_NAME = 'pretrain_metrics.csv'
BEST_CHECKPOINT = 'best.ckpt'
FINAL_CHECKPOINT = 'final.ckpt'

class NonFiniteLoss(PyEegMaeError):
    """Raised if a training loss is NaN or infinite; names the batch that produced it.
    """
    def __init__(self, batch_index, breakdown):
        super(NonFiniteLoss, self).__init__('non-finite loss on batch {}: {}'.format(batch_index, breakdown))
        self.batch_index = batch_index
        self.breakdown = breakdown

class PretrainConfig(ConfigEntity):
    """Pre-training hyperparameters. Epoch counts drive the schedule; training stops early after stop_epoch.
    """
    @property
    def schema(self):
        return Schema({
            Optional('mask_ratio', default=0.5): Fraction,
            Optional('alpha', default=0.1): Fraction,
            Optional('batch_size', default=4096): Count,
            Optional('peak_lr', default=1.25e-3): Real,
            Optional('min_lr', default=2.5e-7): Real,
            Optional('warmup_epochs', default=3): Index,
            Optional('max_epochs', default=100): Count,
            Optional('stop_epoch', default=30): Count,
            Optional('weight_decay', default=0.05): Real,
            Optional('betas', default=(0.9, 0.98)): Betas,
            Optional('clip_norm', default=1.0): Real,
            Optional('seed', default=0): Seed,
        })

    def validate(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise self.invalid('mask_ratio must be in (0, 1), got {}'.format(self.mask_ratio), 'mask_ratio')
        if self.warmup_epochs >= self.max_epochs:
            raise self.invalid('warmup_epochs must be below max_epochs', 'warmup_epochs')
        if self.stop_epoch > self.max_epochs:
            raise self.invalid('stop_epoch must not exceed max_epochs', 'stop_epoch')
        if self.min_lr > self.peak_lr:
            raise self.invalid('min_lr must not exceed peak_lr', 'min_lr')

class LossBreakdown(object):
    """The two reconstruction terms and their weighted total.

    total = l_masked + alpha * l_visible. `objective`, when present, is the Tensor of the total for backward().
    """
    def __init__(self, l_masked, l_visible, alpha, objective=None):
        self.l_masked = l_masked
        self.l_visible = l_visible
        self.alpha = alpha
        self.total = l_masked + alpha * l_visible
        self.objective = objective

    @property
    def finite(self):
        return all(math.isfinite(v) for v in (self.l_masked, self.l_visible, self.total))

    def as_row(self):
        return {'l_masked': self.l_masked, 'l_visible': self.l_visible, 'total': self.total}

    def __repr__(self):
        return 'LossBreakdown(l_masked={!r}, l_visible={!r}, total={!r})'.format(self.l_masked, self.l_visible,
                                                                               self.total)

def reconstruction_loss(patches, predicted, mask, alpha, pad_mask=None):
    """Mean per-patch squared L2 error over the masked positions plus alpha times the same over the visible ones.

    Pad channels are excluded from both terms and from |M| and the visible count.

    @param patches The B x C x N_p x L ground truth, a numpy array.
    @param predicted The B x C x N_p x L prediction, a Tensor.
    @param mask B x C x N_p boolean, True for masked positions.
    @param alpha The visible-term weight.
    @param pad_mask Optionally, B x C boolean, True for real channels.
    @returns A LossBreakdown.
    @throws ContractError if no real position is masked.
    """
    mask = np.asarray(mask, dtype=bool)
    real = np.ones(mask.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)[:, :, None]
    masked = mask & real
    visible = ~mask & real
    n_masked, n_visible = int(masked.sum()), int(visible.sum())
    if n_masked == 0:
        raise ContractError('the mask set is empty')
    difference = predicted - patches
    per_patch = reduce_sum(difference * difference, axis=-1)
    weights = masked / float(n_masked)
    if n_visible:
        weights = weights + alpha * visible / float(n_visible)
    objective = reduce_sum(per_patch * weights.astype(predicted.dtype))
    errors = per_patch.numpy().astype(np.float64)
    l_masked = float(errors[masked].sum() / n_masked)
    l_visible = float(errors[visible].sum() / n_visible) if n_visible else 0.0
    return LossBreakdown(l_masked, l_visible, alpha, objective)

class PretrainState(object):
    """The mutable training position: optimizer, schedule, completed steps and epochs.
    """
    def __init__(self, optimizer, schedule, epoch=0):
        self.optimizer = optimizer
        self.schedule = schedule
        self.epoch = epoch
        self.lr = 0.0

    @property
    def step(self):
        return self.optimizer.step_count

def make_state(model, config, steps_per_epoch):
    """Builds the AdamW optimizer and cosine schedule of a pre-training run.

    Warmup and annealing are counted in optimizer steps: warmup_epochs and max_epochs times @p steps_per_epoch.
    """
    optimizer = AdamW(model.named_parameters(), betas=config.betas, weight_decay=config.weight_decay)
    schedule = CosineWarmupSchedule(config.peak_lr, config.min_lr, config.warmup_epochs * steps_per_epoch,
                                    config.max_epochs * steps_per_epoch)
    return PretrainState(optimizer, schedule)

def masked_batch(model, patch_batch, ratio, seed):
    """Embeds a collated batch with the model's embedding and masks it.

    @returns A TokenBatch.
    """
    return mask_tokens(embed_batch(patch_batch, model.embedding), ratio, seed)

def evaluate_loss(model, batch, alpha):
    """@returns The LossBreakdown of a masked TokenBatch, with its objective attached.
    """
    predicted = reconstruct(model, forward(model, batch))
    return reconstruction_loss(batch.raw_patches, predicted, batch.mask, alpha, batch.pad_mask)

def pretrain_step(model, batch, state, config, batch_index=0):
    """Runs one AdamW update on a masked TokenBatch.

    The update uses the scheduled learning rate of the step being taken (lr(state.step + 1)), so the first update is
    already nonzero and the last one uses min_lr.

    @returns A (state, LossBreakdown) tuple; @p state is updated in place.
    @throws NonFiniteLoss if the loss is not finite; no update is applied.
    """
    state.optimizer.zero_grad()
    breakdown = evaluate_loss(model, batch, config.alpha)
    if not breakdown.finite:
        raise NonFiniteLoss(batch_index, breakdown)
    backward(breakdown.objective)
    norm = clip_grad_norm(model.parameters(), config.clip_norm)
    state.lr = state.schedule(state.step + 1)
    state.optimizer.step(state.lr)
    log.debug('step %d: total %.6g, grad norm %.4g, lr %.4g', state.step, breakdown.total, norm, state.lr)
    return state, breakdown

def mask_seed(seed, step):
    """@returns The mask seed of the batch taken at optimizer step @p step.
    """
    return int(seeded_generator(seed, 3, step).integers(2 ** 63))

def patch_batches(model, dataset, batch_size, seed=None, epoch=0, normalize=True):
    """Iterates (indices, PatchBatch) pairs, collated on a read-ahead thread.

    Each batch is channel-padded to its widest recording.
    """
    config = model.config
    def prepare(indices):
        recordings = [dataset[int(i)] for i in indices]
        if normalize:
            recordings = [r.zscore() for r in recordings]
        return collate(recordings, config.patch_len, config.patch_stride, config.max_channels, trim=True)
    return ReadAheadLoader(batch_order(len(dataset), batch_size, seed, epoch), prepare)

class PretrainResult(object):
    def __init__(self, metrics_path, best_checkpoint, final_checkpoint, history):
        self.metrics_path = metrics_path
        self.best_checkpoint = best_checkpoint
        self.final_checkpoint = final_checkpoint
        self.history = history

def pretrain_run(model, dataset, config, out_dir, resume=None, system=None):
    """Pre-trains @p model on @p dataset until stop_epoch.

    Writes one metrics row per epoch (epoch-mean losses, the completed step count and the last learning rate) to
    pretrain_metrics.csv, the best epoch to best.ckpt and the last epoch to final.ckpt in @p out_dir.

    @param resume Optionally, the path of a checkpoint written by a previous run; training continues after its epoch
    and the metrics log is appended to. best.ckpt is only replaced by an epoch that beats every logged epoch up to
    the checkpoint.
    @returns A PretrainResult.
    @throws NonFiniteLoss, FormatError.
    """
    system = system or System()
    system.create_directory(out_dir)
    steps_per_epoch = int(math.ceil(len(dataset) / float(config.batch_size)))
    state = make_state(model, config, steps_per_epoch)
    metrics_path = system.join(out_dir, METRICS_NAME)
    if resume is not None:
        checkpoint = load_checkpoint(resume, system)
        model.load_state(checkpoint.model_state)
        first, second = checkpoint.moments()
        state.optimizer.load_moments(first, second, checkpoint.step)
        state.epoch = checkpoint.epoch
        log.info('Resuming after epoch %d (step %d) from %s', state.epoch, state.step, resume)
    best_path, final_path = system.join(out_dir, BEST_CHECKPOINT), system.join(out_dir, FINAL_CHECKPOINT)
    best_total = math.inf
    if resume is not None and system.is_file(metrics_path):
        earlier = read_metrics(metrics_path)
        earlier = earlier[earlier['epoch'] <= state.epoch]
        if len(earlier):
            best_total = float(earlier['total'].min())
    history = []
    stanza = reproducibility_stanza(config, config.seed, encoder_hash=model.config.config_hash())
    with MetricsWriter(metrics_path, PRETRAIN_COLUMNS, stanza, append=resume is not None, system=system) as metrics:
        for epoch in range(state.epoch + 1, config.stop_epoch + 1):
            totals = np.zeros(3)
            batches = 0
            for _, patch_batch in patch_batches(model, dataset, config.batch_size, config.seed, epoch):
                batch = masked_batch(model, patch_batch, config.mask_ratio, mask_seed(config.seed, state.step))
                _, breakdown = pretrain_step(model, batch, state, config, batch_index=state.step)
                totals += (breakdown.l_masked, breakdown.l_visible, breakdown.total)
                batches += 1
            state.epoch = epoch
            l_masked, l_visible, _ = totals / max(batches, 1)
            summary = LossBreakdown(l_masked, l_visible, config.alpha)
            history.append(summary)
            row = summary.as_row()
            row.update(epoch=epoch, step=state.step, lr=state.lr)
            metrics.write_row(row)
            log.info('epoch %d: l_masked %.6g, l_visible %.6g, total %.6g', epoch, l_masked, l_visible, summary.total)
            if config.alpha == 0.0 and l_visible > l_masked:
                log.warning('epoch %d: visible-patch error %.6g exceeds masked-patch error %.6g', epoch, l_visible,
                            l_masked)
            if summary.total < best_total:
                best_total = summary.total
                save_checkpoint(best_path, model, state.optimizer, state.step, epoch, system)
        save_checkpoint(final_path, model, state.optimizer, state.step, state.epoch, system)
    return PretrainResult(metrics_path, best_path, final_path, history)
