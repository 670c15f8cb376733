"""Two-phase training schedule.

Phase 1 minimizes the quantization and bit-balance penalties over the
original images. Phase 2 fine-tunes with the triplet term added, feeding
each mini-batch of triplets through the shared network as one stacked
forward pass. Everything is deterministic given the config seed:
per-epoch shuffles and triplet draws use sub-seed = seed + epoch index.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import RotationConfig, sample_triplets
from .errors import ConfigError, NumericError
from .losses import (
    LossReport,
    LossWeights,
    TripletConfig,
    combined_loss,
    entropy_loss,
    quantization_loss,
    rotation_invariance_loss,
)
from .network import OptimizerState, backward, forward_array, sgd_step

SUPPORTED_BIT_WIDTHS = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class TrainConfig:
    bit_width: int = 16
    phase1_epochs: int = 15
    phase2_epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    rotations: RotationConfig = field(default_factory=RotationConfig)
    triplets_per_epoch: int = 1000

    def __post_init__(self):
        if self.bit_width not in SUPPORTED_BIT_WIDTHS:
            raise ConfigError(f"bit width must be one of {SUPPORTED_BIT_WIDTHS}")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.phase1_epochs + self.phase2_epochs == 0:
            raise ConfigError("at least one phase needs >= 1 epoch")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.triplets_per_epoch < 1:
            raise ConfigError("triplets_per_epoch must be >= 1")


@dataclass(frozen=True)
class EpochLog:
    phase: int
    epoch: int
    report: LossReport
    seconds: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["epoch", "phase", "l_total", "l_triplet", "l_quant",
                 "l_entropy", "l_entropy_binary", "seconds"]
            )
            for e in self.entries:
                r = e.report
                writer.writerow(
                    [e.epoch, e.phase, f"{r.l_total:.12g}", f"{r.l_triplet:.12g}",
                     f"{r.l_quant:.12g}", f"{r.l_entropy:.12g}",
                     f"{r.l_entropy_binary:.12g}", f"{e.seconds:.3f}"]
                )


def _check_finite(value):
    if not np.isfinite(value):
        raise NumericError(f"training loss became non-finite ({value})")


def _mean_report(reports, weights):
    l_t = float(np.mean([r.l_triplet for r in reports]))
    l_q = float(np.mean([r.l_quant for r in reports]))
    l_e = float(np.mean([r.l_entropy for r in reports]))
    l_eb = float(np.mean([r.l_entropy_binary for r in reports]))
    total = weights.alpha * l_t + weights.beta * l_q + weights.gamma * l_e
    return LossReport(total, l_t, l_q, l_e, l_eb)


def train_phase1(params, dataset, config, state=None):
    """Quantization + balance training on original images (no triplets)."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    state = state or OptimizerState(config.learning_rate, config.momentum)
    pixels = np.stack([s.pixels for s in dataset.samples])
    entries = []
    for epoch in range(config.phase1_epochs):
        start = time.perf_counter()
        rng = np.random.default_rng(config.seed + epoch)
        order = rng.permutation(len(dataset))
        reports = []
        for lo in range(0, len(order), config.batch_size):
            batch = pixels[order[lo : lo + config.batch_size]]
            features, trace = forward_array(params, batch)
            l_q, g_q = quantization_loss(features)
            l_e, g_e, l_eb = entropy_loss(features)
            loss = config.weights.beta * l_q + config.weights.gamma * l_e
            _check_finite(loss)
            grads = backward(
                params, trace, config.weights.beta * g_q + config.weights.gamma * g_e
            )
            params, state = sgd_step(params, grads, state)
            reports.append(LossReport(loss, 0.0, l_q, l_e, l_eb))
        entries.append(
            EpochLog(1, epoch, _mean_report(reports, config.weights),
                     time.perf_counter() - start)
        )
    return params, entries, state


def _triplet_batches(dataset, config, epoch_index):
    triplets = sample_triplets(
        dataset, config.rotations, config.seed + epoch_index, config.triplets_per_epoch
    )
    for lo in range(0, len(triplets), config.batch_size):
        yield triplets[lo : lo + config.batch_size]


def train_phase2(params, dataset, config, state=None, variant="triplet"):
    """Fine-tune with the triplet term (or its rotation-invariance ablation).

    Each batch stacks anchors, positives and negatives into one forward
    pass; quantization/balance terms see all 3T rows.
    """
    if len(dataset) < 2:
        raise ConfigError("phase 2 needs at least 2 samples")
    if variant not in ("triplet", "rotinv"):
        raise ConfigError(f"unknown phase-2 variant: {variant}")
    state = state or OptimizerState(config.learning_rate, config.momentum)
    entries = []
    for epoch in range(config.phase2_epochs):
        start = time.perf_counter()
        epoch_index = config.phase1_epochs + epoch
        reports = []
        for batch in _triplet_batches(dataset, config, epoch_index):
            t = len(batch)
            stacked = np.concatenate(
                [
                    np.stack([dataset[tr.anchor_index].pixels for tr in batch]),
                    np.stack([tr.positive.pixels for tr in batch]),
                    np.stack([dataset[tr.negative_index].pixels for tr in batch]),
                ]
            )
            features, trace = forward_array(params, stacked)
            fa, fp, fn = features[:t], features[t : 2 * t], features[2 * t :]
            if variant == "triplet":
                report, (ga, gp, gn) = combined_loss(
                    fa, fp, fn, config.weights, config.triplet
                )
            else:
                report, (ga, gp, gn) = _rotinv_loss(fa, fp, fn, config.weights)
            _check_finite(report.l_total)
            grads = backward(params, trace, np.concatenate([ga, gp, gn]))
            params, state = sgd_step(params, grads, state)
            reports.append(report)
        entries.append(
            EpochLog(2, epoch, _mean_report(reports, config.weights),
                     time.perf_counter() - start)
        )
    return params, entries, state


def _rotinv_loss(fa, fp, fn, weights):
    """Ablation: similarity term uses only (anchor, rotation) pairs.

    The schedule, triplet sampling and row layout stay identical to the
    triplet variant; only the discriminative term is swapped out. The
    rotation-invariance value is reported in the l_triplet slot.
    """
    t = fa.shape[0]
    l_pair = 0.0
    ga = np.zeros_like(fa)
    gp = np.zeros_like(fp)
    for i in range(t):
        loss_i, (da, dp) = rotation_invariance_loss(fa[i], fp[i])
        l_pair += loss_i
        ga[i] = da
        gp[i] = dp
    l_pair /= t
    ga /= t
    gp /= t

    stacked = np.concatenate([fa, fp, fn], axis=0)
    l_q, g_q = quantization_loss(stacked)
    l_e, g_e, l_eb = entropy_loss(stacked)
    g_rows = weights.beta * g_q + weights.gamma * g_e
    ga = weights.alpha * ga + g_rows[:t]
    gp = weights.alpha * gp + g_rows[t : 2 * t]
    gn = g_rows[2 * t :]
    total = weights.alpha * l_pair + weights.beta * l_q + weights.gamma * l_e
    return LossReport(total, l_pair, l_q, l_e, l_eb), (ga, gp, gn)


def train(params, dataset, config, variant="triplet"):
    """Run phase 1 then phase 2; returns final params and the combined log."""
    params, entries1, state = train_phase1(params, dataset, config)
    params, entries2, _ = train_phase2(params, dataset, config, state, variant)
    return params, TrainLog(entries1 + entries2)
