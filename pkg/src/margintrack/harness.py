"""Standard and PGD adversarial training with per-epoch margin tracking."""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import idx
from .attacks import DeepFoolConfig, PgdConfig, pgd_perturb
from .idx import Dataset, draw_tracked_sample
from .margins import (MAX_RETRIES, NORMS, EmptyInput, EpochStats, Flows, GroupStats,
                      MarginRecord, TransitionLedger, aggregate, estimate_margins_batch, histogram)
from .network import ARCHITECTURES, ModelSnapshot, init_model, loss_and_param_grads, sgd_step

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
DEFAULT_EPSILON = {"mnist": 0.3, "fashion-mnist": 0.1}


class RunFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    data_root: str = "data"
    architecture: str = "dense"
    mode: str = "standard"  # standard | adversarial
    epochs: int = 40
    train_subset: int | None = None  # random subset of the training set; None = all of it
    tracked_train: int = 1000
    tracked_test: int = 1000
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pgd: PgdConfig | None = None  # None: dataset default epsilon
    deepfool: DeepFoolConfig = field(default_factory=DeepFoolConfig)
    max_retries: int = MAX_RETRIES
    histogram_bins: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("standard", "adversarial"):
            raise ValueError(f"mode must be 'standard' or 'adversarial', got {self.mode!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {sorted(ARCHITECTURES)}")
        if self.tracked_train < 0 or self.tracked_test < 0:
            raise ValueError("tracked sample sizes must be >= 0")
        if self.train_subset is not None and self.train_subset < 1:
            raise ValueError("train_subset must be positive")
        if self.optimizer.batch_size < 1 or self.optimizer.lr < 0:
            raise ValueError("batch_size must be >= 1 and lr >= 0")
        if self.max_retries < 0 or self.histogram_bins < 1:
            raise ValueError("max_retries must be >= 0 and histogram_bins >= 1")
        if self.pgd is None:
            object.__setattr__(self, "pgd", PgdConfig(epsilon=DEFAULT_EPSILON.get(self.dataset, 0.3)))

    def to_dict(self):
        return asdict(self)


def derive_seed(master, name):
    """Independent 32-bit seed for a named stream."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def run_seeds(cfg):
    names = ("init", "shuffle", "subset", "tracked_train", "tracked_test", "pgd", "margin_noise")
    return {n: derive_seed(cfg.seed, n) for n in names}


@dataclass
class EpochEval:
    train_error: float
    test_error: float
    stats: dict  # split -> EpochStats
    records: dict  # split -> [MarginRecord]
    histograms: dict  # (split, norm) -> {subgroup: MarginHistogram}
    bitmap: np.ndarray  # correctness over the full training set
    exhausted: dict  # (split, norm) -> number of images that ran out of retries


@dataclass
class EpochEntry:
    epoch: int
    train_error: float
    test_error: float
    train_loss: float | None
    stats: dict
    records: dict
    histograms: dict
    flows: Flows | None
    exhausted: dict


@dataclass
class RunLog:
    config: ExperimentConfig
    seeds: dict
    tracked: dict  # split -> TrackedSample
    entries: list = field(default_factory=list)
    ledger: TransitionLedger | None = None

    def series(self, split, subgroup, norm, stat="avg"):
        return [e.stats[split].group(subgroup).get(norm, stat) for e in self.entries]


def predict_all(m: ModelSnapshot, images, chunk=2000):
    out = [m.decide(images[i:i + chunk]) for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _empty_stats(excluded):
    return EpochStats(GroupStats(0), GroupStats(0), GroupStats(0), excluded)


def evaluate_epoch(m: ModelSnapshot, train: Dataset, test: Dataset, tracked: dict,
                   cfg: ExperimentConfig, noise_seed=0) -> EpochEval:
    """Errors on the full sets, margins on the tracked samples.  Does not touch ``m``."""
    preds = {"train": predict_all(m, train.images), "test": predict_all(m, test.images)}
    data = {"train": train, "test": test}
    errors = {s: float(np.mean(preds[s] != data[s].labels)) if len(data[s]) else 0.0 for s in SPLITS}
    stats, records, hists, exhausted = {}, {}, {}, {}
    for split in SPLITS:
        ds, ids = data[split], np.asarray(tracked[split].indices, dtype=np.int64)
        recs = []
        exhausted.update({(split, n): 0 for n in NORMS})
        if ids.size:
            seed = derive_seed(noise_seed, f"{split}/{m.epoch}")
            est = estimate_margins_batch(m, ds.images[ids], ids, seed, cfg.deepfool, cfg.max_retries)
            (d2, r2), (dinf, rinf) = est["l2"], est["linf"]
            exhausted[(split, "l2")] = int(np.sum(r2 < 0))
            exhausted[(split, "linf")] = int(np.sum(rinf < 0))
            for j, i in enumerate(ids):
                if r2[j] < 0 or rinf[j] < 0:
                    continue
                p, y = int(preds[split][i]), int(ds.labels[i])
                recs.append(MarginRecord(int(i), m.epoch, float(d2[j]), float(dinf[j]), p, y, p == y,
                                         int(r2[j]), int(rinf[j])))
        excluded = int(ids.size - len(recs))
        try:
            stats[split] = aggregate(recs, excluded)
        except EmptyInput:
            stats[split] = _empty_stats(excluded)
        records[split] = recs
        for norm in NORMS:
            if not recs:
                continue
            base = histogram(recs, norm, "all", cfg.histogram_bins)
            hists[(split, norm)] = {
                "all": base,
                "correct": histogram(recs, norm, "correct", edges=base.edges),
                "incorrect": histogram(recs, norm, "incorrect", edges=base.edges),
            }
    bitmap = preds["train"] == train.labels
    return EpochEval(errors["train"], errors["test"], stats, records, hists, bitmap, exhausted)


def replace_half(arch, params, xb, yb, pgd_cfg, rng):
    """Swap a uniformly chosen floor(B/2) of the batch for PGD adversaries; labels unchanged."""
    k = len(xb) // 2
    pick = np.sort(rng.choice(len(xb), size=k, replace=False))
    out = np.array(xb, dtype=np.float64, copy=True)
    if k:
        out[pick] = pgd_perturb(arch, params, out[pick], yb[pick], pgd_cfg, rng)
    return out, pick


def prepare_data(cfg: ExperimentConfig, train: Dataset, test: Dataset, seeds):
    if cfg.train_subset is not None and cfg.train_subset < len(train):
        train = train.subset(draw_tracked_sample(train, cfg.train_subset, seeds["subset"]).indices)
    tracked = {
        "train": draw_tracked_sample(train, cfg.tracked_train, seeds["tracked_train"]),
        "test": draw_tracked_sample(test, cfg.tracked_test, seeds["tracked_test"]),
    }
    return train, tracked


def load_datasets(cfg: ExperimentConfig, root=None):
    from pathlib import Path
    base = Path(root if root is not None else cfg.data_root) / cfg.dataset
    return idx.load_split(base, "train"), idx.load_split(base, "test")


def run_experiment(cfg: ExperimentConfig, train: Dataset, test: Dataset, on_epoch=None) -> RunLog:
    """Epoch 0 is evaluated before any update; each later epoch is one pass of shuffled mini-batch SGD."""
    seeds = run_seeds(cfg)
    train, tracked = prepare_data(cfg, train, test, seeds)
    arch = ARCHITECTURES[cfg.architecture]()
    runlog = RunLog(cfg, seeds, tracked, ledger=TransitionLedger(len(train)))

    def finish_epoch(snapshot, loss):
        ev = evaluate_epoch(snapshot, train, test, tracked, cfg, seeds["margin_noise"])
        flow = runlog.ledger.record(snapshot.epoch, ev.bitmap)
        entry = EpochEntry(snapshot.epoch, ev.train_error, ev.test_error, loss, ev.stats,
                           ev.records, ev.histograms, flow, ev.exhausted)
        runlog.entries.append(entry)
        log.info("epoch %d: train_err=%.4f test_err=%.4f d2(train)=%s", snapshot.epoch,
                 ev.train_error, ev.test_error, ev.stats["train"].all.d2_avg)
        if on_epoch is not None:
            on_epoch(entry, runlog)

    snapshot = init_model(arch, seeds["init"])
    finish_epoch(snapshot, None)
    params = snapshot.parameters.copy()
    velocity = None
    shuffle_rng = np.random.default_rng(seeds["shuffle"])
    pgd_rng = np.random.default_rng(seeds["pgd"])
    opt = cfg.optimizer
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), opt.batch_size):
            b = order[start:start + opt.batch_size]
            xb, yb = train.images[b], train.labels[b]
            if cfg.mode == "adversarial":
                xb, _ = replace_half(arch, params, xb, yb, cfg.pgd, pgd_rng)
            loss, g = loss_and_param_grads(arch, params, xb, yb)
            if not np.isfinite(loss):
                raise RunFailed(f"non-finite loss at epoch {epoch}")
            params, velocity = sgd_step(params, g, opt.lr, velocity, opt.momentum)
            if not np.all(np.isfinite(params)):
                raise RunFailed(f"parameters overflowed at epoch {epoch}")
            losses.append(loss)
        finish_epoch(ModelSnapshot(arch, params, epoch), float(np.mean(losses)))
    return runlog


def run_standard_training(cfg: ExperimentConfig, train=None, test=None, on_epoch=None) -> RunLog:
    if train is None or test is None:
        train, test = load_datasets(cfg)
    return run_experiment(replace(cfg, mode="standard"), train, test, on_epoch)


def run_adversarial_training(cfg: ExperimentConfig, train=None, test=None, on_epoch=None) -> RunLog:
    if train is None or test is None:
        train, test = load_datasets(cfg)
    return run_experiment(replace(cfg, mode="adversarial"), train, test, on_epoch)
