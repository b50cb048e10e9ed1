"""Per-image margin estimates, aggregate statistics, histograms and transition counts.

The margin of an image is the norm of a *successful* DeepFool perturbation.
When an attack fails, the image is jittered with zero-mean Gaussian noise of
growing scale and the attack is retried on the jittered copy; the reported
margin is the perturbation norm measured from that copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackError, DeepFoolConfig, deepfool_batch, deepfool_l2, deepfool_linf

MAX_RETRIES = 10
NORMS = ("l2", "linf")
SUBGROUPS = ("all", "correct", "incorrect")
_NORM_CODE = {"l2": 2, "linf": 0}


class RetriesExhausted(RuntimeError):
    pass


class EmptyInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NonConsecutiveEpoch(ValueError):
    pass


def retry_sigma(r: int) -> float:
    """Noise scale (pixel units) for retry ``r`` >= 1: 0.01 * 2**(r-1)."""
    if r < 1:
        raise ValueError("retries are numbered from 1")
    return 0.01 * 2.0 ** (r - 1)


@dataclass(frozen=True)
class MarginRecord:
    image_id: int
    epoch: int
    d2: float
    dinf: float
    predicted_class: int
    true_label: int
    correct: bool
    retries_l2: int = 0
    retries_linf: int = 0

    def __post_init__(self):
        if not (self.d2 >= 0 and self.dinf >= 0):
            raise ValueError(f"margins must be nonnegative, got d2={self.d2}, dinf={self.dinf}")
        if self.correct != (self.predicted_class == self.true_label):
            raise ValueError("correct flag disagrees with predicted_class / true_label")

    def margin(self, norm):
        return self.d2 if norm == "l2" else self.dinf


def noise_rng(seed, image_id, norm):
    return np.random.default_rng([int(seed), int(image_id), _NORM_CODE[norm]])


def estimate_margins(m, x, seed=0, image_id=0, cfg: DeepFoolConfig = DeepFoolConfig(),
                     max_retries=MAX_RETRIES, attack_l2=None, attack_linf=None):
    """(d2, retries_l2, dinf, retries_linf) for one image.

    ``attack_l2`` / ``attack_linf`` default to the DeepFool attacks; any
    callable ``(m, x) -> AttackResult`` that raises :class:`AttackError` on
    failure can be injected.
    """
    attack_l2 = attack_l2 or (lambda mm, xx: deepfool_l2(mm, xx, cfg))
    attack_linf = attack_linf or (lambda mm, xx: deepfool_linf(mm, xx, cfg))
    x = np.asarray(x, dtype=np.float64)
    out = []
    for norm, attack in (("l2", attack_l2), ("linf", attack_linf)):
        rng = noise_rng(seed, image_id, norm)
        for r in range(max_retries + 1):
            probe = x if r == 0 else x + rng.normal(0.0, retry_sigma(r), size=x.shape)
            try:
                res = attack(m, probe)
            except AttackError:
                continue
            if not res.success:
                continue
            out += [res.norm(norm), r]
            break
        else:
            raise RetriesExhausted(f"{norm} attack failed after {max_retries} retries on image {image_id}")
    return tuple(out)


def estimate_margins_batch(m, xb, image_ids, seed=0, cfg: DeepFoolConfig = DeepFoolConfig(),
                           max_retries=MAX_RETRIES):
    """Batched version of :func:`estimate_margins`.

    Returns ``{norm: (margins, retries)}`` with NaN margin and retries = -1
    for images that exhausted their retries.  Noise is drawn from one stream
    per (seed, image, norm), so results do not depend on which other images
    share the batch.
    """
    xb = np.asarray(xb, dtype=np.float64)
    n = len(xb)
    out = {}
    for norm in NORMS:
        margins = np.full(n, np.nan)
        retries = np.full(n, -1, dtype=np.int64)
        rngs = [noise_rng(seed, i, norm) for i in image_ids]
        pending = np.arange(n)
        for r in range(max_retries + 1):
            if pending.size == 0:
                break
            if r == 0:
                probe = xb[pending]
            else:
                sigma = retry_sigma(r)
                probe = np.stack([xb[i] + rngs[i].normal(0.0, sigma, size=xb[i].shape) for i in pending])
            results = deepfool_batch(m, probe, cfg, norm)
            ok = np.array([res.success for res in results], dtype=bool)
            for i, res in zip(pending[ok], np.asarray(results, dtype=object)[ok]):
                margins[i] = res.norm(norm)
                retries[i] = r
            pending = pending[~ok]
        out[norm] = (margins, retries)
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class GroupStats:
    count: int
    d2_avg: float | None = None
    d2_se: float | None = None
    dinf_avg: float | None = None
    dinf_se: float | None = None

    def get(self, norm, stat):
        return getattr(self, f"{'d2' if norm == 'l2' else 'dinf'}_{stat}")


@dataclass(frozen=True)
class EpochStats:
    all: GroupStats
    correct: GroupStats
    incorrect: GroupStats
    excluded: int = 0

    def group(self, name):
        return getattr(self, name)


def mean_and_se(values):
    """Mean and (1/n) * sqrt(sum (d - mean)^2)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    avg = math.fsum(v) / n
    se = math.sqrt(math.fsum((v - avg) ** 2)) / n
    return avg, se


def _group(records):
    if not records:
        return GroupStats(0)
    d2_avg, d2_se = mean_and_se([r.d2 for r in records])
    di_avg, di_se = mean_and_se([r.dinf for r in records])
    return GroupStats(len(records), d2_avg, d2_se, di_avg, di_se)


def aggregate(records, excluded=0) -> EpochStats:
    records = list(records)
    if not records:
        raise EmptyInput("aggregate needs at least one record")
    return EpochStats(
        _group(records),
        _group([r for r in records if r.correct]),
        _group([r for r in records if not r.correct]),
        excluded,
    )


def select(records, subgroup):
    if subgroup == "all":
        return list(records)
    if subgroup == "correct":
        return [r for r in records if r.correct]
    if subgroup == "incorrect":
        return [r for r in records if not r.correct]
    raise ValueError(f"unknown subgroup {subgroup!r}")


@dataclass(frozen=True)
class MarginHistogram:
    norm: str
    subgroup: str
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


def histogram(records, norm, subgroup="all", bins=50, edges=None) -> MarginHistogram:
    """Fixed-width bins over [0, max margin]; the last bin is closed on the right.

    Pass ``edges`` to reuse the binning of another histogram (e.g. to split one
    set of bins into correct / incorrect counts).
    """
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    records = list(records)
    if not records:
        raise EmptyInput("histogram needs at least one record")
    if edges is None:
        if bins < 1:
            raise ValueError("bins must be >= 1")
        top = max(r.margin(norm) for r in records)
        edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    edges = np.asarray(edges, dtype=np.float64)
    counts, _ = np.histogram([r.margin(norm) for r in select(records, subgroup)], bins=edges)
    return MarginHistogram(norm, subgroup, edges, counts.astype(np.int64))


# ---------------------------------------------------------------------------
# correctness transitions


@dataclass(frozen=True)
class Flows:
    from_epoch: int
    to_epoch: int
    correct_to_correct: int
    correct_to_incorrect: int
    incorrect_to_correct: int
    incorrect_to_incorrect: int

    @property
    def total(self):
        return (self.correct_to_correct + self.correct_to_incorrect
                + self.incorrect_to_correct + self.incorrect_to_incorrect)

    @property
    def incorrect_now(self):
        return self.correct_to_incorrect + self.incorrect_to_incorrect

    def as_dict(self):
        return {"from_epoch": self.from_epoch, "to_epoch": self.to_epoch,
                "correct_to_correct": self.correct_to_correct,
                "correct_to_incorrect": self.correct_to_incorrect,
                "incorrect_to_correct": self.incorrect_to_correct,
                "incorrect_to_incorrect": self.incorrect_to_incorrect}


@dataclass
class TransitionLedger:
    """Per-epoch correctness bitmaps over a fixed image population."""

    size: int
    epochs: list = field(default_factory=list)
    bitmaps: list = field(default_factory=list)
    flows: list = field(default_factory=list)

    def record(self, epoch, bitmap):
        bitmap = np.asarray(bitmap, dtype=bool)
        if bitmap.shape != (self.size,):
            raise LengthMismatch(f"bitmap of length {bitmap.size}, ledger tracks {self.size} images")
        if self.epochs and epoch != self.epochs[-1] + 1:
            raise NonConsecutiveEpoch(f"epoch {epoch} after {self.epochs[-1]}")
        flow = None
        if self.bitmaps:
            prev = self.bitmaps[-1]
            flow = Flows(self.epochs[-1], epoch,
                         int(np.sum(prev & bitmap)), int(np.sum(prev & ~bitmap)),
                         int(np.sum(~prev & bitmap)), int(np.sum(~prev & ~bitmap)))
            self.flows.append(flow)
        self.epochs.append(epoch)
        self.bitmaps.append(bitmap.copy())
        return flow


def record_transitions(ledger: TransitionLedger, epoch, bitmap):
    """Append ``bitmap`` for ``epoch``; returns (ledger, flows vs the previous epoch or None)."""
    flow = ledger.record(epoch, bitmap)
    return ledger, flow
