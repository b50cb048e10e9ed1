"""DeepFool (l2 and l-inf) and PGD against a frozen classifier.

DeepFool works on logits.  Each iteration linearizes every competing class
``k`` around the current iterate, picks the class whose linearized boundary is
nearest, and steps exactly onto it.  The accumulated step is inflated by
``1 + overshoot`` when testing for a flip and in the returned perturbation.
No pixel clipping is applied: the perturbation measures a distance in input
space, not a valid image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ModelSnapshot, as_batch, batch_scores_and_gradients, input_loss_grad

DEGENERATE_NORM = 1e-12
# smallest step length taken when an iterate sits exactly on a tie
MIN_STEP = 1e-10


class AttackError(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NoFlip(AttackError):
    pass


class DegenerateGradient(AttackError):
    pass


@dataclass(frozen=True)
class AttackResult:
    delta: np.ndarray
    iterations: int
    success: bool
    final_class: int
    original_class: int
    status: str = "ok"  # ok | no_flip | degenerate

    def norm(self, p):
        d = np.ravel(self.delta)
        return float(np.abs(d).max(initial=0.0)) if p == "linf" else float(np.linalg.norm(d))


@dataclass(frozen=True)
class DeepFoolConfig:
    max_iterations: int = 50
    overshoot: float = 0.02
    candidates: int | None = None  # None: every non-predicted class; k: the k highest-scoring ones

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if self.candidates is not None and self.candidates < 1:
            raise ValueError("candidates must be >= 1 or None")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.3
    step_size: float | None = None  # defaults to epsilon / 4
    steps: int = 10
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"step size must satisfy 0 < alpha <= epsilon, got {self.alpha}")
        if self.clip_min >= self.clip_max:
            raise ValueError("clip_min must be below clip_max")

    @property
    def alpha(self):
        return self.epsilon / 4 if self.step_size is None else self.step_size


def decide_rows(m: ModelSnapshot, xb):
    """Decided class of each row, evaluated one image at a time like :func:`network.predict`."""
    xb = as_batch(m.architecture, xb)
    return np.array([int(np.argmax(m.logits(xb[i:i + 1])[0])) for i in range(len(xb))], dtype=np.int64)


def _candidate_mask(logits0, k0, cfg):
    n, c = logits0.shape
    mask = np.ones((n, c), dtype=bool)
    mask[np.arange(n), k0] = False
    if cfg.candidates is not None and cfg.candidates < c - 1:
        order = np.argsort(-logits0, axis=1, kind="stable")
        mask[:] = False
        for i in range(n):
            picks = [k for k in order[i] if k != k0[i]][:cfg.candidates]
            mask[i, picks] = True
    return mask


def deepfool_batch(m: ModelSnapshot, xb, cfg: DeepFoolConfig = DeepFoolConfig(), norm="l2"):
    """Run DeepFool on every row of ``xb``; returns one AttackResult per row, never raises on failure."""
    if norm not in ("l2", "linf"):
        raise ValueError(f"norm must be 'l2' or 'linf', got {norm!r}")
    in_shape = np.shape(xb)[1:]
    x0 = as_batch(m.architecture, xb)
    n = len(x0)
    flat0 = x0.reshape(n, -1)
    scale = 1.0 + cfg.overshoot
    k0 = decide_rows(m, x0)
    mask = _candidate_mask(m.logits(x0), k0, cfg)

    r_tot = np.zeros_like(flat0)
    iters = np.zeros(n, dtype=np.int64)
    status = np.full(n, "no_flip", dtype=object)
    final = k0.copy()
    active = np.arange(n)
    x_cur = x0.copy()
    for _ in range(cfg.max_iterations):
        if active.size == 0:
            break
        logits, jac = batch_scores_and_gradients(m, x_cur[active])
        a = np.arange(active.size)
        ka = k0[active]
        jac = jac.reshape(active.size, m.num_classes, -1)
        w = jac - jac[a, ka][:, None, :]
        f = logits - logits[a, ka][:, None]
        wn = np.linalg.norm(w, axis=2) if norm == "l2" else np.abs(w).sum(axis=2)
        valid = mask[active] & (wn >= DEGENERATE_NORM)
        ratio = np.full(wn.shape, np.inf)
        np.divide(np.abs(f), wn, out=ratio, where=valid)
        degenerate = ~valid.any(axis=1)
        status[active[degenerate]] = "degenerate"

        live = ~degenerate
        rows, sub = active[live], a[live]
        best = np.argmin(ratio[sub], axis=1)
        pert = np.maximum(ratio[sub, best], MIN_STEP)
        wl = w[sub, best]
        if norm == "l2":
            step = (pert / wn[sub, best])[:, None] * wl
        else:
            step = pert[:, None] * np.sign(wl)
        r_tot[rows] += step
        iters[rows] += 1
        x_cur[rows] = (flat0[rows] + scale * r_tot[rows]).reshape((len(rows),) + x0.shape[1:])
        new_cls = m.decide(x_cur[rows]) if len(rows) else np.array([], dtype=np.int64)
        flipped = new_cls != k0[rows]
        if flipped.any():
            confirm = decide_rows(m, x_cur[rows[flipped]])
            ok = confirm != k0[rows[flipped]]
            done = rows[flipped][ok]
            status[done] = "ok"
            final[done] = confirm[ok]
            flipped[np.flatnonzero(flipped)[~ok]] = False
        active = rows[~flipped]

    if active.size:
        final[active] = decide_rows(m, x_cur[active])
    results = []
    for i in range(n):
        results.append(AttackResult(
            delta=(scale * r_tot[i]).reshape(in_shape),
            iterations=int(iters[i]),
            success=status[i] == "ok",
            final_class=int(final[i]),
            original_class=int(k0[i]),
            status=str(status[i]),
        ))
    return results


def _single(m, x, cfg, norm):
    x = np.asarray(x, dtype=np.float64)
    (res,) = deepfool_batch(m, x[None], cfg, norm)
    if res.status == "degenerate":
        raise DegenerateGradient("every candidate gradient difference vanished", res)
    if not res.success:
        raise NoFlip(f"no class change after {res.iterations} iterations", res)
    return res


def deepfool_l2(m: ModelSnapshot, x, cfg: DeepFoolConfig = DeepFoolConfig()) -> AttackResult:
    """l2 DeepFool on one image; raises NoFlip or DegenerateGradient if no flip is found."""
    return _single(m, x, cfg, "l2")


def deepfool_linf(m: ModelSnapshot, x, cfg: DeepFoolConfig = DeepFoolConfig()) -> AttackResult:
    """l-inf DeepFool on one image: l1-normalized ratios and sign steps."""
    return _single(m, x, cfg, "linf")


def pgd_perturb(arch, params, xb, labels, cfg: PgdConfig, rng):
    """Adversarial versions of ``xb`` under l-inf PGD on the cross-entropy loss.

    ``params`` is a flat parameter vector, so this works against live training
    weights as well as snapshots.  Output stays inside the epsilon ball around
    each input and inside [clip_min, clip_max].
    """
    x0 = np.asarray(xb, dtype=np.float64)
    eps = cfg.epsilon
    lo = np.maximum(x0 - eps, cfg.clip_min)
    hi = np.minimum(x0 + eps, cfg.clip_max)
    x = x0.copy()
    if cfg.random_start and eps > 0:
        x = x + rng.uniform(-eps, eps, size=x0.shape)
    x = np.clip(x, lo, hi)
    if eps == 0:
        return x
    for _ in range(cfg.steps):
        g = input_loss_grad(arch, params, x, labels).reshape(x0.shape)
        x = np.clip(x + cfg.alpha * np.sign(g), lo, hi)
    return x


def pgd(m: ModelSnapshot, x, label, cfg: PgdConfig = PgdConfig(), seed=0) -> AttackResult:
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    adv = pgd_perturb(m.architecture, m.parameters, x[None], np.array([label]), cfg, rng)[0]
    before, after = decide_rows(m, np.stack([x, adv]))
    return AttackResult(adv - x, cfg.steps, bool(after != before), int(after), int(before))
