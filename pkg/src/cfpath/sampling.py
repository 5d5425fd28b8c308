"""Similarity-ranked selection of extra positives and boosted negatives.

Every selector is rank based: only the order of the similarity row
matters, with ties broken by the lower batch index.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CountTooLarge, OverlapError


class Strategy(str, Enum):
    BASELINE = "baseline"
    SRCL = "srcl"
    NSAM = "nsam"
    DYNAMIC = "dynamic"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", ""))
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown strategy {value!r} (expected one of {names})") from None


@dataclass(frozen=True)
class SamplingPlan:
    strategy: Strategy = Strategy.BASELINE
    s_fixed: int = 5
    t_fixed: int = 50
    activation_epoch: int = 5
    s_start: int = 30
    s_step: int = 5
    s_min: int = 1
    t_step: int = 20

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        counts = (self.s_fixed, self.t_fixed, self.activation_epoch,
                  self.s_start, self.s_step, self.s_min, self.t_step)
        if any(int(c) != c or c < 0 for c in counts):
            raise ValueError("sampling counts must be nonnegative integers")
        if self.s_min < 1:
            raise ValueError("s_min must be >= 1")


@dataclass
class SampleSelection:
    positives: list = field(default_factory=list)
    negatives_boosted: list = field(default_factory=list)
    epoch: int = 0

    @property
    def empty(self):
        return not self.positives and not self.negatives_boosted


def schedule(plan, epoch):
    """Return (S_e, T_e) for a 1-indexed epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    a = plan.activation_epoch
    strategy = plan.strategy
    if strategy is Strategy.BASELINE:
        return 0, 0
    if strategy is Strategy.SRCL:
        return (plan.s_fixed, 0) if epoch >= a + 1 else (0, 0)
    if strategy is Strategy.NSAM:
        return 0, plan.t_fixed
    if epoch <= a:
        return 0, 0
    s = max(plan.s_min, plan.s_start - plan.s_step * (epoch - a - 1))
    t = plan.t_step * (epoch - a)
    return s, t


def max_counts(plan, epochs):
    """Largest S_e + T_e requested over epochs 1..epochs."""
    return max((sum(schedule(plan, e)) for e in range(1, epochs + 1)), default=0)


def _candidates(row, anchor, exclude=()):
    row = np.asarray(row, dtype=np.float64)
    keep = np.ones(row.shape[0], dtype=bool)
    keep[anchor] = False
    if len(exclude):
        keep[np.asarray(exclude, dtype=np.int64)] = False
    return row, np.flatnonzero(keep)


def _check_count(count, available):
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count > available:
        raise CountTooLarge(f"requested {count} samples but only {available} candidates")


def ranking(row, anchor, exclude=()):
    """Non-anchor, non-excluded indices by descending similarity."""
    row, idx = _candidates(row, anchor, exclude)
    return idx[np.lexsort((idx, -row[idx]))]


def select_positives(row, anchor, count):
    """Indices of the ``count`` most similar keys, most similar first."""
    row, idx = _candidates(row, anchor)
    _check_count(count, idx.size)
    order = np.lexsort((idx, -row[idx]))
    return idx[order[:count]].tolist()


def select_negatives_tail(row, anchor, count):
    """Indices of the ``count`` least similar keys, least similar first."""
    row, idx = _candidates(row, anchor)
    _check_count(count, idx.size)
    order = np.lexsort((idx, row[idx]))
    return idx[order[:count]].tolist()


def middle_positions(m, count):
    """Ranking positions visited center-first, alternating toward the more similar side."""
    if count > m:
        raise CountTooLarge(f"requested {count} of {m} ranked candidates")
    c = m // 2
    out = [c] if count and m else []
    step = 1
    while len(out) < count:
        lo, hi = c - step, c + step
        if lo >= 0:
            out.append(lo)
        if hi < m and len(out) < count:
            out.append(hi)
        step += 1
    return out[:count]


def select_negatives_middle(row, anchor, count, exclude=()):
    r = ranking(row, anchor, exclude)
    _check_count(count, r.size)
    return r[middle_positions(r.size, count)].tolist()


def build_selection(plan, epoch, row, anchor):
    s, t = schedule(plan, epoch)
    strategy = plan.strategy
    positives, boosted = [], []
    if strategy is Strategy.SRCL:
        positives = select_positives(row, anchor, s)
    elif strategy is Strategy.NSAM:
        boosted = select_negatives_tail(row, anchor, t)
    elif strategy is Strategy.DYNAMIC:
        positives = select_positives(row, anchor, s)
        boosted = select_negatives_middle(row, anchor, t, exclude=positives)
    if set(positives) & set(boosted):
        raise OverlapError("positives and boosted negatives overlap")
    return SampleSelection(positives=positives, negatives_boosted=boosted, epoch=epoch)


def selection_masks(plan, epoch, sims):
    """Per-anchor selections over a square (N, N) ranking matrix as boolean masks.

    Row i of ``sims`` ranks candidates for anchor i; the diagonal is the anchor.
    """
    sims = np.asarray(sims, dtype=np.float64)
    n = sims.shape[0]
    pos = np.zeros((n, sims.shape[1]), dtype=bool)
    neg = np.zeros_like(pos)
    if schedule(plan, epoch) == (0, 0):
        return pos, neg
    for i in range(n):
        sel = build_selection(plan, epoch, sims[i], i)
        pos[i, sel.positives] = True
        neg[i, sel.negatives_boosted] = True
    return pos, neg
