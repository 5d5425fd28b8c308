"""InfoNCE and its semantically relevant sampling variants.

Per-anchor functions (:func:`infonce`, :func:`srcl_loss`, :func:`nsam_loss`,
:func:`dynamic_loss`) evaluate one query in float64 numpy and return a
:class:`LossValue` with the psi mass of each term. :func:`batch_loss` is the
batched torch version used for training; gradients flow through the
queries only.

All four losses share one form. With numerator set ``P`` (matched key plus
extra positives), boosted negatives ``B`` and plain negatives ``R`` (every
key outside ``P``)::

    loss = -log( sum_P psi / (sum_P psi + sum_B psi + sum_R psi) )

``B`` is a subset of ``R``, so boosted negatives count twice.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp

from .core_math import l2_normalize, l2_normalize_rows
from .errors import DimensionMismatch, OverlapError, SelectionNotEmpty
from .sampling import SampleSelection, Strategy, selection_masks

DEFAULT_TAU = 0.2


@dataclass
class ContrastiveLossInput:
    q: np.ndarray
    keys: np.ndarray
    matched_index: int
    selection: SampleSelection = field(default_factory=SampleSelection)
    tau: float = DEFAULT_TAU


@dataclass
class LossValue:
    value: float
    per_term_breakdown: dict

    def __float__(self):
        return self.value


def _evaluate(inp):
    if not inp.tau > 0:
        raise ValueError("temperature must be positive")
    q = l2_normalize(inp.q)
    keys = l2_normalize_rows(inp.keys)
    if keys.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query dim {q.shape[0]} vs key dim {keys.shape[1]}")
    n = keys.shape[0]
    if n < 2:
        raise ValueError("need at least two keys")
    m = inp.matched_index
    pos = list(inp.selection.positives)
    boosted = list(inp.selection.negatives_boosted)
    if m in pos or m in boosted:
        raise OverlapError("matched key is also listed in the selection")
    if set(pos) & set(boosted):
        raise OverlapError("positives and boosted negatives overlap")
    if len(set(pos)) != len(pos) or len(set(boosted)) != len(boosted):
        raise OverlapError("selection contains duplicate indices")

    z = keys @ q / inp.tau
    num_mask = np.zeros(n, dtype=bool)
    num_mask[m] = True
    num_mask[pos] = True
    boost_mask = np.zeros(n, dtype=bool)
    boost_mask[boosted] = True

    # log(den / num) = log1p(neg / num) stays accurate when the negatives are negligible
    neg = np.concatenate([z[~num_mask], z[boost_mask]])
    value = float(np.log1p(np.exp(logsumexp(neg) - logsumexp(z[num_mask])))) if neg.size else 0.0

    psi = np.exp(z)
    breakdown = {
        "matched": float(psi[m]),
        "extra_pos": float(psi[pos].sum()),
        "boosted_neg": float(psi[boost_mask].sum()),
        "plain_neg": float(psi[~num_mask].sum()),
    }
    return LossValue(value=max(value, 0.0), per_term_breakdown=breakdown)


def infonce(inp):
    if not inp.selection.empty:
        raise SelectionNotEmpty("infonce takes an empty selection")
    return _evaluate(inp)


def srcl_loss(inp):
    if inp.selection.negatives_boosted:
        raise SelectionNotEmpty("srcl_loss takes no boosted negatives")
    return _evaluate(inp)


def nsam_loss(inp):
    if inp.selection.positives:
        raise SelectionNotEmpty("nsam_loss takes no extra positives")
    return _evaluate(inp)


def dynamic_loss(inp):
    return _evaluate(inp)


LOSS_BY_STRATEGY = {
    Strategy.BASELINE: infonce,
    Strategy.SRCL: srcl_loss,
    Strategy.NSAM: nsam_loss,
    Strategy.DYNAMIC: dynamic_loss,
}


def masked_contrastive_loss(queries, keys, pos_mask, boost_mask, tau):
    """Mean per-anchor loss for a batch; key ``i`` is the match of query ``i``.

    ``pos_mask``/``boost_mask`` are (N, N) booleans of extra positives and
    boosted negatives per anchor. Keys are detached.
    """
    q = F.normalize(queries, dim=1)
    k = F.normalize(keys.detach(), dim=1)
    logits = q @ k.T / tau
    n = logits.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=logits.device)
    num_mask = eye | pos_mask
    log_den = torch.logsumexp(logits + torch.log1p(boost_mask.to(logits.dtype)), dim=1)
    log_num = torch.logsumexp(logits.masked_fill(~num_mask, float("-inf")), dim=1)
    return (log_den - log_num).mean()


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def ranking_source(strategy, keys, original_keys):
    """Similarity matrix that drives selection for ``strategy``.

    SRCL ranks each original key against the augmented keys; N-Sam and
    dynamic sampling rank original keys against each other.
    """
    orig = F.normalize(_to_tensor(original_keys).detach(), dim=1)
    if Strategy.parse(strategy) is Strategy.SRCL:
        other = F.normalize(_to_tensor(keys).detach(), dim=1)
    else:
        other = orig
    return (orig @ other.T).cpu().numpy()


def batch_loss(plan, epoch, queries, keys, original_keys, tau=DEFAULT_TAU, masks=None):
    """Mean loss over all anchors of a batch under ``plan`` at ``epoch``.

    ``masks`` lets a caller reuse precomputed (pos, boost) selection masks.
    """
    q = _to_tensor(queries)
    k = _to_tensor(keys)
    if q.shape != k.shape or tuple(_to_tensor(original_keys).shape) != tuple(q.shape):
        raise DimensionMismatch(
            f"queries {tuple(q.shape)}, keys {tuple(k.shape)}, "
            f"original keys {tuple(np.shape(original_keys))} must match")
    if masks is None:
        sims = ranking_source(plan.strategy, k, original_keys)
        masks = selection_masks(plan, epoch, sims)
    pos, boost = (torch.as_tensor(m, device=q.device) for m in masks)
    return masked_contrastive_loss(q, k, pos, boost, tau)


def symmetric_batch_loss(plan, epoch, queries_a, queries_b, keys_a, keys_b,
                         original_keys, tau=DEFAULT_TAU, symmetrize=True):
    """Average of the A->B and B->A directions (A->B only if not symmetrizing).

    Returns (loss, masks_ab) so callers can inspect the selection.
    """
    sims_ab = ranking_source(plan.strategy, keys_b, original_keys)
    masks_ab = selection_masks(plan, epoch, sims_ab)
    loss = batch_loss(plan, epoch, queries_a, keys_b, original_keys, tau, masks=masks_ab)
    if not symmetrize:
        return loss, masks_ab
    if plan.strategy is Strategy.SRCL:
        masks_ba = selection_masks(plan, epoch, ranking_source(plan.strategy, keys_a, original_keys))
    else:
        masks_ba = masks_ab
    loss_ba = batch_loss(plan, epoch, queries_b, keys_a, original_keys, tau, masks=masks_ba)
    return 0.5 * (loss + loss_ba), masks_ab
