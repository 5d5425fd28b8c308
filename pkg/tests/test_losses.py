import math

import numpy as np
import pytest
import torch

from cfpath.errors import DimensionMismatch, OverlapError, SelectionNotEmpty
from cfpath.losses import (ContrastiveLossInput, batch_loss, dynamic_loss, infonce,
                           masked_contrastive_loss, nsam_loss, ranking_source, srcl_loss,
                           symmetric_batch_loss)
from cfpath.sampling import SampleSelection, SamplingPlan, Strategy, build_selection

import oracles


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def inp(q, keys, m=0, pos=(), boosted=(), tau=0.2):
    return ContrastiveLossInput(np.asarray(q, float), np.asarray(keys, float), m,
                                SampleSelection(list(pos), list(boosted)), tau)


def test_infonce_hand_value():
    v = infonce(inp([1, 0], [[1, 0], [0, 1]], tau=1.0)).value
    assert v == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert v == pytest.approx(0.31326169, abs=1e-8)


@pytest.mark.parametrize("k", [1, 3, 10])
@pytest.mark.parametrize("tau", [0.05, 0.2, 1.0])
def test_infonce_identical_keys(k, tau):
    keys = np.tile([0.6, 0.8], (k + 1, 1))
    assert infonce(inp([0.6, 0.8], keys, tau=tau)).value == pytest.approx(math.log(k + 1), abs=1e-12)


def test_infonce_matches_naive():
    rng = np.random.default_rng(0)
    keys = unit_rows(rng, 8, 4)
    q = unit_rows(rng, 1, 4)[0]
    for m in range(8):
        ref = oracles.naive_loss(list(q), [list(k) for k in keys], m, [], [], 0.2)
        assert infonce(inp(q, keys, m)).value == pytest.approx(ref, abs=1e-9)


def test_infonce_rejects_selection():
    with pytest.raises(SelectionNotEmpty):
        infonce(inp([1, 0], [[1, 0], [0, 1], [1, 1]], pos=[1]))


def test_srcl_identical_keys():
    n = 9
    keys = np.tile([1.0, 0.0, 0.0], (n, 1))
    assert srcl_loss(inp([1, 0, 0], keys, 0, pos=[3, 5])).value == pytest.approx(-math.log(3 / n), abs=1e-12)


def test_srcl_matches_naive():
    rng = np.random.default_rng(1)
    keys = unit_rows(rng, 16, 6)
    q = unit_rows(rng, 1, 6)[0]
    pos = [2, 7, 9, 11, 15]
    ref = oracles.naive_loss(list(q), keys.tolist(), 4, pos, [], 0.2)
    assert srcl_loss(inp(q, keys, 4, pos=pos)).value == pytest.approx(ref, abs=1e-9)


def test_srcl_overlap_errors():
    with pytest.raises(OverlapError):
        srcl_loss(inp([1, 0], [[1, 0], [0, 1], [1, 1]], 0, pos=[0]))
    with pytest.raises(SelectionNotEmpty):
        srcl_loss(inp([1, 0], [[1, 0], [0, 1], [1, 1]], 0, boosted=[1]))


def test_nsam_hand_value():
    v = nsam_loss(inp([1, 0], [[1, 0], [0, 1]], 0, boosted=[1], tau=1.0)).value
    assert v == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert v == pytest.approx(0.55144471, abs=1e-8)  # log(1 + 2/e)


def test_nsam_matches_naive():
    rng = np.random.default_rng(2)
    keys = unit_rows(rng, 64, 8)
    q = unit_rows(rng, 1, 8)[0]
    boosted = build_selection(SamplingPlan(Strategy.NSAM), 0, keys @ q, 10).negatives_boosted
    assert len(boosted) == 50
    ref = oracles.naive_loss(list(q), keys.tolist(), 10, [], boosted, 0.2)
    assert nsam_loss(inp(q, keys, 10, boosted=boosted)).value == pytest.approx(ref, abs=1e-9)


def test_nsam_overlap_errors():
    with pytest.raises(OverlapError):
        nsam_loss(inp([1, 0], [[1, 0], [0, 1]], 0, boosted=[0]))
    with pytest.raises(SelectionNotEmpty):
        nsam_loss(inp([1, 0], [[1, 0], [0, 1], [1, 1]], 0, pos=[1]))


def test_dynamic_matches_naive_and_reductions():
    rng = np.random.default_rng(3)
    keys = unit_rows(rng, 32, 6)
    q = unit_rows(rng, 1, 6)[0]
    pos, boosted = [1, 4, 9, 20, 30], [2, 3, 5, 6, 7, 8, 10, 11]
    ref = oracles.naive_loss(list(q), keys.tolist(), 0, pos, boosted, 0.2)
    assert dynamic_loss(inp(q, keys, 0, pos, boosted)).value == pytest.approx(ref, abs=1e-9)
    assert dynamic_loss(inp(q, keys, 0, [], boosted)).value == pytest.approx(
        nsam_loss(inp(q, keys, 0, [], boosted)).value, abs=1e-12)
    with pytest.raises(OverlapError):
        dynamic_loss(inp(q, keys, 0, [1, 2], [2]))


def test_reduction_chain():
    rng = np.random.default_rng(4)
    for _ in range(20):
        keys = unit_rows(rng, 12, 5)
        q = unit_rows(rng, 1, 5)[0]
        base = infonce(inp(q, keys, 3)).value
        for fn in (srcl_loss, nsam_loss, dynamic_loss):
            assert fn(inp(q, keys, 3)).value == pytest.approx(base, abs=1e-12)


def test_breakdown_reproduces_value():
    rng = np.random.default_rng(5)
    keys = unit_rows(rng, 20, 5)
    q = unit_rows(rng, 1, 5)[0]
    lv = dynamic_loss(inp(q, keys, 0, [1, 2, 3], [10, 11]))
    b = lv.per_term_breakdown
    num = b["matched"] + b["extra_pos"]
    recon = -math.log(num / (num + b["boosted_neg"] + b["plain_neg"]))
    assert recon == pytest.approx(lv.value, abs=1e-9)
    assert lv.value >= 0


def test_monotonicity():
    # rotate one key towards q and watch the loss move
    q = np.array([1.0, 0.0, 0.0])
    base = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0]], float)

    def with_angle(idx, theta):
        k = base.copy()
        k[idx] = [math.cos(theta), math.sin(theta), 0.0] if idx != 2 else [math.cos(theta), 0, math.sin(theta)]
        return k

    angles = np.linspace(2.5, 0.2, 12)
    plain = [infonce(inp(q, with_angle(1, a), 0)).value for a in angles]
    assert all(x < y for x, y in zip(plain, plain[1:]))
    boosted = [nsam_loss(inp(q, with_angle(1, a), 0, boosted=[1])).value for a in angles]
    assert all(x < y for x, y in zip(boosted, boosted[1:]))
    extra = [srcl_loss(inp(q, with_angle(2, a), 0, pos=[2])).value for a in angles]
    assert all(x > y for x, y in zip(extra, extra[1:]))
    extra_dyn = [dynamic_loss(inp(q, with_angle(2, a), 0, [2], [4])).value for a in angles]
    assert all(x > y for x, y in zip(extra_dyn, extra_dyn[1:]))


def test_stability_small_tau():
    rng = np.random.default_rng(6)
    q = np.ones(4) / 2
    keys = q + 1e-4 * rng.normal(size=(40, 4))
    with np.errstate(over="ignore"):
        naive32 = np.exp(np.float32(keys @ q / 0.05 * 20)).sum(dtype=np.float32)
    assert not np.isfinite(naive32)  # the unguarded float32 path overflows at this scale
    for fn, sel in [(infonce, ([], [])), (srcl_loss, ([1, 2], [])), (nsam_loss, ([], [5, 6])),
                    (dynamic_loss, ([1], [7]))]:
        assert np.isfinite(fn(inp(q, keys, 0, *sel, tau=0.05)).value)
    t = torch.as_tensor(keys)
    z = torch.zeros(40, 40, dtype=torch.bool)
    assert torch.isfinite(masked_contrastive_loss(t, t, z, z, 0.001))


def test_batch_loss_matches_loop():
    rng = np.random.default_rng(7)
    qs, ks, orig = unit_rows(rng, 8, 6), unit_rows(rng, 8, 6), unit_rows(rng, 8, 6)
    plan = SamplingPlan(Strategy.NSAM, t_fixed=3)
    sims = orig @ orig.T
    boosted = [build_selection(plan, 0, sims[i], i).negatives_boosted for i in range(8)]
    ref = oracles.naive_batch_loss(qs.tolist(), ks.tolist(), [[]] * 8, boosted, 0.2)
    assert float(batch_loss(plan, 0, qs, ks, orig)) == pytest.approx(ref, abs=1e-9)
    base = np.mean([infonce(inp(qs[i], ks, i)).value for i in range(8)])
    assert float(batch_loss(SamplingPlan(), 3, qs, ks, orig)) == pytest.approx(base, abs=1e-9)


def test_batch_loss_srcl_ranking_source():
    rng = np.random.default_rng(8)
    qs, ks, orig = unit_rows(rng, 10, 5), unit_rows(rng, 10, 5), unit_rows(rng, 10, 5)
    plan = SamplingPlan(Strategy.SRCL, s_fixed=2)
    sims = orig @ ks.T  # original key vs augmented keys
    pos = [build_selection(plan, 6, sims[i], i).positives for i in range(10)]
    ref = oracles.naive_batch_loss(qs.tolist(), ks.tolist(), pos, [[]] * 10, 0.2)
    assert float(batch_loss(plan, 6, qs, ks, orig)) == pytest.approx(ref, abs=1e-9)
    np.testing.assert_allclose(ranking_source("srcl", ks, orig), sims, atol=1e-12)
    np.testing.assert_allclose(ranking_source("dynamic", ks, orig), orig @ orig.T, atol=1e-12)


def test_srcl_pre_activation_equals_baseline():
    rng = np.random.default_rng(9)
    qs, ks, orig = unit_rows(rng, 12, 5), unit_rows(rng, 12, 5), unit_rows(rng, 12, 5)
    for e in range(0, 6):
        a = float(batch_loss(SamplingPlan(Strategy.SRCL), e, qs, ks, orig))
        b = float(batch_loss(SamplingPlan(), e, qs, ks, orig))
        assert a == b


def test_batch_loss_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        batch_loss(SamplingPlan(), 0, np.ones((4, 3)), np.ones((4, 3)), np.ones((5, 3)))


@pytest.mark.parametrize("plan, epoch", [
    (SamplingPlan(), 1),
    (SamplingPlan(Strategy.SRCL, s_fixed=2), 7),
    (SamplingPlan(Strategy.NSAM, t_fixed=3), 1),
    (SamplingPlan(Strategy.DYNAMIC, s_start=2, t_step=2), 7),
])
def test_gradient_check(plan, epoch):
    rng = np.random.default_rng(10)
    q0, ks, orig = rng.normal(size=(8, 6)), unit_rows(rng, 8, 6), unit_rows(rng, 8, 6)
    q = torch.tensor(q0, requires_grad=True)
    loss = batch_loss(plan, epoch, q, ks, orig)
    loss.backward()
    analytic = q.grad.numpy()
    h = 1e-5
    numeric = np.zeros_like(q0)
    for idx in np.ndindex(q0.shape):
        plus, minus = q0.copy(), q0.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (float(batch_loss(plan, epoch, plus, ks, orig))
                        - float(batch_loss(plan, epoch, minus, ks, orig))) / (2 * h)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert np.max(rel[np.abs(numeric) > 1e-7]) < 1e-4


def test_no_gradient_to_keys():
    rng = np.random.default_rng(11)
    q = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    k = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    o = torch.tensor(rng.normal(size=(6, 4)))
    batch_loss(SamplingPlan(Strategy.NSAM, t_fixed=2), 0, q, k, o).backward()
    assert q.grad is not None and k.grad is None


def test_symmetric_loss_average():
    rng = np.random.default_rng(12)
    qa, qb, ka, kb, o = (unit_rows(rng, 10, 5) for _ in range(5))
    for strategy in Strategy:
        plan = SamplingPlan(strategy, s_fixed=2, t_fixed=3, s_start=2, t_step=2)
        loss, _ = symmetric_batch_loss(plan, 7, qa, qb, ka, kb, o)
        ab = float(batch_loss(plan, 7, qa, kb, o))
        ba = float(batch_loss(plan, 7, qb, ka, o))
        assert float(loss) == pytest.approx(0.5 * (ab + ba), abs=1e-12)
        one, _ = symmetric_batch_loss(plan, 7, qa, qb, ka, kb, o, symmetrize=False)
        assert float(one) == pytest.approx(ab, abs=1e-12)
