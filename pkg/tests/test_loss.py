import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from loopformer.loss import LossConfig, masked_mean, monotonic_adjust, total_loss


def oracle_total(steps, mask, beta):
    """Per-token loop: plain mean at step 1, beta-weighted degradations after."""
    n = sum(mask)
    total = sum(v for v, m in zip(steps[0], mask) if m) / n
    fractions = [0.0]
    for r in range(1, len(steps)):
        acc, fired = 0.0, 0
        for cur, prev, m in zip(steps[r], steps[r - 1], mask):
            if not m:
                continue
            if cur > prev:
                acc += beta * cur
                fired += 1
            else:
                acc += cur
        total += acc / n
        fractions.append(fired / n)
    return total, fractions


def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig("monotonic", 1.0)
    with pytest.raises(ValueError):
        LossConfig("nope")
    LossConfig("each_step", 1.0)


def test_monotonic_adjust_hand_example():
    out = monotonic_adjust(_t([1.0, 2.0, 3.0]), _t([2.0, 2.0, 1.0]), 2.0)
    assert out.tolist() == [1.0, 2.0, 6.0]


def test_monotonic_adjust_shape_mismatch():
    with pytest.raises(ValueError):
        monotonic_adjust(_t([1.0]), _t([1.0, 2.0]), 1.5)


def test_masked_mean():
    assert float(masked_mean(_t([1.0, 5.0, 3.0]), _t([1.0, 0.0, 1.0]))) == 2.0


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        total_loss([_t([1.0, 2.0])], torch.tensor([False, False]), LossConfig())


def test_variants_hand_values():
    s1, s2 = _t([1.0, 1.0]), _t([2.0, 0.5])
    mask = torch.tensor([True, True])
    assert float(total_loss([s1, s2], mask, LossConfig("final_step_only"))[0]) == 1.25
    assert float(total_loss([s1, s2], mask, LossConfig("each_step"))[0]) == 2.25
    total, br = total_loss([s1, s2], mask, LossConfig("monotonic", 1.5))
    assert float(total) == 1.0 + (3.0 + 0.5) / 2
    assert br.degraded_fraction == [0.0, 0.5]
    assert br.per_step_raw == [1.0, 1.25]
    assert br.per_step_adjusted == [1.0, 1.75]
    assert br.total == float(total)


def test_single_step_all_variants_agree():
    x, mask = _t([0.5, 1.5, 2.0]), torch.tensor([True, True, False])
    vals = {v: float(total_loss([x], mask, LossConfig(v))[0]) for v in ("final_step_only", "each_step", "monotonic")}
    assert set(vals.values()) == {1.0}


def _pattern_vectors(bits, tie_on_even):
    prev, cur = [], []
    for i, up in enumerate(bits):
        p = 1.0 + 0.125 * i
        if up:
            c = p + 0.25
        elif (i % 2 == 0) == tie_on_even:
            c = p
        else:
            c = p - 0.5
        prev.append(p)
        cur.append(c)
    return prev, cur


def test_exhaustive_sign_patterns_match_oracle():
    # every token position is checked against >, == and < over the two passes
    mask = [True] * 10
    maskt = torch.tensor(mask)
    cfg_m, cfg_e = LossConfig("monotonic", 1.5), LossConfig("each_step")
    for tie_on_even in (True, False):
        for bits in itertools.product((0, 1), repeat=10):
            prev, cur = _pattern_vectors(bits, tie_on_even)
            steps = [_t(prev), _t(cur)]
            mono, br = total_loss(steps, maskt, cfg_m)
            each, _ = total_loss(steps, maskt, cfg_e)
            want, fractions = oracle_total([prev, cur], mask, 1.5)
            assert float(mono) == want
            assert br.degraded_fraction == fractions
            assert float(mono) >= float(each)
            assert (float(mono) == float(each)) == (fractions[1] == 0.0)


@given(
    st.lists(st.lists(st.integers(0, 40), min_size=6, max_size=6), min_size=1, max_size=4),
    st.lists(st.booleans(), min_size=6, max_size=6).filter(any),
    st.sampled_from([1.25, 1.5, 2.0, 3.0]),
)
@settings(max_examples=200, deadline=None)
def test_random_chains_match_oracle(raw, mask, beta):
    steps = [[v / 8 for v in row] for row in raw]
    total, br = total_loss([_t(s) for s in steps], torch.tensor(mask), LossConfig("monotonic", beta))
    want, fractions = oracle_total(steps, mask, beta)
    assert float(total) == pytest.approx(want, rel=1e-14, abs=1e-14)
    assert br.degraded_fraction == pytest.approx(fractions)
    each, _ = total_loss([_t(s) for s in steps], torch.tensor(mask), LossConfig("each_step"))
    assert float(total) >= float(each) - 1e-12


def test_previous_step_gets_no_gradient_through_comparison():
    prev = _t([1.0, 2.0, 3.0]).requires_grad_()
    cur = _t([2.0, 1.0, 3.0]).requires_grad_()
    adjusted = monotonic_adjust(cur, prev, 1.5).sum()
    g_cur, g_prev = torch.autograd.grad(adjusted, [cur, prev], allow_unused=True)
    assert g_prev is None or torch.equal(g_prev, torch.zeros(3, dtype=torch.float64))
    assert g_cur.tolist() == [1.5, 1.0, 1.0]


def test_total_loss_gradient_wrt_each_step():
    s1 = _t([1.0, 1.0]).requires_grad_()
    s2 = _t([2.0, 0.5]).requires_grad_()
    total, _ = total_loss([s1, s2], torch.tensor([True, True]), LossConfig("monotonic", 1.5))
    total.backward()
    # s1 only receives its own mean term
    assert s1.grad.tolist() == [0.5, 0.5]
    assert s2.grad.tolist() == [0.75, 0.5]


def test_breakdown_to_dict():
    _, br = total_loss([_t([1.0])], torch.tensor([True]), LossConfig())
    assert set(br.to_dict()) == {"per_step_raw", "per_step_adjusted", "degraded_fraction", "total"}
    assert np.isfinite(br.total)
