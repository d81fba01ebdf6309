import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sedan.augment import AugmentParams
from sedan.contrast import (
    ContrastConfig,
    MemoryBank,
    decomposition_loss,
    info_nce,
    kl_reconstruction,
    opu_enqueue,
    sample_negatives,
    seasonal_contrast_loss,
    summarize,
    trend_contrast_loss,
)

torch.set_default_dtype(torch.float64)


def unit(*values):
    v = torch.tensor([float(x) for x in values])
    return v / v.norm()


def random_unit_keys(n, dim, seed):
    g = torch.Generator().manual_seed(seed)
    keys = torch.randn(n, dim, generator=g)
    return keys / keys.norm(dim=1, keepdim=True)


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------


def test_summarize_single_step():
    out = summarize(torch.tensor([[3.0, 4.0]]))
    assert torch.allclose(out, torch.tensor([0.6, 0.8]))
    assert out.norm().item() == pytest.approx(1.0, abs=1e-6)


def test_summarize_constant_sequence():
    row = torch.tensor([1.0, -2.0, 2.0])
    seq = row.expand(7, 3)
    assert torch.allclose(summarize(seq), row / row.norm())


def test_summarize_batch_and_zero_error():
    g = torch.Generator().manual_seed(0)
    batch = torch.randn(4, 6, 5, generator=g)
    out = summarize(batch)
    assert out.shape == (4, 5)
    assert torch.allclose(out.norm(dim=1), torch.ones(4))
    with pytest.raises(ValueError):
        summarize(torch.zeros(3, 4))


# ---------------------------------------------------------------------------
# infoNCE
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 3, 63])
def test_info_nce_uniform_logits(k):
    # all keys equal the query: every logit is 1/tau, softmax is uniform
    q = unit(1, 0, 0)
    negatives = q.expand(k, 3)
    loss = info_nce(q, q, negatives, tau=0.5)
    assert loss.item() == pytest.approx(math.log(k + 1), abs=1e-9)


def test_info_nce_separated_logits():
    # positive logit 20, negative logit -20: loss = log(1 + e^{-40})
    tau = 0.05
    q = unit(1, 0)
    k_pos = q.clone()
    negatives = -q.unsqueeze(0)
    loss = info_nce(q, k_pos, negatives, tau)
    assert loss.item() == pytest.approx(math.log1p(math.exp(-40.0)), abs=1e-20)
    assert loss.item() == pytest.approx(4.248354e-18, rel=1e-5)


def test_info_nce_temperature_scaling_identity():
    g = torch.Generator().manual_seed(1)
    q = unit(*torch.randn(5, generator=g).tolist())
    k_pos = unit(*torch.randn(5, generator=g).tolist())
    negs = random_unit_keys(6, 5, seed=2)
    # doubling tau == halving every dot product (halving q halves them all)
    a = info_nce(q, k_pos, negs, tau=0.4)
    b = info_nce(q / 2.0, k_pos, negs, tau=0.2)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_info_nce_positive_and_errors():
    q = unit(1, 1, 0)
    negs = random_unit_keys(4, 3, seed=3)
    assert info_nce(q, q, negs, 0.07).item() > 0
    with pytest.raises(ValueError):
        info_nce(q, q, negs, 0.0)


# ---------------------------------------------------------------------------
# Memory bank
# ---------------------------------------------------------------------------


def test_sample_negatives_all_and_errors():
    bank = MemoryBank(8, 4, dtype=torch.float64)
    keys = random_unit_keys(5, 4, seed=4)
    opu_enqueue(bank, keys, beta=0.5)
    got = sample_negatives(bank, 5, torch.Generator().manual_seed(0))
    assert sorted(map(tuple, got.tolist())) == sorted(map(tuple, keys.tolist()))
    with pytest.raises(ValueError):
        sample_negatives(bank, 6, torch.Generator().manual_seed(0))


def test_sample_negatives_deterministic():
    bank = MemoryBank(16, 4, dtype=torch.float64)
    opu_enqueue(bank, random_unit_keys(16, 4, seed=5), beta=0.5)
    a = sample_negatives(bank, 8, torch.Generator().manual_seed(9))
    b = sample_negatives(bank, 8, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_opu_fusion_arithmetic():
    # displaced key (0,1) fuses into its most similar prototype
    bank = MemoryBank(2, 2, dtype=torch.float64)
    opu_enqueue(bank, torch.tensor([[0.0, 1.0], [1.0, 0.0]]), beta=0.5)
    assert bank.is_full
    # cursor is back at slot 0, so (0,1) is displaced next; prototype is (1,0)
    opu_enqueue(bank, unit(1, 1), beta=0.5)
    expected = torch.tensor([2**-0.5, 2**-0.5])
    assert torch.allclose(bank.keys[1], expected, atol=1e-9)
    assert torch.allclose(bank.keys[0], expected, atol=1e-9)  # the new key


def test_opu_beta_extremes():
    for beta, expect_proto_changed in [(0.0, False), (1.0, True)]:
        bank = MemoryBank(2, 3, dtype=torch.float64)
        k0, k1 = unit(1, 0, 0), unit(0, 1, 0)
        opu_enqueue(bank, torch.stack([k0, k1]), beta=beta)
        proto_before = bank.keys[1].clone()
        opu_enqueue(bank, unit(0, 0, 1), beta=beta)
        if expect_proto_changed:
            assert torch.allclose(bank.keys[1], k0)  # replaced by displaced key
        else:
            assert torch.allclose(bank.keys[1], proto_before)


def test_opu_rejects_non_unit_keys():
    bank = MemoryBank(4, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        opu_enqueue(bank, torch.tensor([[1.0, 1.0, 1.0]]), beta=0.5)


def test_opu_full_bank_changes_exactly_two_slots():
    bank = MemoryBank(6, 5, dtype=torch.float64)
    opu_enqueue(bank, random_unit_keys(6, 5, seed=6), beta=0.5)
    before = bank.keys.clone()
    opu_enqueue(bank, random_unit_keys(1, 5, seed=7), beta=0.5)
    changed = (bank.keys - before).abs().max(dim=1).values > 1e-12
    assert changed.sum().item() == 2


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_bank_invariants_under_random_ops(seed):
    g = torch.Generator().manual_seed(seed)
    bank = MemoryBank(8, 4, dtype=torch.float64)
    for step in range(30):
        count = int(torch.randint(1, 4, (1,), generator=g).item())
        keys = torch.randn(count, 4, generator=g)
        keys = keys / keys.norm(dim=1, keepdim=True)
        opu_enqueue(bank, keys, beta=float(torch.rand(1, generator=g).item()))
        assert bank.capacity == 8
        assert bank.filled <= 8
        norms = bank.keys[: bank.filled].norm(dim=1)
        assert (norms - 1.0).abs().max().item() <= 1e-6
        if bank.filled >= 3:
            sample_negatives(bank, 3, g)


def test_bank_clone_is_independent():
    bank = MemoryBank(4, 3, dtype=torch.float64)
    opu_enqueue(bank, random_unit_keys(2, 3, seed=8), beta=0.5)
    copy = bank.clone()
    opu_enqueue(bank, random_unit_keys(2, 3, seed=9), beta=0.5)
    assert copy.filled == 2 and bank.filled == 4


# ---------------------------------------------------------------------------
# Contrast losses
# ---------------------------------------------------------------------------

IDENTITY_AUG = AugmentParams(
    roll_max=0,
    scale_low=1.0,
    scale_high=1.0,
    jitter_sigma=0.0,
    crop_ratio_min=1.0,
    warp_factors=(1.0,),
    allow_flip=False,
)


def _orthogonal_bank(query_dim, axis, capacity):
    bank = MemoryBank(capacity, query_dim, dtype=torch.float64)
    key = torch.zeros(query_dim)
    key[axis] = 1.0
    opu_enqueue(bank, key.expand(capacity, query_dim), beta=0.5)
    return bank


def test_seasonal_contrast_loss_near_zero_oracle():
    # Identity views, momentum net == online net, and orthogonal negatives
    # give a positive logit of 1/tau against k zero logits:
    # loss = log(1 + k e^{-1/tau}).
    tau, k = 0.07, 4
    cfg = ContrastConfig(tau=tau, k_negatives=k, bank_capacity=8, beta=0.5)
    net = torch.nn.Identity()
    h = torch.zeros(1, 5, 4)
    h[0, :, 0] = 1.0  # summarize -> e_0
    bank = _orthogonal_bank(4, axis=1, capacity=8)
    loss = seasonal_contrast_loss(
        h, net, net, bank, IDENTITY_AUG, cfg, torch.Generator().manual_seed(0)
    )
    expected = math.log1p(k * math.exp(-1.0 / tau))
    assert loss.item() == pytest.approx(expected, rel=1e-9)


def test_contrast_loss_cold_bank_errors():
    cfg = ContrastConfig(tau=0.07, k_negatives=4, bank_capacity=8)
    net = torch.nn.Identity()
    h = torch.randn(2, 5, 4, generator=torch.Generator().manual_seed(10))
    bank = MemoryBank(8, 4, dtype=torch.float64)
    with pytest.raises(ValueError):
        seasonal_contrast_loss(
            h, net, net, bank, AugmentParams(), cfg, torch.Generator().manual_seed(0)
        )


def test_contrast_loss_nonnegative_and_enqueues():
    cfg = ContrastConfig(tau=0.07, k_negatives=4, bank_capacity=8, beta=0.5)
    net = torch.nn.Linear(4, 4).double()
    g = torch.Generator().manual_seed(11)
    h = torch.randn(3, 6, 4, generator=g)
    bank = MemoryBank(8, 4, dtype=torch.float64)
    opu_enqueue(bank, random_unit_keys(4, 4, seed=12), beta=0.5)
    before = bank.filled
    loss = trend_contrast_loss(h, net, net, bank, AugmentParams(), cfg, g)
    assert loss.item() >= 0
    assert bank.filled == min(8, before + 3)  # the step's keys were enqueued


# ---------------------------------------------------------------------------
# KL reconstruction
# ---------------------------------------------------------------------------


def test_kl_reconstruction_identity_and_closed_form():
    g = torch.Generator().manual_seed(13)
    h = torch.randn(2, 5, 4, generator=g)
    assert kl_reconstruction(h, h.clone()).item() == pytest.approx(0.0, abs=1e-14)

    # KL((1/2,1/2) || (2/3,1/3)) = 0.5 ln(3/4) + 0.5 ln(3/2)
    h_row = torch.tensor([[[0.0, 0.0]]])
    ht_row = torch.tensor([[[math.log(2.0), 0.0]]])
    expected = 0.5 * math.log(0.75) + 0.5 * math.log(1.5)
    assert kl_reconstruction(h_row, ht_row).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.058891, abs=1e-6)


def test_kl_reconstruction_nonnegative_and_shape_error():
    g = torch.Generator().manual_seed(14)
    for _ in range(20):
        h = torch.randn(2, 4, 5, generator=g)
        ht = torch.randn(2, 4, 5, generator=g)
        assert kl_reconstruction(h, ht).item() >= 0
    with pytest.raises(ValueError):
        kl_reconstruction(torch.randn(2, 3, 4), torch.randn(2, 4, 4))


# ---------------------------------------------------------------------------
# Combined decomposition objective
# ---------------------------------------------------------------------------


def _warm_banks(dim, capacity, k_seed):
    bank_sea = MemoryBank(capacity, dim, dtype=torch.float64)
    bank_tre = MemoryBank(capacity, dim, dtype=torch.float64)
    opu_enqueue(bank_sea, random_unit_keys(capacity, dim, seed=k_seed), beta=0.5)
    opu_enqueue(bank_tre, random_unit_keys(capacity, dim, seed=k_seed + 1), beta=0.5)
    return bank_sea, bank_tre


def test_decomposition_loss_additivity_and_gradients():
    torch.manual_seed(15)
    d = 4
    sdg = torch.nn.Linear(d, d).double()
    tdg = torch.nn.Linear(d, d).double()
    recon = torch.nn.Linear(2 * d, d).double()
    cfg = ContrastConfig(tau=0.07, k_negatives=4, bank_capacity=8, beta=0.5)
    g = torch.Generator().manual_seed(16)
    h = torch.randn(2, 6, d, generator=g)
    h_tilde = recon(torch.cat([sdg(h), tdg(h)], dim=-1))

    bank_sea, bank_tre = _warm_banks(d, 8, k_seed=17)
    snap_sea, snap_tre = bank_sea.clone(), bank_tre.clone()
    gen = torch.Generator().manual_seed(18)
    total, parts = decomposition_loss(
        h, h_tilde, sdg, sdg, tdg, tdg, bank_sea, bank_tre, AugmentParams(), cfg, gen
    )
    assert total.item() == pytest.approx(
        (parts["seasonal"] + parts["trend"] + parts["kl"]).item(), abs=1e-12
    )

    # independently recomputed parts agree (same bank state, same seed)
    gen2 = torch.Generator().manual_seed(18)
    sea2 = seasonal_contrast_loss(
        h, sdg, sdg, snap_sea, AugmentParams(), cfg, gen2
    )
    assert sea2.item() == pytest.approx(parts["seasonal"].item(), abs=1e-12)

    total.backward()
    for mod in (sdg, tdg, recon):
        assert any(
            p.grad is not None and p.grad.abs().max() > 0 for p in mod.parameters()
        )
