import numpy as np
import pytest
import torch

from ilora.backbones import UNetBackbone
from ilora.intrinsics import IntrinsicKind
from ilora.lora import (
    SELECTORS,
    AdaptableLinear,
    LoraError,
    adapted_forward,
    attach_adapters,
    detach_adapters,
    inject,
    load_adapters,
    make_adapter,
    merge,
    param_fraction,
    save_adapters,
)


def small_backbone():
    return UNetBackbone(resolution=32, base_channels=8, cond_dim=16, init_seed=0)


def test_zero_init_is_identity():
    a = make_adapter("w", d1=5, d2=7, rank=2, seed=3)
    w = torch.randn(5, 7, generator=torch.Generator().manual_seed(0))
    x = torch.randn(11, 7, generator=torch.Generator().manual_seed(1))
    assert torch.equal(adapted_forward(w, a, x), adapted_forward(w, None, x))
    assert torch.all(a.w_u == 0)


def test_param_count_formula():
    a = make_adapter("w", d1=4, d2=6, rank=2, seed=0)
    assert a.n_params == 2 * (4 + 6) == 20
    assert sum(p.numel() for p in a.parameters()) == 20


def test_hand_worked_delta():
    # W_l = [[1, 0], [0, 1]], W_u = [[1, 2], [0, 1]], a = (1, 1):
    # delta = W_u @ (W_l @ a) = W_u @ (1, 1) = (3, 1)
    a = make_adapter("w", d1=2, d2=2, rank=2, seed=0)
    with torch.no_grad():
        a.w_l.copy_(torch.eye(2))
        a.w_u.copy_(torch.tensor([[1.0, 2.0], [0.0, 1.0]]))
    w = torch.zeros(2, 2)
    out = adapted_forward(w, a, torch.tensor([1.0, 1.0]))
    assert torch.equal(out, torch.tensor([3.0, 1.0]))


def test_full_rank_adapter_can_express_any_delta():
    # at rank = min(d1, d2) the factorization spans every dense delta
    d1, d2 = 4, 6
    target = torch.randn(d1, d2, generator=torch.Generator().manual_seed(5))
    a = make_adapter("w", d1, d2, rank=4, seed=0)
    opt = torch.optim.Adam(a.parameters(), lr=5e-2)
    for _ in range(800):
        loss = (a.dense_delta() - target).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 1e-6


def test_rank_out_of_range_rejected():
    with pytest.raises(LoraError):
        make_adapter("w", 4, 6, rank=5, seed=0)
    with pytest.raises(LoraError):
        make_adapter("w", 4, 6, rank=0, seed=0)


def test_shape_mismatch_rejected():
    a = make_adapter("w", 4, 6, rank=2, seed=0)
    with pytest.raises(LoraError):
        adapted_forward(torch.zeros(4, 5), a, torch.zeros(5))


def test_adaptable_linear_keeps_adapter_out_of_state_dict():
    lin = AdaptableLinear(6, 4)
    lin.adapter = make_adapter("w", 4, 6, rank=2, seed=0)
    assert set(lin.state_dict()) == {"inner.weight", "inner.bias"}
    assert sum(p.numel() for p in lin.parameters()) == 4 * 6 + 4


def test_inject_identity_and_param_fraction():
    bb = small_backbone()
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    t = torch.ones(2, dtype=torch.long)
    tok = torch.zeros(2, dtype=torch.long)
    with torch.no_grad():
        before = bb(x, t, tok)
    aset = inject(bb, "all_attn", rank=2, seed=0, kind=IntrinsicKind.NORMAL)
    with torch.no_grad():
        after = bb(x, t, tok)
    assert torch.abs(after - before).max().item() <= 1e-6
    expect = sum(a.rank * (a.d1 + a.d2) for a in aset.adapters.values())
    assert aset.n_params == expect
    assert 0 < param_fraction(aset, bb) < 0.2


def test_selector_partition_covers_all_attention():
    bb = small_backbone()
    all_attn = set(bb.select_targets("all_attn"))
    cross = set(bb.select_targets("cross_only"))
    self_ = set(bb.select_targets("self_only"))
    assert cross | self_ == all_attn
    assert not (cross & self_)
    by_depth = [set(bb.select_targets(s)) for s in ("up_blocks", "mid_block", "down_blocks")]
    assert set.union(*by_depth) == all_attn
    for i in range(3):
        for j in range(i + 1, 3):
            assert not (by_depth[i] & by_depth[j])


def test_unknown_selector_rejected():
    bb = small_backbone()
    with pytest.raises(LoraError):
        inject(bb, "everything", 2, 0, IntrinsicKind.NORMAL)
    assert "everything" not in SELECTORS


def test_merge_matches_adapted_forward():
    bb = small_backbone()
    aset = inject(bb, "all_attn", rank=2, seed=0, kind=IntrinsicKind.DEPTH)
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for a in aset.adapters.values():
            a.w_u.copy_(torch.randn(a.d1, a.rank, generator=gen) * 0.1)
    x = torch.randn(2, 3, 32, 32, generator=gen)
    t = torch.ones(2, dtype=torch.long)
    tok = torch.full((2,), 2, dtype=torch.long)
    with torch.no_grad():
        adapted = bb(x, t, tok)
    merged = merge(aset, bb)
    with torch.no_grad():
        baked = merged(x, t, tok)
    assert torch.abs(baked - adapted).max().item() <= 1e-5
    with pytest.raises(LoraError):
        merge(aset, bb)  # a set merges at most once


def test_save_load_round_trip(tmp_path):
    bb = small_backbone()
    aset = inject(bb, "all_attn", rank=3, seed=4, kind=IntrinsicKind.ALBEDO)
    gen = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for a in aset.adapters.values():
            a.w_u.copy_(torch.randn(a.d1, a.rank, generator=gen))
    path = tmp_path / "a.ilra"
    save_adapters(aset, path)
    loaded = load_adapters(path)
    assert loaded.kind is IntrinsicKind.ALBEDO
    assert loaded.selector == "all_attn"
    assert loaded.backbone_fingerprint == aset.backbone_fingerprint
    assert set(loaded.adapters) == set(aset.adapters)
    for name, a in aset.adapters.items():
        assert torch.equal(loaded.adapters[name].w_u, a.w_u)
        assert torch.equal(loaded.adapters[name].w_l, a.w_l)
    assert loaded.state_bytes() == aset.state_bytes()


def test_load_verifies_fingerprint(tmp_path):
    bb = small_backbone()
    aset = inject(bb, "all_attn", rank=2, seed=0, kind=IntrinsicKind.NORMAL)
    path = tmp_path / "a.ilra"
    save_adapters(aset, path)
    detach_adapters(bb)
    load_adapters(path, bb)  # same weights: fine
    other = UNetBackbone(resolution=32, base_channels=8, cond_dim=16, init_seed=1)
    with pytest.raises(LoraError):
        load_adapters(path, other)


def test_truncated_and_corrupt_files_rejected(tmp_path):
    bb = small_backbone()
    aset = inject(bb, "all_attn", rank=2, seed=0, kind=IntrinsicKind.NORMAL)
    path = tmp_path / "a.ilra"
    save_adapters(aset, path)
    blob = path.read_bytes()
    for cut in (0, 3, 20, 41, len(blob) - 5):
        bad = tmp_path / "bad.ilra"
        bad.write_bytes(blob[:cut])
        with pytest.raises(LoraError):
            load_adapters(bad)
    bad = tmp_path / "magic.ilra"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(LoraError):
        load_adapters(bad)


def test_attach_requires_matching_fingerprint(tmp_path):
    bb = small_backbone()
    aset = inject(bb, "all_attn", rank=2, seed=0, kind=IntrinsicKind.NORMAL)
    other = UNetBackbone(resolution=32, base_channels=8, cond_dim=16, init_seed=7)
    with pytest.raises(LoraError):
        attach_adapters(other, aset)


def test_w_l_init_is_seeded_and_scaled():
    a1 = make_adapter("w", 8, 64, rank=4, seed=5)
    a2 = make_adapter("w", 8, 64, rank=4, seed=5)
    a3 = make_adapter("w", 8, 64, rank=4, seed=6)
    assert torch.equal(a1.w_l, a2.w_l)
    assert not torch.equal(a1.w_l, a3.w_l)
    # std close to 1/sqrt(d2)
    assert abs(a1.w_l.std().item() - 1 / 8) < 0.05
