import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqpf.errors import DataError, NumericalError
from sqpf.prototypes import (
    HardSelection,
    ProbabilityMask,
    Prototype,
    SQPFConfig,
    background_prototype,
    coarse_query_mask,
    final_prediction,
    foreground_threshold,
    fuse_prototypes,
    hard_select,
    masked_average_pool,
    partition_foreground,
    query_prototype,
    sqpf_forward,
    support_prototype,
)

from oracles import map_loop, two_way_softmax_loop

T = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731


def fg_proto(v):
    return Prototype(T(v), "support_fg")


def bg_proto(v):
    return Prototype(T(v), "support_bg")


# ---------------------------------------------------------------------------
# masked average pooling


def test_map_constant_features():
    F = torch.full((3, 5, 5), 2.5, dtype=torch.float64)
    F[1] = -1.0
    u = torch.rand(5, 5, dtype=torch.float64) + 0.1
    assert torch.allclose(masked_average_pool(F, u), T([2.5, -1.0, 2.5]))


def test_map_hand_example():
    F = T([[[1, 2], [3, 4]]])
    u = T([[1, 0], [0, 1]])
    assert masked_average_pool(F, u).item() == pytest.approx(2.5)


def test_map_zero_mask_raises():
    with pytest.raises(NumericalError):
        masked_average_pool(torch.ones(2, 3, 3), torch.zeros(3, 3))


def test_map_shape_mismatch():
    with pytest.raises(DataError):
        masked_average_pool(torch.ones(2, 3, 3), torch.ones(4, 4))


grids = st.tuples(st.integers(1, 4), st.integers(1, 8), st.integers(1, 8)).flatmap(
    lambda s: st.tuples(
        arrays(np.float64, s, elements=st.floats(-10, 10)),
        arrays(np.int8, s[1:], elements=st.integers(0, 1)).filter(lambda m: m.any()),
    )
)


@given(grids)
@settings(max_examples=200, deadline=None)
def test_map_matches_loop_oracle(pair):
    F, m = pair
    got = masked_average_pool(T(F), T(m.astype(float))).numpy()
    np.testing.assert_allclose(got, map_loop(F, m), atol=1e-6)


# ---------------------------------------------------------------------------
# partition and support prototype


def test_partition_single_region_is_identity():
    m = (torch.rand(9, 7) > 0.5).double()
    m[0, 0] = 1
    part = partition_foreground(m, 1)
    assert len(part) == 1 and torch.equal(part.regions[0], m)


def test_partition_centered_square_quadrants():
    m = torch.zeros(64, 64, dtype=torch.float64)
    m[16:48, 16:48] = 1
    part = partition_foreground(m, 4)
    expected = []
    for r0 in (16, 32):
        for c0 in (16, 32):
            q = torch.zeros_like(m)
            q[r0 : r0 + 16, c0 : c0 + 16] = 1
            expected.append(q)
    assert len(part) == 4
    for got, want in zip(part.regions, expected):
        assert torch.equal(got, want)
    assert torch.equal(sum(part.regions), m)


def test_partition_empty_mask_raises():
    with pytest.raises(DataError):
        partition_foreground(torch.zeros(8, 8), 4)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 9, 16])
def test_partition_count_bounded(n):
    m = torch.ones(12, 12)
    assert 1 <= len(partition_foreground(m, n)) <= n


@given(
    arrays(np.float64, (10, 10), elements=st.floats(0, 1)).filter(lambda m: (m > 0).any()),
    st.integers(1, 16),
)
@settings(max_examples=150, deadline=None)
def test_partition_sums_to_mask(m, n):
    part = partition_foreground(T(m), n)
    assert len(part) <= n
    assert all(float(r.sum()) > 0 for r in part.regions)
    np.testing.assert_allclose(sum(part.regions).numpy(), m, atol=1e-6)


def test_support_prototype_single_region_equals_map():
    F = torch.randn(4, 8, 8, dtype=torch.float64)
    m = (torch.rand(8, 8) > 0.4).double()
    m[3, 3] = 1
    p = support_prototype(F, partition_foreground(m, 1))
    assert torch.equal(p.vector, masked_average_pool(F, m))
    assert p.role == "support_fg"


def test_support_prototype_mean_of_regions():
    F = T([[[1, 3]]])
    m = T([[1, 1]])
    part = partition_foreground(m, 2)
    assert len(part) == 2
    assert support_prototype(F, part).vector.tolist() == [2.0]


def test_support_prototype_constant_features():
    F = torch.full((2, 6, 6), 3.0)
    m = torch.ones(6, 6)
    assert torch.allclose(support_prototype(F, partition_foreground(m, 4)).vector, torch.tensor([3.0, 3.0]))


def test_background_prototype():
    F = T([[[1, 2], [3, 4]]])
    assert background_prototype(F, T([[1, 0], [0, 1]])).vector.item() == pytest.approx(2.5)
    G = torch.randn(3, 4, 4, dtype=torch.float64)
    assert torch.allclose(background_prototype(G, torch.zeros(4, 4, dtype=torch.float64)).vector, G.mean(dim=(1, 2)))
    with pytest.raises(DataError):
        background_prototype(G, torch.ones(4, 4))


# ---------------------------------------------------------------------------
# coarse mask, threshold, selection


def test_coarse_equal_prototypes_is_half():
    F = torch.randn(3, 5, 5, dtype=torch.float64)
    v = torch.randn(3, dtype=torch.float64)
    pm = coarse_query_mask(F, Prototype(v, "support_fg"), Prototype(v, "support_bg"))
    assert torch.all(pm.fg == 0.5)


def test_coarse_parallel_orthogonal_closed_form():
    F = T([[[1.0]], [[0.0]]])
    pm = coarse_query_mask(F, fg_proto([2.0, 0.0]), bg_proto([0.0, 1.0]), temperature=20)
    assert pm.fg.item() == pytest.approx(1 / (1 + math.exp(-20)), abs=1e-12)


@given(st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_coarse_feature_scale_invariance(a):
    g = torch.Generator().manual_seed(0)
    F = torch.randn(4, 6, 6, generator=g, dtype=torch.float64)
    pf, pb = fg_proto(torch.randn(4, generator=g).tolist()), bg_proto(torch.randn(4, generator=g).tolist())
    base = coarse_query_mask(F, pf, pb)
    scaled = coarse_query_mask(a * F, pf, pb)
    assert torch.allclose(base.fg, scaled.fg, atol=1e-9)


def test_coarse_matches_closed_form_oracle():
    rng = np.random.default_rng(3)
    F = rng.normal(size=(3, 4, 5))
    pf, pb = rng.normal(size=3), rng.normal(size=3)
    got = coarse_query_mask(T(F), fg_proto(pf.tolist()), bg_proto(pb.tolist()), 7.0)
    np.testing.assert_allclose(got.fg.numpy(), two_way_softmax_loop(F, pf, pb, 7.0), atol=1e-12)
    assert torch.equal(got.bg, 1 - got.fg)


def test_coarse_rejects_zero_pixel():
    F = torch.randn(2, 3, 3, dtype=torch.float64)
    F[:, 1, 1] = 0
    with pytest.raises(NumericalError):
        coarse_query_mask(F, fg_proto([1, 0]), bg_proto([0, 1]))


def test_coarse_rejects_bad_temperature():
    with pytest.raises(ValueError):
        coarse_query_mask(torch.ones(2, 2, 2), fg_proto([1, 0]), bg_proto([0, 1]), temperature=0)


def test_threshold_examples():
    assert foreground_threshold(torch.full((4, 4), 0.5)) == pytest.approx(0.5)
    g = torch.zeros(10)
    g[0], g[1] = 1.0, 1.0  # max 1.0, mean 0.2
    assert foreground_threshold(g.reshape(2, 5)) == pytest.approx(0.6)
    assert foreground_threshold(T([[0.0, 1.0]])) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        foreground_threshold(torch.zeros(0, 3))


@given(arrays(np.float64, (6, 7), elements=st.floats(0, 1)))
def test_threshold_between_mean_and_max(g):
    t = foreground_threshold(T(g))
    assert g.mean() - 1e-12 <= t <= g.max() + 1e-12


def pm_of(fg):
    fg = T(fg)
    return ProbabilityMask(fg=fg, bg=1 - fg)


def test_hard_select_examples():
    sel = hard_select(pm_of([[0.9, 0.3]]), t_f=0.6, t_b=0.5)
    assert sel.fg.tolist() == [[1.0, 0.0]]
    assert sel.bg.tolist() == [[0.0, 1.0]]
    inclusive = hard_select(pm_of([[0.5, 0.5]]), t_f=0.5)
    assert inclusive.fg.tolist() == [[1.0, 1.0]]
    assert inclusive.t_b == 0.5


def test_hard_select_bounds():
    with pytest.raises(ValueError):
        hard_select(pm_of([[0.5]]), t_f=1.5)


def test_hard_select_detached():
    fg = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    sel = hard_select(ProbabilityMask(fg=fg, bg=1 - fg), 0.4)
    assert not sel.fg.requires_grad and not sel.bg.requires_grad


# ---------------------------------------------------------------------------
# query prototype and fusion


def test_query_prototype_full_and_single_pixel():
    F = T([[[1, 2], [3, 4]]])
    full = HardSelection(fg=torch.ones(2, 2, dtype=torch.float64), bg=torch.zeros(2, 2, dtype=torch.float64), t_f=0.5, t_b=0.5)
    q_fg, q_bg = query_prototype(F, full)
    assert q_fg.vector.item() == pytest.approx(2.5) and q_bg is None
    one = HardSelection(fg=T([[0, 0], [0, 1]]), bg=T([[1, 1], [1, 0]]), t_f=0.5, t_b=0.5)
    q_fg, q_bg = query_prototype(F, one)
    assert q_fg.vector.item() == pytest.approx(4.0)
    assert q_fg.role == "query_fg" and q_bg.role == "query_bg"


def test_query_prototype_empty_signals_fallback():
    sel = HardSelection(fg=torch.zeros(2, 2), bg=torch.ones(2, 2), t_f=0.9, t_b=0.5)
    q_fg, q_bg = query_prototype(torch.ones(3, 2, 2), sel)
    assert q_fg is None and q_bg is not None


def test_fuse_examples():
    p_s, p_q = fg_proto([2.0]), Prototype(T([4.0]), "query_fg")
    assert torch.equal(fuse_prototypes(p_s, p_q, 1.0, 0.0).vector, p_s.vector)
    fused = fuse_prototypes(p_s, p_q, 0.5, 0.5)
    assert fused.vector.tolist() == [3.0] and fused.role == "fused_fg"


def test_fuse_errors():
    with pytest.raises(DataError):
        fuse_prototypes(fg_proto([1.0, 2.0]), Prototype(T([1.0]), "query_fg"), 0.5, 0.5)
    with pytest.raises(ValueError):
        fuse_prototypes(fg_proto([1.0]), Prototype(T([1.0]), "query_bg"), 0.5, 0.5)


def test_final_prediction_symmetry_and_normalization():
    F = torch.randn(3, 4, 4, dtype=torch.float64)
    v = Prototype(T([1.0, 2.0, 3.0]), "fused_fg")
    w = Prototype(T([1.0, 2.0, 3.0]), "fused_bg")
    assert torch.all(final_prediction(F, v, w).fg == 0.5)
    u = Prototype(torch.randn(3, dtype=torch.float64), "fused_bg")
    pm = final_prediction(F, v, u)
    assert torch.allclose(pm.fg + pm.bg, torch.ones_like(pm.fg), atol=1e-12)


# ---------------------------------------------------------------------------
# pipeline


def random_support(seed, C=4, H=8, W=8):
    g = torch.Generator().manual_seed(seed)
    F_s = torch.randn(C, H, W, generator=g, dtype=torch.float64)
    F_q = torch.randn(C, H, W, generator=g, dtype=torch.float64)
    m = torch.zeros(H, W, dtype=torch.float64)
    m[2:6, 1:7] = torch.rand(4, 6, generator=g, dtype=torch.float64) * 0.9 + 0.1
    return F_s, m, F_q


def test_forward_alpha_one_is_coarse():
    F_s, m, F_q = random_support(0)
    out = sqpf_forward([(F_s, m)], F_q, SQPFConfig(alpha=1.0, beta=0.0))
    assert torch.equal(out.final.fg, out.coarse.fg)
    assert torch.equal(out.coarse.bg, 1 - out.coarse.fg)


def test_forward_alpha_zero_depends_only_on_query_prototype():
    F_s, m, F_q = random_support(1)
    out = sqpf_forward([(F_s, m)], F_q, SQPFConfig(alpha=0.0))
    q_fg, q_bg = query_prototype(F_q, out.selection)
    expected = final_prediction(F_q, Prototype(q_fg.vector, "fused_fg"), Prototype(q_bg.vector, "fused_bg"))
    assert torch.allclose(out.final.fg, expected.fg, atol=1e-12)


def test_forward_diagnostics_and_kshot():
    F_s, m, F_q = random_support(2)
    F_s2, m2, _ = random_support(3)
    out = sqpf_forward([(F_s, m), (F_s2, m2)], F_q, SQPFConfig(n_regions=4))
    d = out.diagnostics
    assert set(d) >= {"T_f", "selected_fg", "selected_bg", "fg_fallback", "bg_fallback"}
    assert d["selected_fg"] >= 1 and not d["fg_fallback"]
    assert len(d["n_regions"]) == 2


@pytest.mark.parametrize("q", [1.0, 3.0])
def test_forward_orthogonal_background_query(q):
    # support fg pixels are e1, bg pixels e2; every query pixel is q * e2.
    F_s = torch.zeros(2, 4, 4, dtype=torch.float64)
    m = torch.zeros(4, 4, dtype=torch.float64)
    m[:2] = 1
    F_s[0, :2] = 1.0
    F_s[1, 2:] = 1.0
    F_q = torch.zeros(2, 4, 4, dtype=torch.float64)
    F_q[1] = q
    out = sqpf_forward([(F_s, m)], F_q, SQPFConfig(alpha=0.5))
    coarse = 1 / (1 + math.exp(20))
    assert torch.allclose(out.coarse.fg, torch.full((4, 4), coarse, dtype=torch.float64))
    # T_f always keeps the max pixel, so p_q = q*e2 on both sides:
    # fused fg = 0.5 e1 + 0.5 q e2 (cos = 0.5q / |.|), fused bg is parallel to e2.
    cos_fg = 0.5 * q / math.hypot(0.5, 0.5 * q)
    final = 1 / (1 + math.exp(20 * (1 - cos_fg)))
    assert torch.allclose(out.final.fg, torch.full((4, 4), final, dtype=torch.float64))
    if q == 1.0:
        assert final < 3e-3


def test_forward_fallback_when_no_foreground_selected():
    F_s, m, F_q = random_support(4)
    empty = HardSelection(fg=torch.zeros(8, 8, dtype=torch.float64), bg=torch.ones(8, 8, dtype=torch.float64), t_f=1.0, t_b=0.5)
    out = sqpf_forward([(F_s, m)], F_q, SQPFConfig(), selection=empty)
    assert out.diagnostics["fg_fallback"]
    assert out.final is out.coarse


@given(st.integers(0, 10_000), st.sampled_from([1e-3, 1.0, 1e3]))
@settings(max_examples=60, deadline=None)
def test_forward_joint_scale_invariance(seed, a):
    F_s, m, F_q = random_support(seed)
    cfg = SQPFConfig(alpha=0.5)
    base = sqpf_forward([(F_s, m)], F_q, cfg)
    scaled = sqpf_forward([(a * F_s, m)], a * F_q, cfg)
    assert torch.allclose(base.coarse.fg, scaled.coarse.fg, atol=1e-6)
    assert torch.allclose(base.final.fg, scaled.final.fg, atol=1e-6)
