"""Diagnostics: analytic FLOPs, throughput bench, mask quality metrics,
cost-landscape scans, and background-update PCA."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsewm import evalsuite as ev
from sparsewm import worldmodel as wm


def _cfg(**kw):
    base = dict(n_tokens=64, dim=64, heads=4, loc_layers=3, loc_width=48,
                loc_heads=4, pred_layers=4, dense_layers=4, k_min=8, history=3)
    base.update(kw)
    return wm.ModelConfig(**base)


# -- FLOPs ----------------------------------------------------------------


def test_matmul_flops_closed_form():
    assert ev.matmul_flops(2, 3, 4) == 48


def test_flops_additivity_full_vs_naive():
    cfg = _cfg()
    for k in (8, 16, 32):
        full = ev.flops_count(cfg, "full", k)
        naive = ev.flops_count(cfg, "naive_sparse", k)
        lrm = full.stages["lrm"]
        assert full.total == naive.total + lrm


def test_flops_dense_reduction_factor_exceeds_3x():
    cfg = _cfg()
    dense = ev.flops_count(cfg, "dense", 8).total
    full = ev.flops_count(cfg, "full", 8).total
    assert dense / full > 3.0


def test_flops_predictor_quadratic_in_k_batch():
    # self-attention inside the predictor runs over exactly k_batch + 1
    # tokens: the score term must scale quadratically in k_batch
    cfg = _cfg()

    def pred(k):
        return ev.flops_count(cfg, "naive_sparse", k).stages["predictor"]

    # second difference of a quadratic-plus-linear function is constant
    d2 = [pred(k + 2) - 2 * pred(k + 1) + pred(k) for k in (8, 16, 24)]
    assert d2[0] == d2[1] == d2[2]
    assert d2[0] > 0
    # and matches the analytic score coefficient
    layer_quad = cfg.pred_layers * ev.attention_score_flops(1, cfg.dim)
    assert d2[0] == 2 * layer_quad


def test_flops_rejects_unknown_variant():
    with pytest.raises(ValueError):
        ev.flops_count(_cfg(), "hybrid", 8)


def test_flops_count_matches_manual_formula():
    cfg = _cfg()
    n, d, w = 64, 64, 48
    out = ev.flops_count(cfg, "full", 8)
    assert out.stages["fusion"] == ev.cross_attention_flops(64, 128, 64)
    assert out.stages["lrm"] == ev.cross_attention_flops(64 - 8, 8, 64, out_rank=8)
    manual_loc = (ev.matmul_flops(65, d, w)
                  + 3 * ev.vit_layer_flops(65, w, cfg.mlp_ratio)
                  + ev.matmul_flops(65, w, 4) + ev.matmul_flops(1, 2, d))
    assert out.stages["localizer"] == manual_loc


# -- throughput -----------------------------------------------------------


def test_throughput_bench_report_shape():
    cfg = _cfg(pred_layers=1, loc_layers=1, dense_layers=1)
    params = wm.init_world_model(cfg, seed=0)
    rep = ev.throughput_bench((params, "naive_sparse", None), 64, 64,
                              batch=4, repetitions=3, warmup=1)
    assert rep["variant"] == "naive_sparse"
    assert rep["batch"] == 4
    assert rep["steps_per_second"] > 0
    assert rep["hardware"]


def test_throughput_bench_supports_batch_1():
    cfg = _cfg(pred_layers=1, loc_layers=1, dense_layers=1)
    params = wm.init_world_model(cfg, seed=0)
    rep = ev.throughput_bench((params, "full", None), 64, 64,
                              batch=1, repetitions=2, warmup=0)
    assert rep["batch"] == 1


# -- mask metrics ---------------------------------------------------------


def test_mask_metrics_perfect():
    t = np.array([[1, 0, 1, 0]], dtype=np.uint8)
    m = ev.mask_metrics(t, t)
    assert m == (1.0, 1.0, 1.0)


def test_mask_metrics_all_ones_vs_half():
    truth = np.array([1, 1, 0, 0], dtype=np.uint8)
    m = ev.mask_metrics(np.ones(4, dtype=np.uint8), truth)
    assert m.precision == 0.5
    assert m.recall == 1.0
    assert m.iou == 0.5


def test_mask_metrics_empty_degenerate():
    z = np.zeros(6, dtype=np.uint8)
    assert ev.mask_metrics(z, z) == (1.0, 1.0, 1.0)


def test_mask_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        ev.mask_metrics(np.zeros(3), np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_metrics_set_arithmetic_oracle(seed):
    r = np.random.default_rng(seed)
    pred = r.random(40) > 0.5
    truth = r.random(40) > 0.5
    p_set = set(np.flatnonzero(pred))
    t_set = set(np.flatnonzero(truth))
    m = ev.mask_metrics(pred, truth)
    inter, union = len(p_set & t_set), len(p_set | t_set)
    assert m.iou == (inter / union if union else 1.0)
    assert m.precision == (inter / len(p_set) if p_set else 1.0)
    assert m.recall == (inter / len(t_set) if t_set else 1.0)


# -- landscape scans ------------------------------------------------------


def _quadratic_rollout(a_ref):
    def rollout_fn(actions):
        c = ((actions[:, -1] - a_ref) ** 2).sum(axis=-1)
        z = np.zeros((len(actions), 2, 2))
        z[:, 0, 0] = np.sqrt(c * 4)
        return z
    return rollout_fn


def test_landscape_center_reproduces_unperturbed_cost():
    rollout_fn = _quadratic_rollout(np.array([0.15, -0.2]))
    base = np.zeros((3, 2))
    scan = ev.landscape_scan(None, None, None, base, np.eye(2), 0.4, 5,
                             np.ones(2, dtype=np.uint8), np.zeros((2, 2)),
                             rollout_fn=rollout_fn)
    center = scan.costs[2, 2]
    direct = float(((base[-1] - np.array([0.15, -0.2])) ** 2).sum())
    assert np.isclose(center, direct, rtol=1e-12)


def test_landscape_quadratic_oracle_smooth():
    rollout_fn = _quadratic_rollout(np.zeros(2))
    scan = ev.landscape_scan(None, None, None, np.zeros((3, 2)), np.eye(2),
                             0.3, 9, np.ones(2, dtype=np.uint8),
                             np.zeros((2, 2)), rollout_fn=rollout_fn)
    # exactly quadratic in the perturbation: constant second difference;
    # the range-normalized roughness is O(1/grid^2), vanishing under
    # refinement
    d2 = np.diff(scan.costs, n=2, axis=0)
    assert np.allclose(d2, d2[0:1], atol=1e-10)
    assert scan.roughness < 0.1
    finer = ev.landscape_scan(None, None, None, np.zeros((3, 2)), np.eye(2),
                              0.3, 33, np.ones(2, dtype=np.uint8),
                              np.zeros((2, 2)), rollout_fn=rollout_fn)
    assert finer.roughness < 0.3 * scan.roughness


def test_landscape_1d_axis():
    rollout_fn = _quadratic_rollout(np.zeros(2))
    scan = ev.landscape_scan(None, None, None, np.zeros((2, 2)),
                             np.array([[1.0, 0.0]]), 0.5, 7,
                             np.ones(2, dtype=np.uint8), np.zeros((2, 2)),
                             rollout_fn=rollout_fn)
    assert scan.costs.shape == (7,)
    assert scan.costs[0] > scan.costs[3]


def test_landscape_validates_inputs():
    rollout_fn = _quadratic_rollout(np.zeros(2))
    with pytest.raises(ValueError):
        ev.landscape_scan(None, None, None, np.zeros((2, 2)), np.eye(2), 0.5, 4,
                          np.ones(2, dtype=np.uint8), np.zeros((2, 2)),
                          rollout_fn=rollout_fn)
    with pytest.raises(ValueError):
        ev.landscape_scan(None, None, None, np.zeros((2, 2)),
                          np.array([[1.0, 0.0], [1.0, 0.0]]), 0.5, 5,
                          np.ones(2, dtype=np.uint8), np.zeros((2, 2)),
                          rollout_fn=rollout_fn)


def test_roughness_zero_on_flat_grid():
    assert ev._roughness(np.ones((5, 5))) == 0.0


# -- PCA ------------------------------------------------------------------


def test_pca_rank_one_deltas():
    rng = np.random.default_rng(0)
    direction = rng.normal(size=8)
    deltas = np.outer(rng.normal(size=200), direction)
    rep = ev._pca_report(deltas)
    assert rep.cumulative[0] > 1.0 - 1e-9
    assert rep.rank90 == 1


def test_pca_curve_monotone_normalized(rng):
    rep = ev._pca_report(rng.normal(size=(300, 12)))
    cum = np.asarray(rep.cumulative)
    assert np.all(np.diff(cum) >= -1e-12)
    assert abs(cum[-1] - 1.0) < 1e-6
    assert 1 <= rep.rank90 <= rep.rank99 <= 12


def test_pca_background_updates_requires_model_for_lrm(tiny_windows):
    with pytest.raises(ValueError):
        ev.pca_background_updates(tiny_windows, "lrm", params=None)
    with pytest.raises(ValueError):
        ev.pca_background_updates(tiny_windows, "average")


def test_pca_ground_truth_low_rank(tiny_windows):
    # visually static patches only move through the rank-limited mixing
    # projection, so their update subspace is at most D/8-dimensional
    rep = ev.pca_background_updates(tiny_windows, "ground_truth")
    assert rep.rank90 <= 8


# -- pixel error protocol -------------------------------------------------


def test_pixel_error_requires_frozen_decoder(tiny_windows, encoder):
    from sparsewm.encoder import DecoderParams
    dec = DecoderParams(w=np.zeros((64, 192), dtype=np.float32),
                        b=np.zeros(192, dtype=np.float32), patch=8,
                        image_hw=64, frozen=False)
    with pytest.raises(RuntimeError):
        ev.pixel_error(tiny_windows, "oracle", dec, steps=2, episodes=4)


def test_pixel_error_oracle_counts_decoder_noise_only(tiny_windows, encoder):
    from sparsewm import training as tr
    records = tr.collect_dataset("pointmaze", 6, 8, seed=3)
    dec, _ = tr.train_decoder(records, encoder)
    err_oracle = ev.pixel_error(tiny_windows, "oracle", dec, steps=3, episodes=10, seed=0)
    # untrained model must not beat ground-truth latents
    params = wm.init_world_model(wm.ModelConfig(), seed=1)
    err_model = ev.pixel_error(tiny_windows, (params, "full", None), dec,
                               steps=3, episodes=10, seed=0)
    assert 0 <= err_oracle <= 64 * 64
    assert err_model >= err_oracle
