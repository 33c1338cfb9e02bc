import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats
from skimage.metrics import structural_similarity

from fedcrfd.metrics import (
    betainc,
    evaluate,
    latent_gaps,
    latent_projection,
    paired_t_test,
    psnr,
    ssim,
    write_projection_csv,
)


def test_psnr_examples(rng):
    assert psnr(np.ones((4, 4)), np.zeros((4, 4)), 255.0) == pytest.approx(48.1308, abs=1e-3)
    assert psnr(np.ones((4, 4)), np.zeros((4, 4)), 255.0) == pytest.approx(20 * math.log10(255), rel=1e-12)
    img = rng.random((8, 8))
    assert psnr(img, img, 1.0) == math.inf
    with pytest.raises(ValueError):
        psnr(img, img[:4], 1.0)


def test_psnr_decreases_with_noise(rng):
    y = rng.random((32, 32))
    low = psnr(y + rng.normal(0, 0.01, y.shape), y, 1.0)
    high = psnr(y + rng.normal(0, 0.1, y.shape), y, 1.0)
    assert low > high


def test_ssim_identity(rng):
    x = rng.random((32, 32))
    assert abs(ssim(x, x, 1.0) - 1.0) <= 1e-9


def test_ssim_anticorrelated_binary(rng):
    x = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(x, 1 - x, 1.0) < 0


def test_ssim_matches_reference(rng):
    for _ in range(10):
        gt = rng.random((40, 48))
        pred = np.clip(gt + rng.normal(0, rng.uniform(0.01, 0.3), gt.shape), 0, 1)
        ref = structural_similarity(pred, gt, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert abs(ssim(pred, gt, 1.0) - ref) < 1e-6


def test_ssim_errors(rng):
    with pytest.raises(ValueError, match="smaller"):
        ssim(rng.random((8, 8)), rng.random((8, 8)), 1.0)
    with pytest.raises(ValueError):
        ssim(rng.random((2, 16, 16)), rng.random((2, 16, 16)), 1.0)


@given(st.floats(0.1, 30), st.floats(0.1, 30), st.floats(0.0, 1.0))
def test_betainc_matches_scipy(a, b, x):
    assert abs(betainc(a, b, x) - special.betainc(a, b, x)) < 1e-10


def test_t_test_example():
    res = paired_t_test([1, 2, 3], [0, 0, 0])
    assert res.t == pytest.approx(3.4641, abs=1e-4)
    oracle = 2 * stats.t.sf(res.t, df=2)
    assert abs(res.p - oracle) < 1e-3
    assert abs(res.p - 0.0742) < 1e-3


def test_t_test_degenerate_cases():
    assert paired_t_test([1, 2, 3], [1, 2, 3]) == paired_t_test([1, 2, 3], [1, 2, 3])
    same = paired_t_test([1, 2, 3], [1, 2, 3])
    assert (same.t, same.p, same.degenerate) == (0.0, 1.0, True)
    shifted = paired_t_test([2, 3, 4], [1, 2, 3])
    assert shifted.p == 0.0 and shifted.degenerate and shifted.t == math.inf
    with pytest.raises(ValueError):
        paired_t_test([1], [2])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.integers(0, 100))
def test_t_test_properties(a, seed):
    b = (np.asarray(a) + np.random.default_rng(seed).normal(size=len(a))).tolist()
    fwd, rev = paired_t_test(a, b), paired_t_test(b, a)
    assert 0.0 <= fwd.p <= 1.0
    assert fwd.t == pytest.approx(-rev.t) and fwd.p == pytest.approx(rev.p)
    if not fwd.degenerate:
        assert abs(fwd.p - stats.ttest_rel(a, b).pvalue) < 1e-8


# evaluation


def test_evaluate_ground_truth_and_zero(tiny_fed):
    gt = {c.index: np.stack([s.y for s in c.test])[:, None] for c in tiny_fed.clients}
    rep = evaluate(lambda k, x: gt[k], tiny_fed)
    assert rep.overall.psnr_mean == math.inf and rep.overall.identical == rep.overall.n
    assert rep.overall.ssim_mean == pytest.approx(1.0, abs=1e-9)

    zero = evaluate(lambda k, x: np.zeros_like(x), tiny_fed)
    c = tiny_fed.clients[0]
    peak = {}
    for s in c.test:
        peak[s.patient_id] = max(peak.get(s.patient_id, 0), s.y.max())
    expected = [10 * math.log10(peak[s.patient_id] ** 2 / np.mean(s.y**2)) for s in c.test]
    assert zero.slice_psnr[0] == pytest.approx(expected, rel=1e-12)
    assert zero.per_client[0].psnr_mean == pytest.approx(np.mean(expected), rel=1e-12)


def test_evaluate_order_independent(tiny_fed):
    import copy

    pred = lambda k, x: np.clip(x * 0.9, 0, None)
    a = evaluate(pred, tiny_fed)
    shuffled = copy.deepcopy(tiny_fed)
    for c in shuffled.clients:
        c.test = c.test[::-1]
    b = evaluate(pred, shuffled)
    assert a.overall.psnr_mean == pytest.approx(b.overall.psnr_mean, rel=1e-12)
    assert a.overall.ssim_mean == pytest.approx(b.overall.ssim_mean, rel=1e-12)


def test_evaluate_empty_test_set(tiny_fed):
    import copy

    empty = copy.deepcopy(tiny_fed)
    empty.clients[0].test = []
    with pytest.raises(ValueError, match="empty"):
        evaluate(lambda k, x: x, empty)


def test_report_csv(tmp_path, tiny_fed):
    rep = evaluate(lambda k, x: x, tiny_fed)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == tiny_fed.num_clients + 1 and rows[-1]["client"] == "overall"


# latent analysis


def test_gaps_equal_when_latents_coincide(rng):
    zi = [rng.normal(size=(5, 4)) for _ in range(2)]
    inv, spec = latent_gaps(zi, zi)
    assert inv == spec >= 0


def test_gaps_need_pairs(rng):
    with pytest.raises(ValueError):
        latent_gaps([rng.normal(size=(3, 2))], [rng.normal(size=(3, 2))])


def test_projection_identical_vectors():
    rows = latent_projection({("invariant", 0): np.ones((3, 4)), ("specific", 0): np.ones((3, 4))})
    assert len(rows) == 6 and all(r[:2] == (0.0, 0.0) for r in rows)


def test_projection_preserves_planar_distances(rng):
    plane = rng.normal(size=(12, 2)) * [5.0, 2.0]
    basis = np.linalg.qr(rng.normal(size=(6, 6)))[0][:, :2]
    vecs = plane @ basis.T + 3.0
    rows = latent_projection({("invariant", 0): vecs[:6], ("specific", 1): vecs[6:]})
    xy = np.array([r[:2] for r in rows])
    d_in = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
    d_out = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_projection_requires_three_vectors():
    with pytest.raises(ValueError):
        latent_projection({("invariant", 0): np.ones((2, 3))})


def test_projection_csv(tmp_path, rng):
    rows = latent_projection({("invariant", 0): rng.normal(size=(4, 3)), ("specific", 1): rng.normal(size=(5, 3))})
    write_projection_csv(rows, tmp_path / "l.csv")
    parsed = list(csv.DictReader(open(tmp_path / "l.csv")))
    assert len(parsed) == 9 and list(parsed[0]) == ["x", "y", "kind", "modality"]
