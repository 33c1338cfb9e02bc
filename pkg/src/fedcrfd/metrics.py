"""Reconstruction metrics, paired statistics and latent-space probes."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .data import FederationPartition
from .federation import TrainingResult, stack_batch
from .tensor import constant

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred: np.ndarray, gt: np.ndarray, data_max: float) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    pred, gt = _check_pair(pred, gt)
    if not data_max > 0:
        raise ValueError("data_max must be positive")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_max**2 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable weighted mean over every full window
    rows = sliding_window_view(img, len(kernel), axis=0) @ kernel
    return sliding_window_view(rows, len(kernel), axis=1) @ kernel


def ssim(pred: np.ndarray, gt: np.ndarray, data_max: float) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (population statistics)."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise ValueError(f"ssim expects a single-channel 2-D image, got shape {pred.shape}")
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"image {pred.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if not data_max > 0:
        raise ValueError("data_max must be positive")
    k = _gaussian_kernel()
    mu_x, mu_y = _filter_valid(pred, k), _filter_valid(gt, k)
    xx = _filter_valid(pred * pred, k) - mu_x * mu_x
    yy = _filter_valid(gt * gt, k) - mu_y * mu_y
    xy = _filter_valid(pred * gt, k) - mu_x * mu_y
    c1 = (SSIM_K1 * data_max) ** 2
    c2 = (SSIM_K2 * data_max) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    Zero spread of the differences is degenerate: identical samples give
    t = 0, p = 1; a nonzero constant shift gives t = +-inf, p = 0.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t, min(max(p, 0.0), 1.0))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Summary:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n: int
    identical: int = 0


def _summarise(psnrs: list[float], ssims: list[float]) -> Summary:
    finite = [p for p in psnrs if math.isfinite(p)]
    identical = len(psnrs) - len(finite)
    if finite:
        pm, ps = float(np.mean(finite)), float(np.std(finite))
    else:
        pm, ps = math.inf, 0.0
    return Summary(pm, ps, float(np.mean(ssims)), float(np.std(ssims)), len(psnrs), identical)


@dataclass
class EvalReport:
    """Per-client and pooled PSNR/SSIM. PSNR statistics exclude identical
    slices, which are counted in ``identical`` instead."""

    per_client: dict[int, Summary]
    overall: Summary
    slice_psnr: dict[int, list[float]] = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return self.overall.psnr_mean

    @property
    def ssim(self) -> float:
        return self.overall.ssim_mean

    def rows(self) -> list[dict]:
        out = []
        for label, s in [*((str(k), v) for k, v in sorted(self.per_client.items())), ("overall", self.overall)]:
            out.append(
                {
                    "client": label,
                    "psnr_mean": s.psnr_mean,
                    "psnr_std": s.psnr_std,
                    "ssim_mean": s.ssim_mean,
                    "ssim_std": s.ssim_std,
                    "n": s.n,
                    "identical": s.identical,
                }
            )
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


Predictor = Callable[[int, np.ndarray], np.ndarray]


def model_predictor(result: TrainingResult, batch_size: int = 16) -> Predictor:
    """Client k's composite model: global E^I and D with its own E^S when present."""
    arch = result.config.arch
    use_fusion = result.method == "fedcrfd" and result.config.use_fusion
    models = {}

    def predict(k: int, x: np.ndarray) -> np.ndarray:
        if k not in models:
            models[k] = result.model_params(k)
        outs = []
        for s in range(0, len(x), batch_size):
            out = nn.reconstruct(models[k], constant(x[s:s + batch_size]), arch, use_fusion=use_fusion)
            outs.append(out.data)
        return np.concatenate(outs)

    return predict


def evaluate(predict: Predictor, partition: FederationPartition) -> EvalReport:
    """Slice-wise PSNR/SSIM on every client's test set.

    The peak value is the ground-truth maximum of the slice's volume
    (all slices of that patient at that client).
    """
    per_client, slice_psnr = {}, {}
    all_p, all_s = [], []
    for c in partition.clients:
        if not c.test:
            raise ValueError(f"client {c.index} has an empty test set")
        xb, yb = stack_batch(c.test)
        pred = predict(c.index, xb)
        vol_max: dict[int, float] = {}
        for s in c.test:
            vol_max[s.patient_id] = max(vol_max.get(s.patient_id, 0.0), float(s.y.max()))
        ps, ss = [], []
        for i, s in enumerate(c.test):
            peak = vol_max[s.patient_id]
            ps.append(psnr(pred[i, 0], s.y, peak))
            ss.append(ssim(pred[i, 0], s.y, peak))
        per_client[c.index] = _summarise(ps, ss)
        slice_psnr[c.index] = ps
        all_p += ps
        all_s += ss
    return EvalReport(per_client, _summarise(all_p, all_s), slice_psnr)


def evaluate_result(result: TrainingResult, partition: FederationPartition) -> EvalReport:
    return evaluate(model_predictor(result), partition)


# ---------------------------------------------------------------------------
# latent analysis


def client_latents(result: TrainingResult, partition: FederationPartition, probe: str = "vertical") -> tuple[list[np.ndarray], list[np.ndarray]]:
    """(z^I, z^S) per client for the probe samples, rows in the shared aligned order."""
    arch = result.config.arch
    zi, zs = [], []
    for c in partition.clients:
        samples = c.vertical if probe == "vertical" else c.test
        if not samples:
            zi.append(np.zeros((0, arch.latent_dim)))
            zs.append(np.zeros((0, arch.latent_dim)))
            continue
        model = result.model_params(c.index)
        x = constant(stack_batch(samples)[0])
        zi.append(nn.encode_invariant(model, x, arch)[2].data)
        zs.append(nn.encode_specific(model, x, arch)[1].data if model.specific_encoder else zi[-1])
    return zi, zs


def latent_gaps(zi: Sequence[np.ndarray], zs: Sequence[np.ndarray]) -> tuple[float, float]:
    """Mean cross-client l1 (per-dimension mean) distance between paired rows."""
    pairs = [(a, b) for a in range(len(zi)) for b in range(a + 1, len(zi))]
    if not pairs or len(zi[0]) == 0:
        raise ValueError("no cross-modality pairs in the probe set")
    for z in (*zi, *zs):
        if z.shape != zi[0].shape:
            raise ValueError("latent sets must be aligned and equally shaped")
    inv = np.mean([np.abs(zi[a] - zi[b]).mean() for a, b in pairs])
    spec = np.mean([np.abs(zs[a] - zs[b]).mean() for a, b in pairs])
    return float(inv), float(spec)


def disentanglement_score(result: TrainingResult, partition: FederationPartition, probe: str = "vertical") -> tuple[float, float]:
    """(invariant gap, specific gap); smaller invariant gap means anatomy is shared."""
    modalities = {c.modality for c in partition.clients}
    if len(modalities) < 2:
        raise ValueError("probe needs at least two modalities")
    zi, zs = client_latents(result, partition, probe)
    return latent_gaps(zi, zs)


def latent_projection(groups: dict[tuple[str, int], np.ndarray]) -> list[tuple[float, float, str, int]]:
    """PCA of all pooled vectors to two coordinates, labelled (kind, modality)."""
    labels, blocks = [], []
    for (kind, modality), vecs in groups.items():
        vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
        if len(vecs) < 3:
            raise ValueError(f"group {(kind, modality)} needs at least 3 vectors")
        blocks.append(vecs)
        labels += [(kind, modality)] * len(vecs)
    pooled = np.concatenate(blocks)
    centred = pooled - pooled.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    # rank-deficient data keeps only the available directions
    rank = int((sv > 1e-12 * max(sv.max(initial=0.0), 1.0)).sum())
    coords = np.zeros((len(pooled), 2))
    use = min(2, rank)
    if use:
        coords[:, :use] = centred @ vt[:use].T
    return [(float(x), float(y), kind, int(mod)) for (x, y), (kind, mod) in zip(coords, labels)]


def write_projection_csv(rows: Sequence[tuple[float, float, str, int]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "kind", "modality"])
        for x, y, kind, mod in rows:
            w.writerow([f"{x:.8f}", f"{y:.8f}", kind, mod])


def projection_for(result: TrainingResult, partition: FederationPartition, probe: str = "test") -> list[tuple[float, float, str, int]]:
    zi, zs = client_latents(result, partition, probe)
    groups = {}
    for c, a, b in zip(partition.clients, zi, zs):
        for kind, z in (("invariant", a), ("specific", b)):
            key = (kind, c.modality)
            groups[key] = np.concatenate([groups[key], z]) if key in groups else z
    return latent_projection(groups)
