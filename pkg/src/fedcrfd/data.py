"""Synthetic multi-contrast phantoms, k-space undersampling and client partitioning.

A phantom is a label map of overlapping ellipses; a modality maps each
tissue label to an intensity. Two modalities of one phantom therefore share
geometry exactly and differ only in contrast. Images are undersampled in a
centred k-space with one of four mask families, and the zero-filled
magnitude image is the network input.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fcrt

MASK_KINDS = ("uniform_1d", "random_2d", "cartesian_1d", "radial_2d")

# intensity of tissue labels 1..5 per modality (background is always 0)
MODALITY_TABLE = np.array(
    [
        [0.9, 0.6, 0.3, 0.7, 0.5],
        [0.2, 0.8, 0.9, 0.4, 0.6],
        [0.5, 0.35, 0.65, 0.95, 0.25],
    ]
)
NUM_TISSUES = 5
NOISE_SIGMA = 0.01


class SaltMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class AnatomyPhantom:
    labels: np.ndarray
    patient_id: int
    slice_index: int


def _ellipse_mask(yy, xx, cy, cx, ay, ax, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(seed: int, size: int, patient_id: int, slice_index: int, num_slices: int = 8) -> AnatomyPhantom:
    """Ellipse phantom whose shape drifts smoothly with ``slice_index``.

    Every random draw depends on (seed, patient) only; the slice index enters
    through a linear drift and a smooth through-plane scaling, so
    neighbouring slices look like a volume.
    """
    if size < 32:
        raise ValueError(f"phantom size {size} too small (minimum 32)")
    if size % 8:
        raise ValueError(f"phantom size {size} must be divisible by 8")
    rng = np.random.default_rng([int(seed), int(patient_id), 0x5EED])
    n_ellipses = int(rng.integers(4, 9))
    mid = (num_slices - 1) / 2.0
    rel = (slice_index - mid) / max(mid, 1.0)
    through_plane = 1.0 - 0.15 * rel * rel

    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    labels = np.zeros((size, size), dtype=np.int64)

    outer_label = int(rng.integers(1, NUM_TISSUES + 1))
    inner_label = int(rng.choice([l for l in range(1, NUM_TISSUES + 1) if l != outer_label]))
    for i in range(n_ellipses):
        if i == 0:
            cy, cx = rng.uniform(-0.05, 0.05, 2)
            ay, ax = rng.uniform(0.72, 0.9), rng.uniform(0.6, 0.8)
            label = outer_label
        elif i == 1:
            cy, cx = rng.uniform(-0.05, 0.05, 2)
            ay, ax = rng.uniform(0.55, 0.65), rng.uniform(0.45, 0.55)
            label = inner_label
        else:
            radius, theta = rng.uniform(0.0, 0.4), rng.uniform(0, 2 * math.pi)
            cy, cx = radius * math.sin(theta), radius * math.cos(theta)
            ay, ax = rng.uniform(0.06, 0.3), rng.uniform(0.06, 0.3)
            label = int(rng.integers(1, NUM_TISSUES + 1))
        angle = rng.uniform(0, math.pi)
        vy, vx, va = rng.normal(0.0, 0.015, 3)
        mask = _ellipse_mask(
            yy, xx,
            cy + vy * slice_index, cx + vx * slice_index,
            ay * through_plane, ax * through_plane,
            angle + va * slice_index,
        )
        labels[mask] = label
    return AnatomyPhantom(labels, int(patient_id), int(slice_index))


def render_modality(phantom: AnatomyPhantom, modality: int, noise_seed: int) -> np.ndarray:
    """Contrast-specific image in [0, 1]; noise only inside tissue so the support is shared."""
    if not 0 <= modality < len(MODALITY_TABLE):
        raise ValueError(f"unknown modality {modality}")
    lut = np.concatenate([[0.0], MODALITY_TABLE[modality]])
    img = lut[phantom.labels]
    rng = np.random.default_rng([int(noise_seed), phantom.patient_id, phantom.slice_index, modality])
    tissue = phantom.labels > 0
    img = img + np.where(tissue, rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# masks and undersampling


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    acceleration: int

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "MaskSpec":
        kind, _, accel = text.partition(":")
        return cls(kind.strip(), int(accel))

    def __str__(self) -> str:
        return f"{self.kind}:{self.acceleration}"


@dataclass
class UndersampleMask:
    kind: str
    acceleration: int
    center_fraction: float
    grid: np.ndarray
    seed: int

    @property
    def sampled_fraction(self) -> float:
        return float(self.grid.mean())

    @property
    def mask_id(self) -> str:
        return f"{self.kind}-R{self.acceleration}-s{self.seed}"


def _center_slice(n: int, width: int) -> slice:
    start = n // 2 - width // 2
    return slice(start, start + width)


def _radial_grid(h: int, w: int, spokes: int, rotation: float) -> np.ndarray:
    grid = np.zeros((h, w))
    t = np.linspace(-max(h, w) / 2, max(h, w) / 2, 4 * max(h, w))
    for i in range(spokes):
        theta = rotation + i * math.pi / spokes
        r = np.clip(np.round(h / 2 + t * math.sin(theta)).astype(int), 0, h - 1)
        c = np.clip(np.round(w / 2 + t * math.cos(theta)).astype(int), 0, w - 1)
        grid[r, c] = 1.0
    return grid


def make_mask(kind: str, acceleration: int, size: int | tuple[int, int], center_fraction: float = 0.08, seed: int = 0) -> UndersampleMask:
    """Binary sampling grid over a centred (fftshifted) k-space.

    ``acceleration == 1`` returns the fully sampled grid for any kind.
    """
    if kind not in MASK_KINDS:
        raise ValueError(f"unknown mask kind {kind!r}")
    h, w = (size, size) if isinstance(size, int) else size
    if acceleration == 1:
        return UndersampleMask(kind, 1, center_fraction, np.ones((h, w)), seed)
    if acceleration < 2:
        raise ValueError(f"acceleration must be >= 2 (or 1 for a full mask), got {acceleration}")
    if not 0.0 < center_fraction <= 0.2:
        raise ValueError(f"center fraction must be in (0, 0.2], got {center_fraction}")
    rng = np.random.default_rng([int(seed), MASK_KINDS.index(kind), int(acceleration)])
    grid = np.zeros((h, w))
    num_low = math.ceil(center_fraction * w)

    if kind in ("uniform_1d", "cartesian_1d"):
        target = w / acceleration
        if num_low > 1.3 * target:
            raise ValueError(f"rate 1/{acceleration} infeasible for width {w} with {num_low} centre columns")
        cols = np.zeros(w, dtype=bool)
        cols[_center_slice(w, num_low)] = True
        if kind == "uniform_1d":
            # spacing chosen so the total (centre band included) hits ~1/R
            extra = target - num_low
            if extra > 0:
                spacing = (w - num_low) / extra
                offset = rng.integers(0, max(1, int(round(spacing))))
                picks = np.round(offset + np.arange(0, w, spacing)).astype(int)
                cols[picks[picks < w]] = True
        else:
            n_extra = int(round(target)) - num_low
            if n_extra > 0:
                free = np.flatnonzero(~cols)
                cols[rng.choice(free, size=n_extra, replace=False)] = True
        grid[:, cols] = 1.0
    elif kind == "random_2d":
        num_low_h = math.ceil(center_fraction * h)
        grid[_center_slice(h, num_low_h), _center_slice(w, num_low)] = 1.0
        n_extra = int(round(h * w / acceleration)) - int(grid.sum())
        if n_extra < 0 and grid.mean() > 1.3 / acceleration:
            raise ValueError(f"rate 1/{acceleration} infeasible for size {h}x{w}")
        if n_extra > 0:
            free = np.flatnonzero(grid.reshape(-1) == 0)
            grid.reshape(-1)[rng.choice(free, size=n_extra, replace=False)] = 1.0
    else:
        rotation = rng.uniform(0, math.pi)
        center = np.zeros((h, w))
        center[_center_slice(h, math.ceil(center_fraction * h)), _center_slice(w, num_low)] = 1.0
        nominal = math.ceil(math.pi * w / (2 * acceleration))
        # rasterised spokes overlap near the centre, so the nominal count
        # oversamples; take the count whose rate is closest to 1/R
        best = None
        for spokes in range(1, nominal + 1):
            g = np.maximum(_radial_grid(h, w, spokes, rotation), center)
            gap = abs(g.mean() - 1.0 / acceleration)
            if best is None or gap < best[0]:
                best = (gap, g)
        grid = best[1]
        if not 0.8 / acceleration <= grid.mean() <= 1.3 / acceleration:
            raise ValueError(f"rate 1/{acceleration} infeasible for radial size {h}x{w}")
    return UndersampleMask(kind, int(acceleration), float(center_fraction), grid, int(seed))


def fft2c(img: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(img, norm="ortho"))


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(kspace), norm="ortho")


def undersample(y: np.ndarray, mask: UndersampleMask | np.ndarray) -> np.ndarray:
    """Zero-filled magnitude reconstruction of the masked centred spectrum."""
    grid = mask.grid if isinstance(mask, UndersampleMask) else np.asarray(mask)
    if grid.shape != y.shape:
        raise ValueError(f"mask shape {grid.shape} does not match image {y.shape}")
    return np.maximum(np.abs(ifft2c(grid * fft2c(y))), 0.0)


# ---------------------------------------------------------------------------
# entity tokens


def make_salt(seed: int) -> bytes:
    return np.random.default_rng([int(seed), 0x5A17]).bytes(16)


def salt_fingerprint(salt: bytes) -> str:
    return hashlib.blake2b(salt, digest_size=8, person=b"fcrfd-saltfp").hexdigest()


def entity_token(patient_id: int, salt: bytes) -> int:
    """64-bit keyed hash of a patient ID."""
    digest = hashlib.blake2b(str(int(patient_id)).encode(), key=salt, digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class TokenSet:
    """What a client reveals for alignment: salted tokens and their slice indices."""

    fingerprint: str
    slices: dict[int, tuple[int, ...]]


def make_token_set(patient_slices: dict[int, Sequence[int]], salt: bytes) -> TokenSet:
    return TokenSet(
        salt_fingerprint(salt),
        {entity_token(pid, salt): tuple(sorted(s)) for pid, s in patient_slices.items()},
    )


def align_entities(token_sets: Sequence[TokenSet]) -> list[tuple[int, int]]:
    """Sorted (token, slice) keys present at every client."""
    if not token_sets:
        return []
    fps = {ts.fingerprint for ts in token_sets}
    if len(fps) != 1:
        raise SaltMismatch(f"clients use different salts (fingerprints {sorted(fps)})")
    common = set(token_sets[0].slices)
    for ts in token_sets[1:]:
        common &= set(ts.slices)
    keys = []
    for tok in sorted(common):
        shared = set(token_sets[0].slices[tok])
        for ts in token_sets[1:]:
            shared &= set(ts.slices[tok])
        keys.extend((tok, s) for s in sorted(shared))
    return keys


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class SliceSample:
    x: np.ndarray
    y: np.ndarray
    patient_id: int
    slice_index: int
    modality: int
    mask_id: str


@dataclass
class PartitionPlan:
    vertical: list[int]
    horizontal: list[list[int]]


def plan_partition(patients: Sequence[int], num_clients: int, beta: float, seed: int) -> PartitionPlan:
    """Choose ceil(beta * P) shared patients and deal the rest out disjointly."""
    patients = [int(p) for p in patients]
    if len(set(patients)) != len(patients):
        raise ValueError("patient IDs must be unique")
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not 0.0 <= beta <= 0.5:
        raise ValueError(f"beta must be in [0, 0.5], got {beta}")
    n_vert = math.ceil(round(beta * len(patients), 9))
    if len(patients) - n_vert < num_clients:
        raise ValueError(f"{len(patients)} patients too few for {num_clients} clients with {n_vert} vertical")
    rng = np.random.default_rng([int(seed), 0xBE7A])
    order = rng.permutation(len(patients))
    shuffled = [patients[i] for i in order]
    vertical = sorted(shuffled[:n_vert])
    rest = shuffled[n_vert:]
    horizontal = [sorted(rest[k::num_clients]) for k in range(num_clients)]
    return PartitionPlan(vertical, horizontal)


@dataclass
class ClientData:
    index: int
    modality: int
    mask_spec: MaskSpec
    mask: UndersampleMask
    horizontal_patients: list[int]
    vertical_patients: list[int]
    horizontal: list[SliceSample] = field(default_factory=list)
    vertical: list[SliceSample] = field(default_factory=list)
    test: list[SliceSample] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.horizontal) + len(self.vertical)

    @property
    def label(self) -> int:
        return self.modality


@dataclass
class FederationPartition:
    clients: list[ClientData]
    salt: bytes
    aligned_keys: list[tuple[int, int]]
    size: int
    num_slices: int
    seed: int
    center_fraction: float
    test_patients: list[int]

    @property
    def num_clients(self) -> int:
        return len(self.clients)


def _make_sample(seed: int, size: int, pid: int, s: int, num_slices: int, modality: int, mask: UndersampleMask) -> SliceSample:
    phantom = generate_phantom(seed, size, pid, s, num_slices)
    y = render_modality(phantom, modality, noise_seed=seed)
    return SliceSample(undersample(y, mask), y, pid, s, modality, mask.mask_id)


def partition(
    patients: Sequence[int],
    num_clients: int,
    beta: float,
    modalities: Sequence[int],
    mask_specs: Sequence[MaskSpec],
    seed: int,
    size: int = 64,
    num_slices: int = 8,
    center_fraction: float = 0.08,
    test_patients: Sequence[int] = (),
) -> FederationPartition:
    """Materialise a cross-modal vertical federation.

    Vertical patients appear at every client (each in the client's own
    modality); the rest are split disjointly. Vertical samples are ordered by
    the canonical aligned keys so batch ``b`` means the same slices everywhere.
    """
    if len(modalities) != num_clients or len(mask_specs) != num_clients:
        raise ValueError("need one modality and one mask spec per client")
    plan = plan_partition(patients, num_clients, beta, seed)
    salt = make_salt(seed)
    masks = [
        make_mask(spec.kind, spec.acceleration, size, center_fraction, seed=seed * 1000 + k)
        for k, spec in enumerate(mask_specs)
    ]
    token_sets = []
    for k in range(num_clients):
        owned = plan.horizontal[k] + plan.vertical
        token_sets.append(make_token_set({pid: range(num_slices) for pid in owned}, salt))
    keys = align_entities(token_sets)

    clients = []
    for k in range(num_clients):
        mod, mask = int(modalities[k]), masks[k]
        client = ClientData(k, mod, mask_specs[k], mask, plan.horizontal[k], plan.vertical)
        client.horizontal = [
            _make_sample(seed, size, pid, s, num_slices, mod, mask)
            for pid in plan.horizontal[k] for s in range(num_slices)
        ]
        # each client resolves the shared tokens against its own ID table
        by_token = {entity_token(pid, salt): pid for pid in plan.horizontal[k] + plan.vertical}
        client.vertical = [_make_sample(seed, size, by_token[tok], s, num_slices, mod, mask) for tok, s in keys]
        client.test = [
            _make_sample(seed, size, pid, s, num_slices, mod, mask)
            for pid in test_patients for s in range(num_slices)
        ]
        clients.append(client)
    return FederationPartition(clients, salt, keys, size, num_slices, seed, center_fraction, [int(p) for p in test_patients])


# ---------------------------------------------------------------------------
# persistence


def _sample_path(root: Path, k: int, sample: SliceSample, part: str, test: bool) -> Path:
    sub = root / f"c{k}" / ("test" if test else "")
    return sub / f"p{sample.patient_id}_s{sample.slice_index}_{part}.fcrt"


def save_partition(fed: FederationPartition, directory: str | os.PathLike) -> Path:
    root = Path(directory)
    clients_meta = []
    for c in fed.clients:
        (root / f"c{c.index}" / "test").mkdir(parents=True, exist_ok=True)
        for test, samples in ((False, c.horizontal + c.vertical), (True, c.test)):
            for smp in samples:
                fcrt.save(_sample_path(root, c.index, smp, "x", test), smp.x)
                fcrt.save(_sample_path(root, c.index, smp, "y", test), smp.y)
        fcrt.save(root / f"c{c.index}" / "mask.fcrt", c.mask.grid)
        clients_meta.append(
            {
                "index": c.index,
                "modality": c.modality,
                "mask": {
                    "kind": c.mask.kind,
                    "acceleration": c.mask.acceleration,
                    "center_fraction": c.mask.center_fraction,
                    "seed": c.mask.seed,
                    "sampled_fraction": round(c.mask.sampled_fraction, 6),
                },
                "horizontal_patients": c.horizontal_patients,
                "vertical_patients": c.vertical_patients,
                "n_samples": c.n_samples,
            }
        )
    meta = {
        "version": 1,
        "size": fed.size,
        "num_slices": fed.num_slices,
        "seed": fed.seed,
        "center_fraction": fed.center_fraction,
        "salt_fingerprint": salt_fingerprint(fed.salt),
        "aligned_keys": [[str(t), s] for t, s in fed.aligned_keys],
        "test_patients": fed.test_patients,
        "clients": clients_meta,
    }
    (root / "partition.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_partition(directory: str | os.PathLike) -> FederationPartition:
    root = Path(directory)
    meta_path = root / "partition.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no partition.json in {root}")
    meta = json.loads(meta_path.read_text())
    # the salt is re-derived from the federation seed, never written to disk
    salt = make_salt(meta["seed"])
    if salt_fingerprint(salt) != meta["salt_fingerprint"]:
        raise SaltMismatch("derived salt does not match the recorded fingerprint")
    keys = [(int(t), int(s)) for t, s in meta["aligned_keys"]]
    n_slices = meta["num_slices"]
    clients = []
    for cm in meta["clients"]:
        k, mod = cm["index"], cm["modality"]
        mm = cm["mask"]
        mask = UndersampleMask(mm["kind"], mm["acceleration"], mm["center_fraction"], fcrt.load(root / f"c{k}" / "mask.fcrt"), mm["seed"])
        client = ClientData(k, mod, MaskSpec(mm["kind"], mm["acceleration"]), mask, cm["horizontal_patients"], cm["vertical_patients"])

        def read(pid, s, test):
            stub = SliceSample(None, None, pid, s, mod, mask.mask_id)
            return SliceSample(
                fcrt.load(_sample_path(root, k, stub, "x", test)),
                fcrt.load(_sample_path(root, k, stub, "y", test)),
                pid, s, mod, mask.mask_id,
            )

        client.horizontal = [read(pid, s, False) for pid in cm["horizontal_patients"] for s in range(n_slices)]
        by_token = {entity_token(pid, salt): pid for pid in cm["horizontal_patients"] + cm["vertical_patients"]}
        client.vertical = [read(by_token[t], s, False) for t, s in keys]
        client.test = [read(pid, s, True) for pid in meta["test_patients"] for s in range(n_slices)]
        clients.append(client)
    return FederationPartition(clients, salt, keys, meta["size"], n_slices, meta["seed"], meta["center_fraction"], meta["test_patients"])
