import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcrfd.data import (
    MASK_KINDS,
    MaskSpec,
    SaltMismatch,
    TokenSet,
    align_entities,
    entity_token,
    fft2c,
    generate_phantom,
    ifft2c,
    load_partition,
    make_mask,
    make_salt,
    make_token_set,
    partition,
    plan_partition,
    render_modality,
    save_partition,
    undersample,
)


def psnr_db(x, y):
    return 10 * math.log10(y.max() ** 2 / np.mean((x - y) ** 2))


# phantoms and rendering


def test_phantom_deterministic():
    a, b = generate_phantom(1, 64, 5, 3), generate_phantom(1, 64, 5, 3)
    assert np.array_equal(a.labels, b.labels)


def test_phantoms_differ_between_patients():
    a, b = generate_phantom(1, 64, 5, 3), generate_phantom(1, 64, 6, 3)
    assert np.mean(a.labels != b.labels) >= 0.01


@pytest.mark.parametrize("pid", range(10))
def test_phantom_label_content(pid):
    labels = generate_phantom(0, 64, pid, 2).labels
    present = set(np.unique(labels).tolist())
    assert 0 in present and len(present - {0}) >= 2
    assert labels.min() >= 0 and labels.max() <= 5


def test_phantom_drifts_smoothly():
    slices = [generate_phantom(0, 64, 1, s).labels for s in range(8)]
    steps = [np.mean(a != b) for a, b in zip(slices, slices[1:])]
    assert 0 < max(steps) < 0.15


@pytest.mark.parametrize("size", [16, 24, 60])
def test_phantom_size_errors(size):
    with pytest.raises(ValueError):
        generate_phantom(0, size, 0, 0)


def test_modalities_share_geometry():
    ph = generate_phantom(0, 64, 2, 4)
    a, b = render_modality(ph, 0, 7), render_modality(ph, 1, 7)
    assert np.array_equal(a > 0, b > 0)
    assert np.array_equal(a > 0, ph.labels > 0)
    assert np.mean(np.abs(a - b)) > 0.05
    assert a.min() >= 0 and a.max() <= 1


def test_render_deterministic_and_checked():
    ph = generate_phantom(0, 32, 2, 1)
    assert np.array_equal(render_modality(ph, 1, 3), render_modality(ph, 1, 3))
    with pytest.raises(ValueError):
        render_modality(ph, 7, 3)


# masks and undersampling


def test_fft_round_trip(rng):
    img = rng.normal(size=(64, 64))
    assert np.abs(ifft2c(fft2c(img)) - img).max() < 1e-10


@pytest.mark.parametrize("kind", MASK_KINDS)
@pytest.mark.parametrize("size", [64, 96, 128])
@pytest.mark.parametrize("accel", [2, 3, 4, 5, 6, 8])
def test_mask_rate_band(kind, size, accel):
    m = make_mask(kind, accel, size, 0.08, seed=accel)
    assert set(np.unique(m.grid).tolist()) <= {0.0, 1.0}
    assert 0.8 / accel <= m.sampled_fraction <= 1.3 / accel


@pytest.mark.parametrize("kind", MASK_KINDS)
def test_mask_center_fully_sampled(kind):
    m = make_mask(kind, 4, 64, 0.08, seed=1)
    c = math.ceil(0.08 * 64)
    lo = 32 - c // 2
    if kind.endswith("1d"):
        assert m.grid[:, lo:lo + c].all()
    else:
        assert m.grid[lo:lo + c, lo:lo + c].all()


def test_uniform_example_rate():
    m = make_mask("uniform_1d", 5, 64, 0.08, seed=0)
    assert 0.16 <= m.sampled_fraction <= 0.26


def test_mask_determinism_and_errors():
    assert np.array_equal(make_mask("random_2d", 3, 64, seed=4).grid, make_mask("random_2d", 3, 64, seed=4).grid)
    with pytest.raises(ValueError):
        make_mask("spiral", 3, 64)
    with pytest.raises(ValueError):
        make_mask("uniform_1d", 3, 64, center_fraction=0.3)
    with pytest.raises(ValueError, match="infeasible"):
        make_mask("cartesian_1d", 8, 64, center_fraction=0.2)


def test_full_and_empty_masks():
    y = render_modality(generate_phantom(0, 64, 1, 1), 0, 0)
    full = make_mask("uniform_1d", 1, 64)
    assert np.abs(undersample(y, full) - y).max() < 1e-9
    assert not undersample(y, np.zeros_like(y)).any()
    with pytest.raises(ValueError):
        undersample(y, np.ones((32, 32)))


def test_uniform_undersampling_psnr_band():
    y = render_modality(generate_phantom(0, 64, 3, 4), 0, 0)
    x = undersample(y, make_mask("uniform_1d", 5, 64, seed=0))
    assert 15 <= psnr_db(x, y) <= 30
    assert x.min() >= 0


def test_mask_spec_parse():
    assert MaskSpec.parse("radial_2d:4") == MaskSpec("radial_2d", 4)
    assert str(MaskSpec("random_2d", 3)) == "random_2d:3"
    with pytest.raises(ValueError):
        MaskSpec.parse("nope:3")


# tokens and alignment


def test_tokens():
    salt = make_salt(0)
    assert entity_token(5, salt) == entity_token(5, salt)
    assert entity_token(5, salt) != entity_token(5, make_salt(1))
    assert 0 <= entity_token(5, salt) < 2**64


def test_align_examples():
    salt = make_salt(0)
    a = make_token_set({1: [0, 1], 2: [0, 1]}, salt)
    b = make_token_set({3: [0, 1]}, salt)
    assert align_entities([a, b]) == []
    keys = align_entities([a, a])
    assert keys == sorted(keys) and len(keys) == 4


@given(st.sets(st.integers(0, 200), max_size=30), st.sets(st.integers(0, 200), max_size=30), st.integers(0, 5))
def test_align_matches_plain_id_oracle(ids_a, ids_b, seed):
    salt = make_salt(seed)
    ta = make_token_set({i: [0] for i in ids_a}, salt)
    tb = make_token_set({i: [0] for i in ids_b}, salt)
    got = {tok for tok, _ in align_entities([ta, tb])}
    assert got == {entity_token(i, salt) for i in ids_a & ids_b}


def test_align_salt_mismatch():
    a = make_token_set({1: [0]}, make_salt(0))
    b = make_token_set({1: [0]}, make_salt(1))
    with pytest.raises(SaltMismatch):
        align_entities([a, b])


# partitioning


def test_partition_arithmetic():
    plan = plan_partition(range(100), 2, 0.1, seed=0)
    assert len(plan.vertical) == 10
    assert [len(h) for h in plan.horizontal] == [45, 45]


def test_partition_beta_zero():
    plan = plan_partition(range(20), 2, 0.0, seed=0)
    assert plan.vertical == []


def test_partition_too_few_patients():
    with pytest.raises(ValueError):
        plan_partition(range(3), 2, 0.5, seed=0)


@settings(max_examples=100)
@given(st.integers(0, 10**6))
def test_partition_invariants(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(10, 120))
    k = int(rng.integers(1, 7))
    beta = float(rng.choice([0.0, 0.02, 0.1, 0.25, 0.5]))
    patients = rng.choice(10_000, size=p, replace=False).tolist()
    plan = plan_partition(patients, k, beta, seed)
    hs = [set(h) for h in plan.horizontal]
    assert len(plan.vertical) == math.ceil(round(beta * p, 9))
    assert sum(len(h) for h in hs) == len(set().union(*hs))
    assert set().union(*hs, plan.vertical) == set(patients)
    assert not set(plan.vertical) & set().union(*hs)


def test_materialised_partition(tiny_fed):
    c0, c1 = tiny_fed.clients
    assert len(c0.vertical) == len(c1.vertical) > 0
    assert not {s.patient_id for s in c0.horizontal} & {s.patient_id for s in c1.horizontal}
    for a, b in zip(c0.vertical, c1.vertical):
        assert (a.patient_id, a.slice_index) == (b.patient_id, b.slice_index)
        assert a.modality != b.modality
        labels = generate_phantom(tiny_fed.seed, tiny_fed.size, a.patient_id, a.slice_index, tiny_fed.num_slices).labels
        assert np.array_equal(a.y > 0, labels > 0) and np.array_equal(b.y > 0, labels > 0)
    assert all(s.y.min() >= 0 and s.y.max() <= 1 and s.x.shape == s.y.shape for s in c0.horizontal)


def test_dataset_round_trip(tmp_path, tiny_fed):
    save_partition(tiny_fed, tmp_path / "ds")
    meta = json.loads((tmp_path / "ds" / "partition.json").read_text())
    assert "salt_fingerprint" in meta and all("salt" != k for k in meta)
    assert (tmp_path / "ds" / "c0" / "p{}_s0_x.fcrt".format(tiny_fed.clients[0].horizontal[0].patient_id)).exists()
    back = load_partition(tmp_path / "ds")
    for a, b in zip(tiny_fed.clients, back.clients):
        for sa, sb in zip(a.horizontal + a.vertical + a.test, b.horizontal + b.vertical + b.test):
            assert np.array_equal(sa.x, sb.x) and np.array_equal(sa.y, sb.y)
            assert (sa.patient_id, sa.slice_index) == (sb.patient_id, sb.slice_index)
    assert back.aligned_keys == tiny_fed.aligned_keys


def test_dataset_bytes_reproducible(tmp_path, tiny_fed):
    save_partition(tiny_fed, tmp_path / "a")
    save_partition(tiny_fed, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
