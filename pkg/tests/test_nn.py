import numpy as np
import pytest

from fedcrfd import nn
from fedcrfd.tensor import Parameter, ShapeError, backward, constant, finite_diff_check, softmax, zero_grad, adam_step

ARCH = nn.ArchConfig()


@pytest.fixture
def model():
    return nn.init_model(ARCH, seed=3)


def x_batch(n=2, size=32, seed=0):
    return constant(np.random.default_rng(seed).random((n, 1, size, size)))


def test_latent_lengths_and_skips(model):
    x = x_batch(1, 64)
    _, zs = nn.encode_specific(model, x, ARCH)
    feat, skips, zi = nn.encode_invariant(model, x, ARCH)
    assert zs.shape == (1, 32) and zi.shape == (1, 32)
    assert [s.shape[2] for s in skips] == [64, 32] and feat.shape[2] == 16


def test_zero_input_zero_bias_gives_zero_latent(model):
    _, zs = nn.encode_specific(model, constant(np.zeros((1, 1, 32, 32))), ARCH)
    assert not zs.data.any()


def test_encoders_deterministic(model):
    x = x_batch()
    assert np.array_equal(nn.encode_specific(model, x, ARCH)[1].data, nn.encode_specific(model, x, ARCH)[1].data)
    assert np.array_equal(nn.encode_invariant(model, x, ARCH)[2].data, nn.encode_invariant(model, x, ARCH)[2].data)


def test_indivisible_input_rejected(model):
    with pytest.raises(ShapeError):
        nn.encode_invariant(model, constant(np.zeros((1, 1, 30, 30))), ARCH)


def test_encoders_share_layer_shapes(model):
    ei = {k.split(".", 1)[1]: v.shape for k, v in model.invariant_encoder.items()}
    es = {k.split(".", 1)[1]: v.shape for k, v in model.specific_encoder.items()}
    assert ei == es


def test_aggregable_partition(model):
    names = set(model.aggregable())
    assert all(n.startswith(("E_I.", "D.")) for n in names)
    assert not names & set(model.specific_encoder)
    assert set(nn.init_model(ARCH, seed=9).aggregable()) == names


def test_plain_model_matches_aggregable_subset(model):
    plain = nn.init_model(ARCH, seed=3, specific_tag=None)
    assert not plain.specific_encoder
    for n, p in plain.aggregable().items():
        assert np.array_equal(p.data, model.aggregable()[n].data)


def test_decode_shape_and_zero_specific_equivalence(model):
    x = x_batch()
    feat_i, skips, _ = nn.encode_invariant(model, x, ARCH)
    fused = nn.fuse_and_decode(model, feat_i, constant(np.zeros(feat_i.shape)), skips, ARCH, True, residual=x)
    plain = nn.fuse_and_decode(model, feat_i, None, skips, ARCH, False, residual=x)
    assert fused.shape == x.shape
    assert np.array_equal(fused.data, plain.data)


def test_fusion_shape_mismatch(model):
    feat_i, skips, _ = nn.encode_invariant(model, x_batch(), ARCH)
    with pytest.raises(ShapeError):
        nn.fuse_and_decode(model, feat_i, constant(np.zeros((2, 32, 4, 4))), skips, ARCH, True)


def test_gradient_reaches_both_encoders_only_with_fusion(model):
    x, y = x_batch(), constant(np.random.default_rng(1).random((2, 1, 32, 32)))
    for fusion in (True, False):
        zero_grad(model.all().values())
        backward(nn.recon_loss(nn.reconstruct(model, x, ARCH, use_fusion=fusion), y))
        es = sum(np.abs(p.grad).sum() for p in model.specific_encoder.values())
        ei = sum(np.abs(p.grad).sum() for p in model.invariant_encoder.values())
        assert ei > 0
        assert (es > 0) if fusion else (es == 0)


def test_classifier_logits(model):
    clf = nn.init_classifier(ARCH, seed=0)
    z = constant(np.random.default_rng(0).normal(size=(4, 32)))
    logits = nn.classify(clf, z)
    assert logits.shape == (4, 2)
    np.testing.assert_allclose(softmax(logits.data).sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(logits.data, nn.classify(clf, z).data)
    with pytest.raises(ShapeError):
        nn.classify(clf, constant(np.zeros((1, 16))))


def test_intra_loss_examples():
    z1, z0 = constant([[1.0, 1.0]]), constant([[0.0, 0.0]])
    assert nn.intra_loss(z1, z0).item() == -1.0
    assert nn.intra_loss(z1, z1).item() == 0.0
    p = Parameter([[30.0, -30.0]])
    loss = nn.intra_loss(p, z0, cap=10.0)
    assert loss.item() == -10.0
    backward(loss)
    assert not p.grad.any()
    with pytest.raises(ValueError):
        nn.intra_loss(z1, z0, cap=0.0)


@pytest.mark.parametrize("measure", ["l1", "l2"])
def test_intra_loss_symmetric(measure):
    rng = np.random.default_rng(2)
    a, b = constant(rng.normal(size=(3, 5))), constant(rng.normal(size=(3, 5)))
    assert nn.intra_loss(a, b, measure).item() == nn.intra_loss(b, a, measure).item()


def test_cross_loss_arithmetic():
    assert nn.cross_loss(constant([[1.0, 1.0]]), [constant([[0.0, 0.0]])]).item() == 1.0
    z = constant([[0.5, 2.0]])
    assert nn.cross_loss(z, [z, z]).item() == 0.0


def test_recon_loss_examples():
    y = constant(np.random.default_rng(0).random((1, 1, 8, 8)))
    assert nn.recon_loss(y, y).item() == 0.0
    assert np.isclose(nn.recon_loss(constant(y.data + 0.5), y).item(), 0.5)


def test_one_hot():
    assert nn.one_hot(1, 3, rows=2).tolist() == [[0, 1, 0], [0, 1, 0]]
    with pytest.raises(ValueError):
        nn.one_hot(3, 3)


def test_full_model_gradcheck_small(model):
    x, y = x_batch(2, 16), constant(np.random.default_rng(4).random((2, 1, 16, 16)))
    params = list(model.all().values())
    # composite-model tolerance: central-difference round-off is ~1e-11 absolute
    report = finite_diff_check(lambda: nn.recon_loss(nn.reconstruct(model, x, ARCH), y), params, tolerance=1e-4, n_coords=60)
    assert report.passed, report


def test_overfit_probe():
    model = nn.init_model(ARCH, seed=0, specific_tag=None)
    rng = np.random.default_rng(0)
    y = rng.random((2, 1, 16, 16))
    x = constant(y + rng.normal(0, 0.3, y.shape))
    first = None
    for _ in range(200):
        loss = nn.recon_loss(nn.reconstruct(model, x, ARCH, use_fusion=False), constant(y))
        first = loss.item() if first is None else first
        zero_grad(model.all().values())
        backward(loss)
        adam_step(model.all().values(), 1e-2)
    assert loss.item() < 0.25 * first


def test_checkpoint_round_trip(tmp_path, model):
    tensors = {n: p.data for n, p in model.all().items()}
    nn.save_checkpoint(tmp_path / "ck", tensors, {"note": "x"})
    back, meta = nn.load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "x"} and set(back) == set(tensors)
    assert all(np.array_equal(back[n], tensors[n]) for n in tensors)


def test_arch_dict_round_trip():
    assert nn.arch_from_dict(nn.arch_to_dict(ARCH)) == ARCH
