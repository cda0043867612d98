import numpy as np
import pytest
import torch
from torch import nn

from _oracles import fd_relative_error
from vesrec.model import (
    GROUPS, FusedEncoder, ParamPartition, fuse_features, get_backbone, init_params, load_model, save_model,
)


@pytest.fixture(scope="module")
def net():
    return init_params("toy", seed=0).eval()


def _toy_param_count():
    conv = lambda k, cin, cout, bias=False: k * k * cin * cout + (cout if bias else 0)
    bn = lambda c: 2 * c
    encoder = conv(3, 3, 32) + bn(32) + conv(3, 32, 64) + bn(64) + conv(3, 64, 32) + bn(32)
    decoder = conv(3, 32, 64) + bn(64) + conv(4, 64, 32) + bn(32) + conv(4, 32, 3, bias=True)
    discriminator = encoder + 32 + 1
    classifier = 32 * 5 + 5
    return encoder + decoder + discriminator + classifier


def test_param_count_matches_registry(net):
    assert sum(p.numel() for p in net.parameters()) == _toy_param_count() == get_backbone("toy").param_count


def test_shapes(net):
    x = torch.rand(2, 3, 32, 32)
    feat = net.encode(x)
    assert feat.shape == (2, 32, 8, 8)
    out = net.decode(feat)
    assert out.shape == (2, 3, 32, 32)
    assert out.min() >= 0 and out.max() <= 1
    assert torch.isfinite(net.encode(torch.zeros(1, 3, 32, 32))).all()


def test_size_and_channel_errors(net):
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 3, 8, 8))
    with pytest.raises(ValueError):
        net.encode(torch.rand(1, 3, 32, 24))
    with pytest.raises(ValueError):
        net.decode(torch.rand(1, 16, 8, 8))
    with pytest.raises(ValueError):
        get_backbone("vgg")


def test_eval_determinism(net):
    x = torch.rand(2, 3, 32, 32)
    for fn in (net.encode, net.reconstruct, net.discriminate, net.predict_proba):
        assert torch.equal(fn(x), fn(x))


def test_same_seed_same_params():
    a, b = init_params("toy", 5), init_params("toy", 5)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    assert not torch.equal(init_params("toy", 6).encoder[0][0].weight, a.encoder[0][0].weight)


def test_zero_heads(net):
    z = init_params("toy", 1).eval()
    with torch.no_grad():
        z.discriminator.head.weight.zero_()
        z.discriminator.head.bias.zero_()
        z.classifier.fc.weight.zero_()
        z.classifier.fc.bias.zero_()
    x = torch.rand(3, 3, 32, 32)
    assert torch.allclose(z.discriminate(x), torch.full((3,), 0.5))
    assert torch.allclose(z.predict_proba(x), torch.full((3, 5), 0.2))


def test_discriminator_open_interval(net):
    d = net.discriminate(torch.rand(4, 3, 32, 32) * 100)
    assert ((d > 0) & (d < 1)).all()


def test_classify_pooling_invariance(net):
    const = torch.full((1, 32, 8, 8), 0.37)
    assert torch.allclose(net.classify(const), net.classify(torch.full((1, 32, 1, 1), 0.37)))
    p = net.classify(torch.randn(6, 32, 8, 8))
    assert torch.allclose(p.sum(1), torch.ones(6), atol=1e-6) and (p >= 0).all()


def test_fusion():
    a, b = torch.randn(2, 32, 8, 8), torch.randn(2, 64, 4, 4)
    fused = fuse_features(a, b)
    assert fused.shape == (2, 96, 1, 1)
    for n in range(2):
        for c in range(32):
            assert torch.isclose(fused[n, c, 0, 0], a[n, c].sum() / 64)
        for c in range(64):
            assert torch.isclose(fused[n, 32 + c, 0, 0], b[n, c].sum() / 16)
    dup = fuse_features(a, a)
    assert torch.equal(dup[:, :32], dup[:, 32:])
    enc = FusedEncoder("toy", "toy")
    assert enc(torch.rand(1, 3, 32, 32)).shape == (1, enc.channels, 1, 1)


def test_partition_disjoint(net):
    part = ParamPartition.from_module(net)
    names = [set(part.names(g)) for g in GROUPS]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not names[i] & names[j]
    assert set().union(*names) == {n for n, p in net.named_parameters() if p.requires_grad}


@pytest.mark.parametrize("backbone", ["resnet50_shape", "densenet121_shape"])
def test_full_size_round_trip(backbone):
    n = init_params(backbone, 0).eval()
    spec = get_backbone(backbone)
    feat = n.encode(torch.rand(1, 3, 64, 64))
    assert feat.shape == (1, spec.channels, 2, 2)
    assert n.decode(feat).shape == (1, 3, 64, 64)


def test_decoder_gradient_fd():
    n = init_params("toy", 2).double().train()
    feat = torch.randn(2, 32, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    err, skipped = fd_relative_error(lambda: n.decode(feat).sum(), n.decoder.parameters(), n=100, step=1e-3,
                                     seed=0, watch_module=n)
    assert skipped <= 100
    assert err <= 1e-3


def test_checkpoint_round_trip(tmp_path, net):
    save_model(tmp_path / "m.npz", net, image_size=32, seed=0, step=7)
    back, meta = load_model(tmp_path / "m.npz")
    assert meta["step"] == 7 and meta["backbone"] == "toy"
    for (k, v), (k2, v2) in zip(net.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v.float() if v.is_floating_point() else v, v2)
    with np.load(tmp_path / "m.npz") as z:
        assert all(z[k].dtype.str in ("<f4", "<i8", "<U0") or k == "__meta__" for k in z.files)
