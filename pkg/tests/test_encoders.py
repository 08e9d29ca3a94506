import numpy as np
import pytest
import torch
from torch import nn

from daml.encoders import (CONVOLUTIONAL, PATCH_ATTENTION, EncoderConfig, build_encoder,
                           check_heterogeneous, extract_features, load_checkpoint,
                           receptive_field_check, save_checkpoint, student_config,
                           teacher_config, to_tensor)
from daml.errors import InvalidConfig, ShapeMismatch
from oracles import relative_error

SIZE = (32, 16)


def toy_pair():
    t = teacher_config(SIZE, feature_dim=12, depth=2, width=4)
    s = student_config(SIZE, feature_dim=10, depth=1, width=8, heads=2)
    return t, s


def images(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, *SIZE, 3), dtype=np.uint8)


@pytest.mark.parametrize("which", [0, 1])
def test_feature_shapes_and_dtype(which):
    cfg = toy_pair()[which]
    feats = extract_features(build_encoder(cfg, seed=0), images(5))
    assert feats.shape == (5, cfg.feature_dim)
    assert feats.dtype == np.float64
    assert np.isfinite(feats).all()


@pytest.mark.parametrize("which", [0, 1])
def test_same_seed_same_weights(which):
    cfg = toy_pair()[which]
    a = extract_features(build_encoder(cfg, seed=4), images(3))
    b = extract_features(build_encoder(cfg, seed=4), images(3))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("which", [0, 1])
def test_eval_features_do_not_depend_on_batch_order(which):
    enc = build_encoder(toy_pair()[which], seed=1)
    x = images(7)
    perm = np.random.default_rng(2).permutation(7)
    a = extract_features(enc, x)
    b = extract_features(enc, x[perm])
    assert np.allclose(a[perm], b, atol=1e-5)
    c = extract_features(enc, x, batch_size=2)
    assert np.allclose(a, c, atol=1e-5)


def test_extract_restores_training_mode():
    enc = build_encoder(toy_pair()[0], seed=0)
    enc.train()
    extract_features(enc, images(2))
    assert enc.training


def test_wrong_input_shape_raises():
    enc = build_encoder(toy_pair()[1], seed=0)
    with pytest.raises(ShapeMismatch):
        extract_features(enc, np.zeros((2, 16, 16, 3), np.uint8))
    with pytest.raises(ShapeMismatch):
        enc(torch.zeros(2, 1, *SIZE))


def test_equal_feature_dims_rejected():
    t = teacher_config(SIZE, feature_dim=16, depth=2, width=4)
    s = student_config(SIZE, feature_dim=16, depth=1, width=8, heads=2)
    with pytest.raises(InvalidConfig):
        check_heterogeneous(t, s)
    check_heterogeneous(*toy_pair())


def test_config_validation():
    with pytest.raises(InvalidConfig):
        EncoderConfig("recurrent", 8)
    with pytest.raises(InvalidConfig):
        student_config((30, 16), patch_size=8)
    with pytest.raises(InvalidConfig):
        EncoderConfig(CONVOLUTIONAL, 8, depth=2, strides=(1,))


def test_default_dims_differ():
    assert teacher_config().feature_dim != student_config().feature_dim


def test_receptive_field_examples():
    conv2 = EncoderConfig(CONVOLUTIONAL, 8, depth=2, kernel_size=3)
    assert receptive_field_check(conv2)["final"] == (5, 5)
    conv0 = EncoderConfig(CONVOLUTIONAL, 8, depth=0)
    assert receptive_field_check(conv0)["final"] == (1, 1)
    attn = EncoderConfig(PATCH_ATTENTION, 8, depth=1, width=8, heads=2, image_size=SIZE)
    assert receptive_field_check(attn)["final"] == "global"


def _support(module, shape, out_index):
    x = torch.zeros(1, *shape, dtype=torch.float64, requires_grad=True)
    out = module(x)
    out[(0, 0) + out_index].backward()
    nz = torch.nonzero(x.grad[0].abs().sum(0))
    return tuple((nz.max(0).values - nz.min(0).values + 1).tolist())


def test_receptive_field_matches_gradient_support():
    cfg = EncoderConfig(CONVOLUTIONAL, 8, depth=3, width=2, image_size=SIZE)
    enc = build_encoder(cfg, seed=0).double()
    # measure the conv stack alone: the instance norm would make every pixel contribute
    convs = nn.Sequential(*[m for m in enc.backbone.body if isinstance(m, nn.Conv2d)])
    with torch.no_grad():
        for conv in convs:
            conv.weight.copy_(conv.weight.abs() + 0.1)
    expected = receptive_field_check(cfg)["final"]
    assert _support(convs, (3, *SIZE), (4, 2)) == expected


def test_attention_output_sees_every_pixel():
    cfg = EncoderConfig(PATCH_ATTENTION, 8, depth=1, width=8, heads=2, image_size=SIZE)
    enc = build_encoder(cfg, seed=0).double().eval()
    x = torch.zeros(1, 3, *SIZE, dtype=torch.float64, requires_grad=True)
    enc(x)[0, 0].backward()
    per_patch = x.grad[0].abs().sum(0).reshape(4, 8, 2, 8).sum((1, 3))
    assert (per_patch > 0).all()


def test_to_tensor_normalization():
    x = to_tensor(np.array([[[[0, 255, 127]]]], np.uint8))
    assert x.shape == (1, 3, 1, 1)
    assert torch.allclose(x.flatten(), torch.tensor([-1.0, 1.0, 127 / 127.5 - 1]))


@pytest.mark.parametrize("which", [0, 1])
def test_parameter_gradients_match_finite_differences(which):
    enc = build_encoder(toy_pair()[which], seed=3).double().eval()
    x = to_tensor(images(3, seed=5), torch.float64)
    weights = torch.randn(3, enc.feature_dim, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(0))

    def objective():
        return (enc(x) * weights).sum()

    enc.zero_grad()
    objective().backward()
    rng = np.random.default_rng(0)
    for name, p in enc.named_parameters():
        flat = p.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False)
        numeric = []
        for i in picks:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + 1e-6
                up = objective().item()
                flat[i] = old - 1e-6
                down = objective().item()
                flat[i] = old
            numeric.append((up - down) / 2e-6)
        analytic = p.grad.view(-1)[picks].numpy()
        assert relative_error(analytic, numeric) < 1e-3 or np.abs(analytic).max() < 1e-9, name


def test_checkpoint_roundtrip(tmp_path):
    enc = build_encoder(toy_pair()[0], seed=0)
    prefix = str(tmp_path / "ck" / "enc")
    save_checkpoint(prefix, {"enc": enc.state_dict()}, {"config": enc.config.to_dict(),
                                                        "step": np.int64(3)})
    tensors, side = load_checkpoint(prefix + ".pt")
    other = build_encoder(EncoderConfig(**side["config"]), seed=9)
    other.load_state_dict(tensors["enc"])
    assert side["step"] == 3
    assert np.array_equal(extract_features(enc, images(2)), extract_features(other, images(2)))
