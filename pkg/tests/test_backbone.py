from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stonefuse.backbone import (
    BACKBONES,
    AttentionGate,
    ClassifierHead,
    SingleViewModel,
    apply_attention,
    build_backbone,
    classify,
    forward_features,
    torchvision_key_map,
)
from stonefuse.errors import ConfigError, ShapeError


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _resnet_trace(size: int, widths=(256, 512, 1024, 2048)) -> dict[str, tuple[int, int, int]]:
    # stem: 7x7/2 conv (pad 3) then 3x3/2 max-pool (pad 1); stages 2..4 stride 2
    n = _conv_out(_conv_out(size, 7, 2, 3), 3, 2, 1)
    out = {}
    for i, c in enumerate(widths):
        if i:
            n = _conv_out(n, 3, 2, 1)
        out[f"layer{i + 1}"] = (c, n, n)
    return out


@pytest.fixture(scope="module")
def resnet50():
    torch.manual_seed(0)
    return build_backbone("resnet50")


def test_resnet50_shape_contract(resnet50):
    x = torch.randn(4, 3, 256, 256)
    feats, emb = forward_features(resnet50, x, patch_size=256)
    expected = _resnet_trace(256)
    assert {k: tuple(v.shape[1:]) for k, v in feats.items()} == expected
    assert tuple(emb.shape) == (4, 2048)
    assert resnet50.embedding_dim == 2048
    assert resnet50.stage_channels == {k: v[0] for k, v in expected.items()}


def test_inference_is_deterministic(resnet50):
    x = torch.randn(2, 3, 64, 64)
    _, a = forward_features(resnet50, x)
    _, b = forward_features(resnet50, x)
    assert torch.equal(a, b)
    assert resnet50.training  # restored


def test_empty_batch_and_bad_channels(resnet50):
    _, emb = forward_features(resnet50, torch.zeros(0, 3, 64, 64))
    assert tuple(emb.shape) == (0, 2048)
    with pytest.raises(ShapeError):
        forward_features(resnet50, torch.zeros(2, 1, 64, 64))
    with pytest.raises(ShapeError):
        forward_features(resnet50, torch.zeros(2, 3, 64, 64), patch_size=32)


def test_registry():
    assert {"resnet50", "resnet18", "tiny"} <= set(BACKBONES)
    with pytest.raises(ConfigError):
        build_backbone("vgg-nope")
    tiny = build_backbone("tiny")
    feats, emb = forward_features(tiny, torch.randn(3, 3, 32, 32))
    assert list(feats) == tiny.stage_names
    assert emb.shape == (3, tiny.embedding_dim)


def test_torchvision_key_map():
    import torchvision

    state = torchvision.models.resnet18(weights=None).state_dict()
    mapped = torchvision_key_map(state)
    bb = build_backbone("resnet18")
    missing, unexpected = bb.load_state_dict(mapped, strict=False)
    assert not missing and not unexpected


# ---------------------------------------------------------------- head


def test_zero_head_uniform():
    head = ClassifierHead(8, 6)
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    p = classify(head, torch.randn(8))
    assert torch.allclose(p, torch.full((6,), 1 / 6), atol=1e-7, rtol=0)


def test_head_dimension_error():
    with pytest.raises(ShapeError):
        classify(ClassifierHead(8, 6), torch.randn(7))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 64), k=st.integers(2, 10))
def test_softmax_sums_to_one(seed, dim, k):
    torch.manual_seed(seed)
    head = ClassifierHead(dim, k)
    p = classify(head, torch.randn(5, dim) * 10).double().numpy()
    assert (p >= 0).all()
    # independent summation in Python floats
    for row in p:
        assert abs(sum(float(v) for v in row) - 1.0) <= 1e-6


def test_head_describe():
    d = ClassifierHead(16, 3, dropout=0.3).describe()
    assert d["input_dim"] == 16 and d["num_classes"] == 3
    assert d["layers"][0] == {"type": "dropout", "p": 0.3}


def test_head_gradient_finite_difference():
    torch.manual_seed(0)
    head = ClassifierHead(5, 3, dropout=0.0).double()
    x = torch.randn(4, 5, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 2])

    def loss_fn():
        return torch.nn.functional.cross_entropy(head(x), y)

    loss_fn().backward()
    analytic = {n: p.grad.clone() for n, p in head.named_parameters()}
    eps = 1e-6
    for name, p in head.named_parameters():
        num = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            num.view(-1)[i] = (up - down) / (2 * eps)
        rel = (num - analytic[name]).abs().max() / analytic[name].abs().max().clamp_min(1e-12)
        assert rel < 1e-4, name


# ---------------------------------------------------------------- attention


def test_gate_values_in_open_interval():
    torch.manual_seed(1)
    g = AttentionGate(32)
    v = g.gate_values(torch.randn(4, 32, 5, 5))
    assert ((v > 0) & (v < 1)).all()


def test_pinned_gate_is_identity():
    g = AttentionGate(32)
    g.pin_open()
    x = torch.randn(3, 32, 6, 6)
    assert torch.equal(apply_attention(g, x), x)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.sampled_from([16, 32, 48]))
def test_attention_contracts(seed, c):
    torch.manual_seed(seed)
    g = AttentionGate(c)
    x = torch.randn(2, c, 4, 4) * 5
    out = apply_attention(g, x)
    assert out.shape == x.shape
    # elementwise recheck of out = gate * x with gate in (0, 1)
    gate = g.gate_values(x)[:, :, None, None]
    assert torch.equal(out, x * gate)
    assert (out.abs() <= x.abs()).all()
    assert torch.equal(apply_attention(g, torch.zeros(1, c, 3, 3)), torch.zeros(1, c, 3, 3))


def test_attention_channel_mismatch():
    with pytest.raises(ShapeError):
        apply_attention(AttentionGate(16), torch.randn(1, 8, 4, 4))


def test_single_view_model_reset_head():
    m = SingleViewModel(build_backbone("tiny"), 6, list("abcdef"))
    m.reset_head(list("xyz"))
    assert m.head.num_classes == 3 and m.class_names == ["x", "y", "z"]
    assert m(torch.randn(2, 3, 16, 16)).shape == (2, 3)
    with pytest.raises(ConfigError):
        SingleViewModel(build_backbone("tiny"), 6, ["a"])


def test_forward_features_accepts_numpy():
    _, emb = forward_features(build_backbone("tiny"), np.zeros((1, 3, 16, 16), dtype=np.float32))
    assert emb.shape == (1, 128)
