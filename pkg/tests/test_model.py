import numpy as np
import pytest

from lesiontokens import diffcore as dc
from lesiontokens.diffcore import Tensor, gradcheck
from lesiontokens.levelset import signed_distance
from lesiontokens.losses import LossWeights, arc_loss, labeled_loss
from lesiontokens.model import (
    ModelConfig,
    MultiTaskTokenNet,
    Stem,
    TransformerLayer,
)


def tiny_config(**overrides):
    params = dict(input_size=16, stem_channels=[2, 3, 3, 4], embed_dim=8, heads=2, layers=1,
                  num_classes=3, decode_channels=[3, 2, 2, 2])
    params.update(overrides)
    return ModelConfig(**params)


def jitter_biases(module, seed):
    """Zero-initialised biases put dead-ReLU pixels exactly on the kink; move off it."""
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data += rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1, 1], p.shape)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=60)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=-1)
    assert ModelConfig().token_grid == 4
    assert ModelConfig(input_size=224).token_grid == 14


# --------------------------------------------------------------- stem
def test_stem_shapes():
    net = MultiTaskTokenNet(ModelConfig())
    feats, skips = net.stem_encode(Tensor(np.zeros((1, 3, 64, 64))))
    assert feats.shape == (1, 128, 4, 4)
    assert [s.shape[-2:] for s in skips] == [(32, 32), (16, 16), (8, 8)]
    assert np.all(np.isfinite(feats.data))


def test_stem_gradient():
    rng = np.random.default_rng(0)
    stem = Stem(rng, 1, [2, 2, 2, 2])
    image = Tensor(rng.standard_normal((1, 1, 16, 16)), requires_grad=True)
    weights = Tensor(rng.standard_normal((1, 2, 1, 1)))

    def f(x):
        out, skips = stem(x)
        return (out * weights).sum() + sum(s.mean() for s in skips)

    assert gradcheck(f, image).max_rel_err < 1e-5
    params = list(stem.parameters())
    assert gradcheck(lambda *p: f(image), params, max_entries=8).max_rel_err < 1e-5


# --------------------------------------------------------------- tokens
def test_tokenize_layout_and_zero_class_token():
    net = MultiTaskTokenNet(ModelConfig(embed_dim=32))
    feats = Tensor(np.random.default_rng(1).standard_normal((1, 128, 4, 4)))
    tokens = net.tokenize(feats)
    assert tokens.shape == (1, 17, 32)
    np.testing.assert_array_equal(tokens.data[0, -1], 0.0)
    # cell (r, c) is token r * G + c
    expected = feats.data[0, :, 2, 3] @ net.embed.data
    np.testing.assert_allclose(tokens.data[0, 2 * 4 + 3], expected, atol=1e-12)


def test_tokens_permute_with_cells():
    net = MultiTaskTokenNet(tiny_config(input_size=32))
    feats = np.random.default_rng(2).standard_normal((1, 4, 2, 2))
    perm = np.random.default_rng(3).permutation(4)
    flat = feats.reshape(1, 4, 4)[:, :, perm].reshape(1, 4, 2, 2)
    a = net.tokenize(Tensor(feats)).data
    b = net.tokenize(Tensor(flat)).data
    np.testing.assert_allclose(b[0, :4], a[0, perm], atol=1e-12)
    np.testing.assert_array_equal(b[0, 4], a[0, 4])


# --------------------------------------------------------------- transformer layer
def test_attention_rows_are_distributions():
    rng = np.random.default_rng(4)
    layer = TransformerLayer(rng, 16, 4)
    _, weights = layer(Tensor(rng.standard_normal((2, 10, 16)) * 3))
    assert weights.shape == (2, 4, 10, 10)
    assert np.all(weights.data >= 0)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)


def test_residual_identity_with_zeroed_outputs():
    rng = np.random.default_rng(5)
    layer = TransformerLayer(rng, 8, 2)
    for p in (layer.proj.weight, layer.proj.bias, layer.fc2.weight, layer.fc2.bias):
        p.data[...] = 0.0
    z = rng.standard_normal((1, 5, 8))
    out, _ = layer(Tensor(z))
    np.testing.assert_array_equal(out.data, z)


def test_transformer_layer_gradient():
    rng = np.random.default_rng(6)
    layer = TransformerLayer(rng, 8, 2)
    z = Tensor(rng.standard_normal((1, 5, 8)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 5, 8)))
    f = lambda *args: (layer(z)[0] * probe).sum()
    assert gradcheck(f, [z]).max_rel_err < 1e-5
    assert gradcheck(f, list(layer.parameters())).max_rel_err < 1e-5


def test_permutation_equivariance_through_layers():
    cfg = tiny_config(input_size=64, layers=3)
    net = MultiTaskTokenNet(cfg, seed=7)
    rng = np.random.default_rng(8)
    tokens = rng.standard_normal((1, 17, 8))
    perm = np.append(rng.permutation(16), 16)
    out, _ = net.encode_tokens(Tensor(tokens))
    out_p, _ = net.encode_tokens(Tensor(tokens[:, perm]))
    inverse = np.argsort(perm)
    np.testing.assert_allclose(out_p.data[:, inverse][:, :16], out.data[:, :16], rtol=0, atol=1e-9)


# --------------------------------------------------------------- decoder / classifier
def test_decoder_shapes_and_tanh_bound():
    net = MultiTaskTokenNet(ModelConfig(), seed=1)
    out = net(np.random.default_rng(9).uniform(0, 1, (2, 3, 64, 64)))
    assert out.mask_logits.shape == (2, 2, 64, 64)
    assert out.level_set.shape == (2, 64, 64)
    assert np.all(np.abs(out.level_set.data) < 1)
    # huge activations saturate tanh to +-1 in floating point, never beyond
    loud = net(np.random.default_rng(9).uniform(0, 1, (1, 3, 64, 64)) * 1e4)
    assert np.all(np.abs(loud.level_set.data) <= 1)


def test_decoder_gradient():
    cfg = tiny_config()
    net = MultiTaskTokenNet(cfg, seed=2)
    jitter_biases(net, 2)
    rng = np.random.default_rng(10)
    _, skips = net.stem_encode(Tensor(rng.standard_normal((1, 3, 16, 16))))
    skips = [Tensor(s.data) for s in skips]
    seg = Tensor(rng.standard_normal((1, 1, 8)), requires_grad=True)
    pm, pl = Tensor(rng.standard_normal((1, 2, 16, 16))), Tensor(rng.standard_normal((1, 16, 16)))

    def f(*args):
        m, L = net.decoder(seg, skips)
        return (m * pm).sum() + (L * pl).sum()

    assert gradcheck(f, [seg]).max_rel_err < 1e-5
    assert gradcheck(f, list(net.decoder.parameters()), max_entries=10).max_rel_err < 1e-5


def test_classifier_zero_input_gives_bias_and_gradient():
    net = MultiTaskTokenNet(tiny_config(), seed=3)
    np.testing.assert_array_equal(net.classifier(Tensor(np.zeros((1, 8)))).data[0], net.classifier.bias.data)
    x = Tensor(np.random.default_rng(11).standard_normal((2, 8)), requires_grad=True)
    assert gradcheck(lambda x: (net.classifier(x) ** 2).sum(), x).max_rel_err < 1e-6


# --------------------------------------------------------------- forward
@pytest.mark.parametrize("layers", [0, 1, 4, 8])
def test_forward_contract(layers):
    cfg = tiny_config(input_size=32, layers=layers)
    out = MultiTaskTokenNet(cfg, seed=4)(np.random.default_rng(12).uniform(0, 1, (3, 32, 32)))
    assert out.mask_logits.shape == (1, 2, 32, 32)
    assert out.level_set.shape == (1, 32, 32)
    assert out.class_logits.shape == (1, 3)
    assert out.cls_attention.shape == (1, 4)
    assert abs(out.cls_attention.data.sum() - 1) < 1e-6
    assert len(out.attentions) == layers
    for att in out.attentions:
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)


def test_forward_rejects_bad_size():
    net = MultiTaskTokenNet(tiny_config())
    with pytest.raises(dc.DimensionError):
        net(np.zeros((1, 3, 20, 20)))


def test_forward_is_bitwise_deterministic():
    image = np.random.default_rng(13).uniform(0, 1, (2, 3, 64, 64))
    runs = []
    for _ in range(2):
        with dc.single_threaded():
            out = MultiTaskTokenNet(ModelConfig(), seed=5)(image)
        runs.append((out.mask_logits.data, out.level_set.data, out.class_logits.data))
    for a, b in zip(*runs):
        assert a.tobytes() == b.tobytes()


def test_end_to_end_labeled_loss_gradient():
    cfg = tiny_config(input_size=32, layers=2)
    net = MultiTaskTokenNet(cfg, seed=6)
    jitter_biases(net, 6)
    rng = np.random.default_rng(14)
    image = rng.uniform(0, 1, (1, 3, 32, 32))
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:24, 6:22] = 1
    level = signed_distance(mask)
    # mild k keeps the DTC sigmoid in its smooth range at eps scale
    weights = LossWeights(k=5.0, rampup_length=1.0)
    no_arc = LossWeights(k=5.0, rampup_length=1.0, arc=0.0)
    # the attention-consistency target is detached in training, so the oracle holds it fixed too
    frozen = Tensor(net(image).mask_logits.data.copy())

    def f(*params):
        out = net(image)
        total, _ = labeled_loss(out, mask[None], level[None], np.array([2]), no_arc, t=1.0)
        return total + arc_loss(out.cls_attention, frozen) * weights.arc

    expected, _ = labeled_loss(net(image), mask[None], level[None], np.array([2]), weights, t=1.0)
    assert f().item() == pytest.approx(expected.item(), rel=1e-12)
    report = gradcheck(f, list(net.parameters()), max_entries=6, tol=1e-4)
    assert report.max_rel_err < 1e-4, report.per_input

    # and the shipped objective produces exactly those analytic gradients
    net.zero_grad()
    dc.backward(expected)
    got = [p.grad.copy() for p in net.parameters()]
    net.zero_grad()
    dc.backward(f())
    for a, p in zip(got, net.parameters()):
        np.testing.assert_allclose(a, p.grad, rtol=1e-10, atol=1e-14)
