import math

import numpy as np
import pytest
import torch

from csaw.vatp import (VatGenerator, ape, assemble_prompts, compute_style_stats, init_context, predict_probs,
                       similarity_logits, visual_attentive_tokens)


def test_style_stats_nested_loop_oracle(rng):
    f = rng.standard_normal((2, 2, 2, 3))
    expected = np.zeros(3)
    for c in range(3):
        acc = 0.0
        for b in range(2):
            for i in range(2):
                for j in range(2):
                    acc += f[b, i, j, c]
        expected[c] = acc / 8
    got = compute_style_stats([torch.from_numpy(f)])[0].numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def test_style_stats_trivial_cases():
    m = torch.randn(1, 5, 5, 4)
    np.testing.assert_allclose(compute_style_stats([m.expand(3, -1, -1, -1)])[0], m.mean(dim=(0, 1, 2)),
                               atol=1e-6)
    assert torch.equal(compute_style_stats([torch.zeros(2, 3, 3, 4)])[0], torch.zeros(4))
    with pytest.raises(ValueError, match="empty batch"):
        compute_style_stats([torch.zeros(0, 3, 3, 4)])


def _generator(bias):
    torch.manual_seed(0)
    gen = VatGenerator([3, 5], d_t=8, reduction=4)
    with torch.no_grad():
        gen.mask[2].weight.zero_()
        gen.mask[2].bias.fill_(bias)
    return gen


def test_mask_closed_passes_style_through():
    gen = _generator(-20.0)
    stats = [torch.randn(3, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]
    gen = gen.double()
    s = gen.project(stats)
    torch.testing.assert_close(gen(stats), s, rtol=0, atol=1e-6 * (1 + s.abs().max().item()))


def test_mask_open_doubles_style():
    gen = _generator(20.0).double()
    stats = [torch.randn(3, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]
    s = gen.project(stats)
    torch.testing.assert_close(gen(stats), 2 * s, rtol=0, atol=1e-6 * (1 + s.abs().max().item()))


def test_elementwise_oracle(rng):
    torch.manual_seed(1)
    gen = VatGenerator([4, 4], d_t=6).double()
    stats = [torch.from_numpy(rng.standard_normal(4)), torch.from_numpy(rng.standard_normal(4))]
    s = gen.project(stats).detach().numpy()
    w1, b1 = gen.mask[0].weight.detach().numpy(), gen.mask[0].bias.detach().numpy()
    w2, b2 = gen.mask[2].weight.detach().numpy(), gen.mask[2].bias.detach().numpy()
    expected = np.empty_like(s)
    for layer in range(2):
        hidden = np.maximum(0, w1 @ s[layer] + b1)
        a = 1 / (1 + np.exp(-(w2 @ hidden + b2)))
        for k in range(6):
            expected[layer, k] = a[k] * s[layer, k] + s[layer, k]
    np.testing.assert_allclose(visual_attentive_tokens(stats, gen).detach().numpy(), expected, rtol=1e-12)


def test_generator_validation():
    gen = VatGenerator([3, 5], d_t=8)
    with pytest.raises(ValueError, match="projectors"):
        gen([torch.zeros(3)])
    with pytest.raises(ValueError, match="width"):
        gen([torch.zeros(3), torch.zeros(4)])


def test_init_context_from_text(standin):
    ctx = init_context(standin, 4, "a photo of a")
    torch.testing.assert_close(ctx, standin.token_embed("a photo of a")[1:-1])
    noise = init_context(standin, 3, "a photo of a", seed=2)
    assert noise.shape == (3, standin.d_t) and noise.std() < 0.05


def test_assemble_zero_tokens_equals_plain_context(standin):
    ctx = torch.randn(2, standin.d_t)
    parts = [standin.prompt_parts(n) for n in ("red", "green", "blue")]
    plain = assemble_prompts(ctx, None, parts, standin)
    zero = assemble_prompts(ctx, torch.zeros_like(ctx), parts, standin)
    assert plain.shape == (3, standin.d_v)
    torch.testing.assert_close(plain, zero)


def test_assemble_hand_computed(standin):
    ctx = torch.full((1, standin.d_t), 0.25, dtype=torch.float64)
    v = torch.linspace(-1, 1, standin.d_t, dtype=torch.float64)[None]
    table = standin.token_table.detach().double().numpy()
    proj = standin.proj.detach().double().numpy()
    word = table[standin._token_id("olive")]
    expected = ((table[0] + (ctx + v).numpy()[0] + word + table[1]) / 4) @ proj.T
    bb = standin
    parts = [tuple(t.double() for t in bb.prompt_parts("olive"))]
    seqs = assemble_prompts(ctx, v, parts, _DoubleText(bb))
    np.testing.assert_allclose(seqs[0].numpy(), expected, rtol=1e-12)


class _DoubleText:
    """Stand-in text tower evaluated in float64."""

    def __init__(self, bb):
        self.proj = bb.proj.detach().double()

    def text_encode(self, seqs, names=None):
        return torch.stack([s.mean(0) for s in seqs]) @ self.proj.T


def test_assemble_errors(standin):
    with pytest.raises(ValueError, match="no classes"):
        assemble_prompts(torch.zeros(2, 16), None, [], standin)
    with pytest.raises(ValueError, match="do not match"):
        assemble_prompts(torch.zeros(2, 16), torch.zeros(3, 16), [standin.prompt_parts("red")], standin)


def test_ape(rng):
    a = torch.from_numpy(rng.standard_normal((4, 8)))
    b = torch.from_numpy(rng.standard_normal((4, 8)))
    np.testing.assert_allclose(ape(a, b).numpy(), (a.numpy() + b.numpy()) / 2, rtol=0, atol=0)
    assert torch.equal(ape(a, b), ape(b, a))
    assert torch.equal(ape(a, a), a)


def test_closed_form_softmax():
    img = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    cls = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = predict_probs(img, cls, 0.5)[0].numpy()
    e2 = math.exp(2)
    np.testing.assert_allclose(p, [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-12)
    np.testing.assert_allclose(p, [0.8808, 0.1192], atol=5e-5)


def test_identical_classes_give_uniform():
    img = torch.randn(3, 5, dtype=torch.float64)
    cls = torch.randn(1, 5, dtype=torch.float64).expand(4, -1)
    torch.testing.assert_close(predict_probs(img, cls, 0.01), torch.full((3, 4), 0.25, dtype=torch.float64))


def test_similarity_logits_validation():
    with pytest.raises(ValueError, match="temperature"):
        similarity_logits(torch.ones(1, 2), torch.ones(1, 2), 0.0)
    with pytest.raises(ValueError, match="zero-norm"):
        similarity_logits(torch.zeros(1, 2), torch.ones(1, 2), 1.0)
