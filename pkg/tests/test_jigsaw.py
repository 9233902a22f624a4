import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from csaw.jigsaw import (PatchPermutation, apply_jigsaw, denormalize, inverse, load_image, normalize,
                         sample_permutation, to_uint8_image)


def _patch_copy_oracle(img, grid, perm):
    """Slot i (row-major) receives source patch perm[i], copied pixel by pixel."""
    h, w = img.shape[-2:]
    ph, pw = h // grid, w // grid
    out = np.empty_like(img)
    for slot, src in enumerate(perm):
        sr, sc = divmod(src, grid)
        dr, dc = divmod(slot, grid)
        for y in range(ph):
            for x in range(pw):
                out[..., dr * ph + y, dc * pw + x] = img[..., sr * ph + y, sc * pw + x]
    return out


def test_grid_one_is_always_identity():
    for s in range(20):
        assert sample_permutation(1, s).perm == (0,)


@given(st.sampled_from([1, 2, 4, 7]), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_sample_is_a_bijection(grid, seed):
    p = sample_permutation(grid, seed)
    assert sorted(p.perm) == list(range(grid * grid))


def test_grid_two_frequencies_are_uniform():
    n = 24000
    counts = {}
    rng = np.random.default_rng(99)
    for s in rng.integers(0, 2**63, size=n):
        key = sample_permutation(2, int(s)).perm
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == math.factorial(4)
    expected = n / 24
    sigma = math.sqrt(n * (1 / 24) * (23 / 24))
    worst = max(abs(c - expected) for c in counts.values())
    assert worst < 4 * sigma, (worst, sigma)


def test_exclude_identity():
    for s in range(200):
        assert not sample_permutation(2, s, exclude_identity=True).is_identity()


def test_per_sample_streams_are_reproducible():
    assert sample_permutation(4, [1, 3, 17]) == sample_permutation(4, [1, 3, 17])
    assert sample_permutation(4, [1, 3, 17]) != sample_permutation(4, [1, 3, 18])


def test_four_by_four_manual_oracle():
    img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    p = PatchPermutation(2, (1, 0, 3, 2))
    expected = np.array([[2, 3, 0, 1], [6, 7, 4, 5], [10, 11, 8, 9], [14, 15, 12, 13]], dtype=np.float32)
    np.testing.assert_array_equal(_patch_copy_oracle(img, 2, p.perm)[0], expected)
    np.testing.assert_array_equal(apply_jigsaw(img, p)[0], expected)
    np.testing.assert_array_equal(apply_jigsaw(torch.from_numpy(img), p)[0].numpy(), expected)


@pytest.mark.parametrize("grid", [2, 4, 7])
def test_matches_patch_copy_oracle_on_random_images(grid, rng):
    img = rng.standard_normal((3, 28, 28)).astype(np.float32)
    p = sample_permutation(grid, 5)
    np.testing.assert_array_equal(apply_jigsaw(img, p), _patch_copy_oracle(img, grid, p.perm))


def test_identity_is_bit_exact(rng):
    x = torch.from_numpy(rng.standard_normal((2, 3, 224, 224)))
    assert torch.equal(apply_jigsaw(x, PatchPermutation.identity(4)), x)


def test_inverse_examples():
    assert inverse(PatchPermutation.identity(4)).is_identity()
    assert inverse(PatchPermutation(2, (1, 0, 3, 2))).perm == (1, 0, 3, 2)
    p = sample_permutation(4, 11)
    assert inverse(inverse(p)) == p
    q = inverse(p)
    assert all(p.perm[q.perm[i]] == i for i in range(16))


def test_rejects_bad_permutations():
    with pytest.raises(ValueError):
        PatchPermutation(2, (0, 0, 1, 2))
    with pytest.raises(ValueError):
        PatchPermutation(3, tuple(range(9)))
    with pytest.raises(ValueError):
        apply_jigsaw(np.zeros((3, 10, 10)), PatchPermutation.identity(4))


def test_load_image_shape_and_roundtrip(synthetic):
    x = load_image(synthetic.path(0))
    assert x.shape == (3, 224, 224) and x.dtype == torch.float32
    back = denormalize(normalize(denormalize(x)))
    assert torch.allclose(back, denormalize(x), atol=1e-6)
    u8 = to_uint8_image(x)
    assert u8.shape == (224, 224, 3) and u8.dtype == np.uint8
