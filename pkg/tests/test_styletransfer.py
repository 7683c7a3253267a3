import math

import numpy as np
import pytest

from icestyle.dataset import LabeledImage, load_manifest
from icestyle.styletransfer import (NeuralBackend, StatisticalBackend, StyleBank, StyleError, adain,
                                    assign_classes, lab_to_rgb, make_backend, rgb_to_lab, stylize_dataset,
                                    stylize_global, stylize_per_class, stylize_samples)


def adain_oracle(content, style_mean, style_std, eps):
    """Element-by-element evaluation of the renormalization formula."""
    flat = [v for row in content for v in row]
    n = len(flat)
    mean = sum(flat) / n
    std = math.sqrt(sum((v - mean) ** 2 for v in flat) / n)
    return [[style_std * (v - mean) / (std + eps) + style_mean for v in row] for row in content]


def test_adain_matches_target_moments():
    rng = np.random.default_rng(0)
    content = rng.standard_normal((1, 32, 32))
    content = (content - content.mean()) / content.std()
    style = rng.standard_normal((1, 20, 20))
    style = 5 + 2 * (style - style.mean()) / style.std()
    out = adain(content, style, eps=1e-8)
    assert out[0].mean() == pytest.approx(5, abs=1e-5)
    assert out[0].std() == pytest.approx(2, abs=1e-5)


def test_adain_identity_when_stats_equal():
    rng = np.random.default_rng(1)
    x = rng.normal(3, 4, (3, 10, 10))
    assert np.abs(adain(x, x.copy()) - x).max() < 1e-5


def test_adain_against_straight_line_oracle():
    content = [[1.0, 2.0], [3.0, 4.0]]
    style = np.array([[[-1.0, 1.0], [-1.0, 1.0]]])  # mean 0, std 1
    out = adain(np.array([content]), style, eps=1e-8)
    ref = adain_oracle(content, 0.0, 1.0, 1e-8)
    assert np.abs(out[0] - np.array(ref)).max() <= 1e-12


def test_adain_errors():
    with pytest.raises(StyleError):
        adain(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(StyleError):
        adain(np.zeros((2, 0, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(StyleError):
        adain(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), eps=0)


def test_lab_conversion_inverts():
    rng = np.random.default_rng(2)
    rgb = rng.integers(0, 256, (50, 3)).astype(float)
    assert np.abs(lab_to_rgb(rgb_to_lab(rgb)) - rgb).max() < 1e-9


def _img(rng, h=32, w=32, lo=0, hi=256):
    return rng.integers(lo, hi, (h, w, 3), dtype=np.uint8)


@pytest.mark.parametrize("space", ["lab", "rgb"])
def test_self_style_is_fixed_point(space):
    rng = np.random.default_rng(3)
    img = _img(rng)
    out = StatisticalBackend(space).transfer(img, img)
    assert np.abs(out.astype(int) - img).max() <= 1


@pytest.mark.parametrize("space", ["lab", "rgb"])
def test_constant_content_takes_style_means(space):
    content = LabeledImage("g", np.full((16, 16, 3), 128, np.uint8), np.zeros((16, 16), np.uint8))
    patch = np.tile(np.array([100, 150, 200], np.uint8), (16, 16, 1))
    out = stylize_global(content, patch, StatisticalBackend(space)).sample.image
    assert (out == out[0, 0]).all()
    assert np.abs(out[0, 0].astype(int) - [100, 150, 200]).max() <= 1


def test_constant_content_noisy_style_rgb_means():
    rng = np.random.default_rng(4)
    patch = np.clip(rng.normal([100, 150, 200], 10, (24, 24, 3)), 0, 255).astype(np.uint8)
    content = LabeledImage("g", np.full((16, 16, 3), 90, np.uint8), np.zeros((16, 16), np.uint8))
    out = stylize_global(content, patch, StatisticalBackend("rgb")).sample.image.astype(float)
    assert np.abs(out.reshape(-1, 3).mean(0) - patch.reshape(-1, 3).mean(0)).max() <= 1.0


def test_rgb_moment_matching_within_quantization():
    rng = np.random.default_rng(5)
    for _ in range(20):
        content = _img(rng, 40, 40, 60, 200)
        style = np.clip(rng.normal(rng.uniform(90, 160, 3), rng.uniform(5, 20, 3), (20, 20, 3)),
                        0, 255).astype(np.uint8)
        out = StatisticalBackend("rgb").transfer(content, style).reshape(-1, 3).astype(float)
        s = style.reshape(-1, 3).astype(float)
        assert np.abs(out.mean(0) - s.mean(0)).max() <= 1.5
        assert np.abs(out.std(0) - s.std(0)).max() <= 1.5


def test_lab_moment_matching_in_working_space():
    rng = np.random.default_rng(6)
    content = _img(rng, 40, 40, 60, 200)
    style = np.clip(rng.normal([120, 140, 150], 12, (20, 20, 3)), 0, 255).astype(np.uint8)
    out = StatisticalBackend("lab").transfer(content, style)
    lo, ls = rgb_to_lab(out).reshape(-1, 3), rgb_to_lab(style).reshape(-1, 3)
    # one 8-bit level at mid-grey is ~0.002 in log10 units
    assert np.abs(lo.mean(0) - ls.mean(0)).max() < 3e-3
    assert np.abs(lo.std(0) - ls.std(0)).max() < 3e-3


def test_mask_untouched_by_global():
    rng = np.random.default_rng(7)
    s = LabeledImage("a", _img(rng), rng.integers(0, 2, (32, 32), dtype=np.uint8))
    out = stylize_global(s, _img(rng, 16, 16), StatisticalBackend())
    assert out.sample.mask.tobytes() == s.mask.tobytes()
    assert out.mode == "conventional"


def _bank(rng, classes=(0, 1), per_class=3):
    return StyleBank({c: [_img(rng, 16, 16, 20 + 60 * c, 80 + 60 * c) for _ in range(per_class)] for c in classes},
                     "test bank", [_img(rng, 32, 32)])


def test_single_class_mask_equals_global():
    rng = np.random.default_rng(8)
    bank = _bank(rng)
    s = LabeledImage("a", _img(rng), np.ones((32, 32), np.uint8))
    backend = StatisticalBackend()
    out = stylize_per_class(s, bank, backend, seed=4)
    idx = int(np.random.default_rng(4).integers(3))
    ref = stylize_global(s, bank.styles[1][idx], backend)
    assert out.sample.image.tobytes() == ref.sample.image.tobytes()


def test_checkerboard_pixelwise_selection():
    rng = np.random.default_rng(9)
    bank = _bank(rng, per_class=1)
    mask = (np.indices((32, 32)).sum(0) % 2).astype(np.uint8)
    s = LabeledImage("c", _img(rng), mask)
    backend = StatisticalBackend()
    out = stylize_per_class(s, bank, backend, seed=0).sample.image
    per_class = {c: backend.transfer(s.image, bank.styles[c][0]) for c in (0, 1)}
    for y in range(32):
        for x in range(32):
            assert np.array_equal(out[y, x], per_class[int(mask[y, x])][y, x])


def test_ignore_pixels_copied_and_deterministic():
    rng = np.random.default_rng(10)
    bank = _bank(rng)
    mask = rng.integers(0, 2, (32, 32), dtype=np.uint8)
    mask[:4] = 255
    s = LabeledImage("i", _img(rng), mask)
    a = stylize_per_class(s, bank, StatisticalBackend(), seed=3)
    b = stylize_per_class(s, bank, StatisticalBackend(), seed=3)
    assert a.sample.image.tobytes() == b.sample.image.tobytes()
    assert np.array_equal(a.sample.image[:4], s.image[:4])
    assert a.sample.mask.tobytes() == mask.tobytes()


def test_per_class_errors():
    rng = np.random.default_rng(11)
    bank = _bank(rng, classes=(0,))
    s = LabeledImage("e", _img(rng), rng.integers(0, 2, (32, 32), dtype=np.uint8))
    with pytest.raises(StyleError, match="class 1"):
        stylize_per_class(s, bank, StatisticalBackend())
    empty = LabeledImage("e", _img(rng), np.full((32, 32), 255, np.uint8))
    with pytest.raises(StyleError, match="no labeled"):
        stylize_per_class(empty, bank, StatisticalBackend())
    with pytest.raises(StyleError):
        StyleBank({0: []})
    with pytest.raises(StyleError):
        StyleBank({0: [np.zeros((8, 8, 3), np.uint8)]})


def test_assign_classes():
    assert assign_classes(2, 2) == {0: 0, 1: 1}
    assert assign_classes(4, 2) == {0: 0, 1: 1, 2: 0, 3: 1}
    with pytest.raises(StyleError):
        assign_classes(2, 3)
    assert assign_classes(3, 2, {0: 1, 1: 0, 2: 0}) == {0: 1, 1: 0, 2: 0}
    with pytest.raises(StyleError):
        assign_classes(3, 2, {0: 1, 1: 0})
    with pytest.raises(StyleError):
        assign_classes(2, 2, {0: 0, 1: 5})


def test_surplus_source_classes_receive_mapped_style():
    rng = np.random.default_rng(12)
    bank = _bank(rng, per_class=1)
    mask = rng.integers(0, 4, (32, 32), dtype=np.uint8)
    s = LabeledImage("m", _img(rng), mask)
    backend = StatisticalBackend()
    out = stylize_per_class(s, bank, backend, assignment=assign_classes(4, 2)).sample.image
    for c in range(4):
        ref = backend.transfer(s.image, bank.styles[c % 2][0])
        assert np.array_equal(out[mask == c], ref[mask == c])


def test_dataset_modes(tmp_path, domains):
    src = load_manifest(domains["source_path"]).subset(["test"])
    bank = domains["bank"]
    backend = StatisticalBackend()
    none = stylize_dataset(src, bank, "none", None, 0, tmp_path / "none")
    for a, b in zip(src.load(), none.load()):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    adv = stylize_dataset(src, bank, "advanced", backend, 0, tmp_path / "adv")
    assert len(adv.samples) == 10
    for i, (a, b) in enumerate(zip(src.load(), adv.load())):
        assert a.mask.tobytes() == b.mask.tobytes()
        ref = stylize_per_class(a, bank, backend, seed=[0, i]).sample.image
        assert ref.tobytes() == b.image.tobytes()
        for c in (0, 1):
            full = [backend.transfer(a.image, p) for p in bank.styles[c]]
            sel = a.mask == c
            assert any(np.array_equal(f[sel], b.image[sel]) for f in full)
    conv = stylize_dataset(src, bank, "conventional", backend, 0, tmp_path / "conv")
    for a, b in zip(src.load(), conv.load()):
        assert a.mask.tobytes() == b.mask.tobytes()
    assert (tmp_path / "adv" / "provenance.json").exists()


def test_conventional_equals_advanced_on_single_class_masks():
    rng = np.random.default_rng(13)
    patch = _img(rng, 16, 16)
    bank = StyleBank({0: [patch]}, "", [patch])
    samples = [LabeledImage(f"s{i}", _img(rng), np.zeros((32, 32), np.uint8)) for i in range(4)]
    backend = StatisticalBackend()
    conv = stylize_samples(samples, bank, "conventional", backend, seed=1)
    adv = stylize_samples(samples, bank, "advanced", backend, seed=1)
    for a, b in zip(conv, adv):
        assert a.sample.image.tobytes() == b.sample.image.tobytes()


def test_conventional_needs_global_patch():
    rng = np.random.default_rng(14)
    bank = StyleBank({0: [_img(rng, 16, 16)]})
    s = [LabeledImage("s", _img(rng), np.zeros((32, 32), np.uint8))]
    with pytest.raises(StyleError, match="'s'"):
        stylize_samples(s, bank, "conventional", StatisticalBackend())
    with pytest.raises(StyleError):
        stylize_samples(s, bank, "fancy", StatisticalBackend())


def test_bank_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    bank = _bank(rng)
    bank.provenance = {0: ["x@0,0"] * 3, 1: ["y@1,1"] * 3}
    bank.save(tmp_path / "bank.json")
    back = StyleBank.load(tmp_path / "bank.json")
    assert back.source_note == "test bank"
    assert back.provenance == bank.provenance
    for c in (0, 1):
        for a, b in zip(bank.styles[c], back.styles[c]):
            assert np.array_equal(a, b)
    assert np.array_equal(bank.global_patches[0], back.global_patches[0])
    with pytest.raises(StyleError):
        StyleBank.load(tmp_path / "missing.json")


def test_neural_backend(tmp_path):
    with pytest.raises(StyleError, match="parameter"):
        NeuralBackend(None)
    with pytest.raises(StyleError):
        make_backend("neural")
    with pytest.raises(StyleError):
        NeuralBackend.from_file(tmp_path / "none.pt")
    rng = np.random.default_rng(16)
    nb = NeuralBackend.random(seed=0)
    nb.save(tmp_path / "nb.pt")
    loaded = make_backend("neural", params_path=tmp_path / "nb.pt")
    content, style = _img(rng, 30, 34), _img(rng, 16, 16)
    a = nb.transfer(content, style)
    assert a.shape == content.shape and a.dtype == np.uint8
    assert a.tobytes() == loaded.transfer(content, style).tobytes()
    s = LabeledImage("n", content, rng.integers(0, 2, (30, 34), dtype=np.uint8))
    bank = StyleBank({0: [style], 1: [_img(rng, 16, 16)]})
    out = stylize_per_class(s, bank, nb, seed=0)
    assert out.sample.mask.tobytes() == s.mask.tobytes()
    with pytest.raises(StyleError):
        NeuralBackend.random(alpha=1.5)
