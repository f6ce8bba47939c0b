import json
from dataclasses import replace

import numpy as np
import pytest

from acwenet.phantom import (
    DatasetManifest,
    PhantomError,
    PhantomSpec,
    gaussian_blur,
    generate_dataset,
    generate_phantom,
)


def test_clean_single_ellipse_thresholds_to_label():
    for seed in range(10):
        spec = PhantomSpec(n_structures=1, shapes=("ellipse",), blur_sigma=0.0, noise_scale=None,
                           bg_intensity=0.0, fg_intensity_range=(1.0, 1.0), seed=seed)
        image, label = generate_phantom(spec)
        np.testing.assert_array_equal((image > 0.5).astype(np.uint8), label)


def test_deterministic():
    spec = PhantomSpec(seed=123)
    a = generate_phantom(spec)
    b = generate_phantom(spec)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()


def test_seeds_differ():
    a = generate_phantom(PhantomSpec(seed=1))[1]
    b = generate_phantom(PhantomSpec(seed=2))[1]
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(20))
def test_label_properties(seed):
    spec = PhantomSpec(seed=seed)
    image, label = generate_phantom(spec)
    assert set(np.unique(label)) <= {0, 1}
    assert 0.01 <= label.mean() <= 0.5
    # 2-pixel margin
    assert not label[:2].any() and not label[-2:].any()
    assert not label[:, :2].any() and not label[:, -2:].any()
    assert image.shape == label.shape and (image >= 0).all()


def test_poisson_mean_inside_label():
    fg = 0.8
    spec = PhantomSpec(blur_sigma=0.0, noise_scale=50.0, fg_intensity_range=(fg, fg))
    means = [generate_phantom(spec.with_seed(s)) for s in range(1000)]
    inside = np.mean([img[lbl == 1].mean() for img, lbl in means])
    # E[Poisson(fg * 50) / 50] = fg
    assert abs(inside - fg) <= 0.05 * fg


def test_blur_preserves_constants_and_mass_in_interior():
    flat = np.full((20, 20), 0.3)
    np.testing.assert_allclose(gaussian_blur(flat, 1.5), 0.3)
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0
    out = gaussian_blur(impulse, 1.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-6)
    assert out[10, 10] == out.max()
    np.testing.assert_allclose(out, out.T)


def test_unsatisfiable_placement():
    spec = PhantomSpec(height=8, width=8, size_range=(0.9, 1.0), seed=0)
    with pytest.raises(PhantomError, match="1000 attempts"):
        generate_phantom(spec)


@pytest.mark.parametrize("kwargs", [
    {"n_structures": 0}, {"n_structures": 9}, {"fg_intensity_range": (0.05, 0.5)},
    {"blur_sigma": -1.0}, {"noise_scale": 0.0}, {"shapes": ("triangle",)},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        PhantomSpec(**kwargs)


def test_dataset_counts_and_seeds(tmp_path):
    m = generate_dataset(PhantomSpec(seed=7, height=16, width=16), 2, 1, tmp_path)
    assert [it.split for it in m.items] == ["train", "train", "test"]
    assert [it.seed for it in m.items] == [7, 8, 9]
    loaded = DatasetManifest.load(tmp_path)
    assert loaded == m
    img, lbl = generate_phantom(PhantomSpec(seed=9, height=16, width=16))
    np.testing.assert_array_equal(loaded.load_label(loaded.items[2]), lbl)
    assert loaded.load_image(loaded.items[2]).max() == 1.0


def test_dataset_rerun_identical(tmp_path):
    spec = PhantomSpec(seed=3, height=16, width=16)
    generate_dataset(spec, 3, 2, tmp_path / "a")
    generate_dataset(spec, 3, 2, tmp_path / "b", workers=3)
    for name in ["manifest.json", "images/img_00004.f32", "labels/lbl_00001.f32"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_test_only_dataset(tmp_path):
    m = generate_dataset(PhantomSpec(height=16, width=16), 0, 2, tmp_path)
    assert m.split("train") == [] and len(m.split("test")) == 2
    DatasetManifest.load(tmp_path).validate()


def test_manifest_stable_json(tmp_path):
    generate_dataset(PhantomSpec(height=16, width=16), 1, 1, tmp_path)
    text = (tmp_path / "manifest.json").read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


def test_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        generate_dataset(PhantomSpec(height=16, width=16), 1, 0, blocker / "sub")


def test_validate_rejects_overlapping_splits(tmp_path):
    m = generate_dataset(PhantomSpec(height=16, width=16), 1, 1, tmp_path)
    m.items[1] = replace(m.items[1], image_path=m.items[0].image_path)
    with pytest.raises(ValueError, match="overlap"):
        m.validate()
