import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semicontrast.datapipe import (
    AI4MARS_SPLIT,
    MSL_SPLIT,
    AugmentationPolicy,
    ChronoSplit,
    Sample,
    SynthSpec,
    augment,
    chrono_split,
    class_balanced_batch,
    label_downsample,
    load_classification_folder,
    load_segmentation_folder,
    load_unlabeled_folder,
    sample_rng,
    synth_toy_dataset,
    two_view,
    write_classification_folder,
    write_segmentation_folder,
    write_unlabeled_folder,
)
from semicontrast.losses import UNLABELED


# ---- label downsampling ----

class TestDownsample:
    def test_uniform(self):
        assert (label_downsample(np.full((8, 8), 3), (3, 5)) == 3).all()

    def test_two_by_two_to_one(self):
        assert label_downsample(np.array([[0, 1], [2, 3]]), (1, 1)).tolist() == [[0]]

    def test_identity(self):
        y = np.random.default_rng(0).integers(0, 5, (7, 9))
        assert np.array_equal(label_downsample(y, (7, 9)), y)

    def test_target_larger_rejected(self):
        with pytest.raises(ValueError):
            label_downsample(np.zeros((4, 4)), (5, 4))

    def test_matches_coordinate_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            H, W = rng.integers(1, 20, 2)
            h, w = rng.integers(1, H + 1), rng.integers(1, W + 1)
            y = rng.choice([0, 1, 2, UNLABELED], size=(H, W))
            assert np.array_equal(label_downsample(y, (h, w)), oracles.downsample_nearest(y, h, w))

    def test_composes_for_integer_ratios(self):
        rng = np.random.default_rng(2)
        for r1, r2 in [(2, 2), (2, 3), (3, 2), (4, 2), (1, 4)]:
            h = int(rng.integers(1, 4))
            H = h * r1 * r2
            y = rng.integers(0, 6, (H, H))
            two = label_downsample(label_downsample(y, (h * r2, h * r2)), (h, h))
            assert np.array_equal(two, label_downsample(y, (h, h)))

    def test_unlabeled_propagates(self):
        y = np.full((4, 4), UNLABELED)
        assert (label_downsample(y, (2, 2)) == UNLABELED).all()

    def test_majority(self):
        y = np.array([[1, 1, 2, 3], [1, 0, 3, 3]])
        assert label_downsample(y, (1, 2), mode="majority").tolist() == [[1, 3]]
        # tie breaks toward the smaller id
        assert label_downsample(np.array([[4, 2]]), (1, 1), mode="majority").tolist() == [[2]]

    def test_batched(self):
        y = np.arange(2 * 4 * 4).reshape(2, 4, 4)
        out = label_downsample(y, (2, 2))
        assert out.shape == (2, 2, 2) and np.array_equal(out[1], label_downsample(y[1], (2, 2)))


# ---- chronological split ----

@dataclass
class _S:
    id: str
    sol: int


class TestChronoSplit:
    def test_split_ranges(self):
        assert MSL_SPLIT.train_sol_range == (3, 564) and MSL_SPLIT.test_sol_range == (565, 1060)
        assert AI4MARS_SPLIT.train_sol_range == (1, 1486) and AI4MARS_SPLIT.test_sol_range == (1487, 2579)

    def test_msl_partition(self):
        samples = [_S(str(s), s) for s in range(0, 1200, 7)]
        train, test = chrono_split(samples, MSL_SPLIT)
        assert all(3 <= s.sol <= 564 for s in train)
        assert all(565 <= s.sol <= 1060 for s in test)
        in_range = [s for s in samples if 3 <= s.sol <= 1060]
        assert len(train) + len(test) == len(in_range)
        assert not {s.id for s in train} & {s.id for s in test}

    def test_ai4mars_partition(self):
        samples = [_S(str(s), s) for s in range(1, 2600, 11)]
        train, test = chrono_split(samples, AI4MARS_SPLIT)
        assert max(s.sol for s in train) <= 1486 < min(s.sol for s in test)

    def test_empty(self):
        assert chrono_split([], MSL_SPLIT) == ([], [])

    def test_out_of_range_dropped_and_logged(self, caplog):
        train, test = chrono_split([_S("a", 1), _S("b", 100), _S("c", 5000)], MSL_SPLIT)
        assert [s.id for s in train] == ["b"] and test == []
        assert "2 samples" in caplog.text

    def test_shuffle_is_seeded(self):
        samples = [_S(str(s), s) for s in range(3, 500)]
        a, _ = chrono_split(samples, MSL_SPLIT, np.random.default_rng(0))
        b, _ = chrono_split(samples, MSL_SPLIT, np.random.default_rng(0))
        c, _ = chrono_split(samples, MSL_SPLIT)
        assert [s.id for s in a] == [s.id for s in b] != [s.id for s in c]
        assert sorted(s.id for s in a) == sorted(s.id for s in c)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ChronoSplit((1, 10), (10, 20))

    def test_missing_sol(self):
        with pytest.raises(ValueError):
            chrono_split([_S("x", None)], MSL_SPLIT)


# ---- class-balanced sampling ----

class TestBalancedBatch:
    def test_one_anchor_per_class(self):
        labels = np.repeat(np.arange(24), 3)
        classes, a, p = class_balanced_batch(labels, np.random.default_rng(0))
        assert len(classes) == 24 and sorted(classes) == list(range(24))
        assert all(labels[i] == c == labels[j] for c, i, j in zip(classes, a, p))
        assert all(i != j for i, j in zip(a, p))

    def test_singleton_class_duplicated(self):
        labels = np.array([0, 0, 1, 2, 2, 2])
        classes, a, p = class_balanced_batch(labels, np.random.default_rng(1))
        assert len(classes) == 3
        k = list(classes).index(1)
        assert a[k] == p[k] == 2

    def test_seeded(self):
        labels = np.random.default_rng(3).integers(0, 5, 200)
        x = class_balanced_batch(labels, np.random.default_rng(7))
        y = class_balanced_batch(labels, np.random.default_rng(7))
        z = class_balanced_batch(labels, np.random.default_rng(8))
        assert all(np.array_equal(u, v) for u, v in zip(x, y))
        assert not all(np.array_equal(u, v) for u, v in zip(x, z))

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            class_balanced_batch(np.array([], dtype=int), np.random.default_rng(0))


# ---- augmentation ----

class TestAugment:
    def test_identity_policy(self):
        img = torch.rand(3, 12, 16)
        v1, v2 = two_view(img, AugmentationPolicy.identity(), np.random.default_rng(0))
        assert torch.equal(v1, img) and torch.equal(v2, img)

    def test_forced_flip(self):
        img = torch.rand(3, 8, 8)
        policy = AugmentationPolicy(hflip_p=1.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), rotation=(0.0, 0.0),
                                    blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)
        v1, v2 = two_view(img, policy, np.random.default_rng(0))
        assert torch.equal(v1, img.flip(-1)) and torch.equal(v2, img.flip(-1))

    def test_seeded_views_identical(self):
        img = torch.rand(3, 32, 32)
        a = two_view(img, AugmentationPolicy(), np.random.default_rng(5))
        b = two_view(img, AugmentationPolicy(), np.random.default_rng(5))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert not torch.equal(a[0], a[1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_shape_and_range(self, seed):
        img = torch.rand(3, 20, 28)
        out = augment(img, AugmentationPolicy(vflip_p=0.5), np.random.default_rng(seed))
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_mask_follows_geometry_only(self):
        img = torch.rand(3, 16, 16)
        mask = torch.arange(256).reshape(16, 16) % 7
        policy = AugmentationPolicy(rotation=(0.0, 0.0))
        for seed in range(10):
            out_img, out_mask = augment(img, policy, np.random.default_rng(seed), mask)
            assert out_mask.shape == (16, 16) and out_mask.dtype == mask.dtype
            assert set(out_mask.unique().tolist()) <= set(range(7))

    def test_mask_identical_transform(self):
        img = torch.zeros(3, 16, 16)
        img[0] = torch.arange(16.0)[None, :] / 16
        mask = torch.arange(16)[None, :].expand(16, 16).clone()
        policy = AugmentationPolicy(hflip_p=1.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), rotation=(0.0, 0.0),
                                    blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)
        out_img, out_mask = augment(img, policy, np.random.default_rng(0), mask)
        assert torch.allclose(out_img[0] * 16, out_mask.float())

    def test_rotation_fills_unlabeled(self):
        mask = torch.zeros(16, 16, dtype=torch.long)
        policy = AugmentationPolicy(hflip_p=0.0, crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), rotation=(30.0, 30.0),
                                    blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)
        _, out = augment(torch.rand(3, 16, 16), policy, np.random.default_rng(0), mask)
        assert (out == UNLABELED).any() and set(out.unique().tolist()) == {0, UNLABELED}

    def test_stacked_masks_share_transform(self):
        mask = torch.randint(0, 4, (16, 16), generator=torch.Generator().manual_seed(0))
        _, out = augment(torch.rand(3, 16, 16), AugmentationPolicy(), np.random.default_rng(9), torch.stack([mask, mask]))
        assert out.shape == (2, 16, 16) and torch.equal(out[0], out[1])

    def test_degenerate_crop_falls_back(self):
        policy = AugmentationPolicy(crop_scale=(1.0, 1.0), crop_ratio=(50.0, 60.0), hflip_p=0.0, rotation=(0.0, 0.0),
                                    blur_p=0.0, jitter_p=0.0, desaturate_p=0.0)
        img = torch.rand(3, 10, 10)
        assert torch.equal(augment(img, policy, np.random.default_rng(0)), img)

    def test_policy_validation_and_roundtrip(self):
        with pytest.raises(ValueError):
            AugmentationPolicy(hflip_p=1.5)
        with pytest.raises(ValueError):
            AugmentationPolicy(crop_scale=(0.0, 1.0))
        p = AugmentationPolicy(rotation=(-5.0, 5.0))
        assert AugmentationPolicy.from_dict(p.to_dict()) == p

    def test_defaults(self):
        p = AugmentationPolicy()
        assert p.crop_scale == (0.2, 1.0) and p.rotation == (-30.0, 30.0) and p.blur_sigma == (0.1, 2.0)
        assert (p.brightness, p.contrast, p.saturation, p.hue, p.desaturate_p) == (0.4, 0.4, 0.4, 0.1, 0.2)

    def test_sample_rng_independent_of_order(self):
        assert sample_rng(1, 5, 2).random() == sample_rng(1, 5, 2).random()
        assert sample_rng(1, 5, 2).random() != sample_rng(1, 6, 2).random()


# ---- on-disk layouts ----

def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_classification_folder_roundtrip(tmp_path):
    ds = synth_toy_dataset(SynthSpec(n_labeled=10, n_unlabeled=3, n_test=4, image_size=16), 0)
    write_classification_folder(ds.labeled, ds.class_names, tmp_path / "lab")
    samples, names = load_classification_folder(tmp_path / "lab")
    assert names == sorted(ds.class_names)
    by_id = {s.id: s for s in samples}
    for s in ds.labeled:
        back = by_id[s.id]
        assert names[back.label] == ds.class_names[s.label] and back.sol == s.sol
        assert (back.image - s.image).abs().max() <= 0.5 / 255 + 1e-6
    write_unlabeled_folder(ds.unlabeled, tmp_path / "unl")
    assert len(load_unlabeled_folder(tmp_path / "unl")) == 3


def test_segmentation_folder_roundtrip(tmp_path):
    ds = synth_toy_dataset(SynthSpec(task="seg", n_labeled=3, n_unlabeled=0, n_test=2, image_size=16), 1)
    write_segmentation_folder(ds.labeled, tmp_path / "seg")
    back = {s.id: s for s in load_segmentation_folder(tmp_path / "seg")}
    for s in ds.labeled:
        assert torch.equal(back[s.id].label, s.label) and back[s.id].sol == s.sol


def test_loaders_resize_and_report_missing(tmp_path):
    ds = synth_toy_dataset(SynthSpec(task="seg", n_labeled=2, n_unlabeled=0, n_test=1, image_size=16), 2)
    write_segmentation_folder(ds.labeled, tmp_path / "seg")
    small = load_segmentation_folder(tmp_path / "seg", image_size=(8, 8))
    assert small[0].image.shape == (3, 8, 8) and small[0].label.shape == (8, 8)
    with pytest.raises(FileNotFoundError):
        load_classification_folder(tmp_path / "nope")
    with pytest.raises(FileNotFoundError):
        load_segmentation_folder(tmp_path / "nope")


# ---- synthetic benchmark ----

class TestSynth:
    def test_same_seed_identical(self):
        spec = SynthSpec(n_labeled=8, n_unlabeled=4, n_test=4, image_size=16)
        a, b = synth_toy_dataset(spec, 3), synth_toy_dataset(spec, 3)
        for xs, ys in ((a.labeled, b.labeled), (a.unlabeled, b.unlabeled), (a.test, b.test)):
            assert all(torch.equal(x.image, y.image) and x.label == y.label for x, y in zip(xs, ys))
        c = synth_toy_dataset(spec, 4)
        assert not torch.equal(a.labeled[0].image, c.labeled[0].image)

    def test_default_spec(self):
        ds = synth_toy_dataset(SynthSpec(n_labeled=12, n_unlabeled=5, n_test=6), 0)
        assert len(ds.class_names) == 4 and ds.labeled[0].image.shape == (3, 64, 64)
        assert {s.label for s in ds.labeled} == {0, 1, 2, 3}
        assert all(s.label is None for s in ds.unlabeled)
        assert max(s.sol for s in ds.labeled) < min(s.sol for s in ds.test)

    def test_unlabeled_fraction(self):
        ds = synth_toy_dataset(SynthSpec(task="seg", n_labeled=60, n_unlabeled=0, n_test=5), 0)
        frac = np.mean([(s.label == UNLABELED).float().mean().item() for s in ds.labeled])
        assert abs(frac - 0.45) <= 0.02
        assert all(not (s.label == UNLABELED).any() for s in ds.test)

    def test_no_shift_matches_frequencies(self):
        train, test, _ = SynthSpec(shift=0.0).frequencies()
        assert np.allclose(train, test)
        ds = synth_toy_dataset(SynthSpec(shift=0.0, n_labeled=2000, n_unlabeled=0, n_test=2000, image_size=16), 0)
        f_tr = np.bincount([s.label for s in ds.labeled], minlength=4) / 2000
        f_te = np.bincount([s.label for s in ds.test], minlength=4) / 2000
        assert np.abs(f_tr - f_te).max() < 0.04

    def test_shift_reorders_frequencies(self):
        train, test, unl = SynthSpec(shift=1.0).frequencies()
        assert train[0] > train[3] and np.allclose(test, test[::-1])
        assert np.isclose(unl.sum(), 1.0)

    @pytest.mark.parametrize("kw", [{"task": "det"}, {"num_classes": 5}, {"shift": 1.5}, {"unlabeled_fraction": 1.0},
                                    {"train_freq": (1.0, 2.0)}, {"image_size": 8}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)

    def test_images_valid(self):
        ds = synth_toy_dataset(SynthSpec(task="seg", n_labeled=4, n_unlabeled=2, n_test=2, image_size=32), 5)
        for s in ds.labeled + ds.unlabeled + ds.test:
            assert s.image.dtype == torch.float32 and s.image.min() >= 0 and s.image.max() <= 1
