import json

import pytest
import torch

from conftest import random_dataset
from poisonforge.data import (
    AugmentConfig,
    AugmentParams,
    Dataset,
    PoisonedDatasetView,
    apply_augment,
    apply_poison,
    augment_batch,
    augment_pair,
    draw_augment_params,
    export_poisoned_dataset,
    load_dataset,
    resolve_data_root,
    save_dataset,
    subset,
    two_views,
)
from poisonforge.errors import DataError
from poisonforge.perturb import PerturbationSet, zero_perturbations

EPS = 8.0 / 255.0


def quantized_dataset(n=12, classes=3, hw=8, seed=0, split="train") -> Dataset:
    """Random dataset with uint8-representable pixels, so PNG roundtrips are exact.

    Labels come pre-grouped in loader order (sorted by class, then file name),
    so save -> load preserves sample order."""
    g = torch.Generator().manual_seed(seed)
    images = torch.randint(0, 256, (n, 3, hw, hw), generator=g).float() / 255.0
    labels = torch.sort((torch.arange(n) % classes).long()).values
    return Dataset(images, labels, [f"c{i}" for i in range(classes)], split_tag=split)


# ---------------------------------------------------------------------------
# directory ingestion


def test_save_then_load_roundtrip_is_exact(tmp_path):
    ds = quantized_dataset()
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, "train")
    assert torch.equal(back.images, ds.images)
    assert torch.equal(back.labels, ds.labels)
    assert back.class_names == ds.class_names
    assert back.fingerprint() == ds.fingerprint()


def test_load_orders_by_label_then_name(tmp_path):
    ds = quantized_dataset(n=6, classes=2)
    # scramble file names so creation order disagrees with sorted order
    ds.sample_names = ["0/z.png", "0/a.png", "1/m.png", "0/k.png", "1/b.png", "1/a.png"]
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, "train")
    assert back.sample_names == sorted(ds.sample_names)
    assert back.labels.tolist() == sorted(ds.labels.tolist())
    # images follow their names through the reorder
    src = {name: ds.images[i] for i, name in enumerate(ds.sample_names)}
    for i, name in enumerate(back.sample_names):
        assert torch.equal(back.images[i], src[name])


def test_missing_label_index_is_rejected(tmp_path):
    (tmp_path / "train" / "0").mkdir(parents=True)
    with pytest.raises(DataError, match="label index"):
        load_dataset(tmp_path, "train")


@pytest.mark.parametrize(
    "text,match",
    [
        ("0 cat\nbogus line here extra\n", "malformed"),
        ("0 cat\n0 dog\n", "duplicate"),
        ("0 cat\n2 dog\n", "contiguous"),
        ("# only a comment\n", "empty"),
    ],
)
def test_bad_label_index_lines_are_rejected(tmp_path, text, match):
    # "bogus line here extra" still splits into two parts; make first non-numeric
    (tmp_path / "labels.txt").write_text(text)
    (tmp_path / "train").mkdir()
    with pytest.raises(DataError, match=match):
        load_dataset(tmp_path, "train")


def test_missing_split_directory_is_rejected(tmp_path):
    (tmp_path / "labels.txt").write_text("0 cat\n")
    with pytest.raises(DataError, match="split directory"):
        load_dataset(tmp_path, "missing")


def test_non_integer_class_directory_is_rejected(tmp_path):
    ds = quantized_dataset()
    save_dataset(ds, tmp_path)
    (tmp_path / "train" / "extra").mkdir()
    (tmp_path / "train" / "extra" / "x.png").write_bytes(b"")
    with pytest.raises(DataError, match="not an integer"):
        load_dataset(tmp_path, "train")


def test_out_of_range_label_names_the_path(tmp_path):
    ds = quantized_dataset(classes=3)
    save_dataset(ds, tmp_path)
    bad = tmp_path / "train" / "7"
    bad.mkdir()
    with pytest.raises(DataError, match="label out of range.*7"):
        load_dataset(tmp_path, "train")


def test_undecodable_image_names_the_path(tmp_path):
    ds = quantized_dataset()
    save_dataset(ds, tmp_path)
    bad = tmp_path / "train" / "0" / "corrupt.png"
    bad.write_bytes(b"not a png at all")
    with pytest.raises(DataError, match="corrupt.png"):
        load_dataset(tmp_path, "train")


def test_inconsistent_image_shapes_are_rejected(tmp_path):
    ds = quantized_dataset(hw=8)
    save_dataset(ds, tmp_path)
    odd = quantized_dataset(n=3, hw=16)
    odd.sample_names = ["0/zzz_odd0.png", "1/zzz_odd1.png", "2/zzz_odd2.png"]
    for i in range(3):
        from poisonforge.data import _save_png

        _save_png(odd.images[i], tmp_path / "train" / odd.sample_names[i])
    with pytest.raises(DataError, match="inconsistent image shape"):
        load_dataset(tmp_path, "train")


def test_empty_split_is_rejected(tmp_path):
    (tmp_path / "labels.txt").write_text("0 cat\n")
    (tmp_path / "train" / "0").mkdir(parents=True)
    with pytest.raises(DataError, match="no samples"):
        load_dataset(tmp_path, "train")


def test_resolve_data_root_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("POISONFORGE_DATA_ROOT", str(tmp_path / "env"))
    assert resolve_data_root("explicit") == __import__("pathlib").Path("explicit")
    assert resolve_data_root(None) == tmp_path / "env"
    monkeypatch.delenv("POISONFORGE_DATA_ROOT")
    with pytest.raises(DataError, match="data root"):
        resolve_data_root(None)


# ---------------------------------------------------------------------------
# fingerprints and subsets


def test_fingerprint_is_deterministic_and_content_sensitive():
    a = random_dataset(seed=5)
    b = random_dataset(seed=5)
    assert a.fingerprint() == b.fingerprint()

    pixel = random_dataset(seed=5)
    pixel.images = pixel.images.clone()
    pixel.images[0, 0, 0, 0] += 1e-3
    assert pixel.fingerprint() != a.fingerprint()

    label = random_dataset(seed=5)
    label.labels = label.labels.clone()
    label.labels[0] = (label.labels[0] + 1) % label.class_count
    assert label.fingerprint() != a.fingerprint()


def test_fingerprint_is_order_sensitive():
    a = random_dataset(seed=5)
    perm = torch.arange(len(a) - 1, -1, -1)
    b = Dataset(a.images[perm], a.labels[perm], a.class_names)
    assert a.fingerprint() != b.fingerprint()


def test_subset_selects_rows_and_names():
    ds = quantized_dataset(n=8)
    ds.sample_names = [f"{int(l)}/{i:02d}.png" for i, l in enumerate(ds.labels)]
    ids = torch.tensor([5, 1, 2])
    sub = subset(ds, ids)
    assert len(sub) == 3
    assert torch.equal(sub.images, ds.images[ids])
    assert torch.equal(sub.labels, ds.labels[ids])
    assert sub.sample_names == [ds.sample_names[5], ds.sample_names[1], ds.sample_names[2]]


# ---------------------------------------------------------------------------
# augmentation


def test_identity_config_is_a_noop():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(6, 3, 10, 10, generator=g)
    out = augment_batch(x, AugmentConfig.identity(), g)
    assert torch.equal(out, x)


def test_flip_only_matches_torch_flip_exactly():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 3, 10, 10, generator=g)
    cfg = AugmentConfig(
        crop_scale=(1.0, 1.0), flip_prob=1.0, jitter_prob=0.0, grayscale_prob=0.0
    )
    out = augment_batch(x, cfg, torch.Generator().manual_seed(1))
    assert torch.equal(out, torch.flip(x, dims=(3,)))


def test_flip_rate_tracks_probability():
    cfg = AugmentConfig(flip_prob=0.5)
    g = torch.Generator().manual_seed(3)
    params = draw_augment_params(4000, (8, 8), cfg, g)
    rate = params.flip.float().mean().item()
    assert 0.45 <= rate <= 0.55


def test_full_area_crop_box_is_near_identity():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 12, 12, generator=g)
    b = x.shape[0]
    params = AugmentParams(
        crop=torch.tensor([[0.0, 0.0, 12.0, 12.0]] * b),
        flip=torch.zeros(b, dtype=torch.bool),
        jitter=torch.zeros(b, dtype=torch.bool),
        brightness=torch.ones(b),
        contrast=torch.ones(b),
        saturation=torch.ones(b),
        hue=torch.zeros(b),
        gray=torch.zeros(b, dtype=torch.bool),
    )
    out = apply_augment(x, params)
    assert torch.allclose(out, x, atol=1e-5)


def test_crop_boxes_stay_inside_image_and_respect_scale():
    cfg = AugmentConfig(crop_scale=(0.2, 1.0))
    g = torch.Generator().manual_seed(11)
    params = draw_augment_params(500, (32, 32), cfg, g)
    x0, y0, w, h = params.crop.unbind(dim=1)
    assert (x0 >= 0).all() and (y0 >= 0).all()
    assert (x0 + w <= 32 + 1e-4).all() and (y0 + h <= 32 + 1e-4).all()
    area = (w * h) / (32.0 * 32.0)
    assert (area >= 0.2 - 1e-3).all() and (area <= 1.0 + 1e-3).all()


def test_known_brightness_factor_scales_pixels():
    x = torch.full((2, 3, 4, 4), 0.25)
    params = AugmentParams(
        crop=None,
        flip=torch.zeros(2, dtype=torch.bool),
        jitter=torch.tensor([True, False]),
        brightness=torch.tensor([2.0, 2.0]),
        contrast=torch.ones(2),
        saturation=torch.ones(2),
        hue=torch.zeros(2),
        gray=torch.zeros(2, dtype=torch.bool),
    )
    out = apply_augment(x, params)
    assert torch.allclose(out[0], torch.full((3, 4, 4), 0.5), atol=1e-5)
    assert torch.equal(out[1], x[1])  # jitter gate off leaves the sample alone


def test_grayscale_output_has_equal_channels():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(5, 3, 6, 6, generator=g)
    cfg = AugmentConfig(
        crop_scale=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0, grayscale_prob=1.0
    )
    out = augment_batch(x, cfg, torch.Generator().manual_seed(2))
    assert torch.allclose(out[:, 0], out[:, 1]) and torch.allclose(out[:, 1], out[:, 2])


def test_augmentation_is_deterministic_given_seed():
    x = torch.rand(6, 3, 10, 10, generator=torch.Generator().manual_seed(9))
    cfg = AugmentConfig()
    a = augment_batch(x, cfg, torch.Generator().manual_seed(42))
    b = augment_batch(x, cfg, torch.Generator().manual_seed(42))
    assert torch.equal(a, b)


def test_gradient_flows_through_full_augmentation():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 10, 10, generator=g) * 0.8 + 0.1
    x.requires_grad_(True)
    cfg = AugmentConfig(jitter_prob=1.0, grayscale_prob=0.5)
    out = augment_batch(x, cfg, torch.Generator().manual_seed(7))
    out.square().sum().backward()
    assert x.grad is not None
    assert torch.isfinite(x.grad).all()
    assert x.grad.abs().sum().item() > 0


def test_two_views_differ_and_pair_keeps_source_index():
    x = torch.rand(8, 3, 10, 10, generator=torch.Generator().manual_seed(3))
    va, vb = two_views(x, AugmentConfig(), torch.Generator().manual_seed(5))
    assert va.shape == vb.shape == x.shape
    assert not torch.equal(va, vb)
    pair = augment_pair(x[0], AugmentConfig(), torch.Generator().manual_seed(5), source_index=3)
    assert pair.view_a.shape == x[0].shape
    assert pair.source_index == 3


def test_augment_output_stays_in_unit_range():
    x = torch.rand(16, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    cfg = AugmentConfig(jitter_prob=1.0, jitter_strength=0.8)
    out = augment_batch(x, cfg, torch.Generator().manual_seed(2))
    assert out.min().item() >= 0.0 and out.max().item() <= 1.0


def test_augment_config_validation():
    AugmentConfig().validate()
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.0, 1.0)).validate()
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.8, 0.2)).validate()
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob=1.5).validate()
    with pytest.raises(ValueError):
        AugmentConfig(jitter_strength=-0.1).validate()


# ---------------------------------------------------------------------------
# poison application


def make_poison(ds, scale=1.0, attack="tp"):
    g = torch.Generator().manual_seed(77)
    signs = torch.randint(0, 2, ds.images.shape, generator=g).float() * 2 - 1
    return PerturbationSet(
        deltas=signs * EPS * scale,
        epsilon=EPS,
        attack=attack,
        seed=0,
        dataset_fingerprint=ds.fingerprint(),
    )


def test_poisoned_view_perturbs_only_masked_samples():
    ds = random_dataset(n=10)
    pset = make_poison(ds, scale=0.5)
    mask = torch.zeros(10, dtype=torch.bool)
    mask[[1, 4]] = True
    view = PoisonedDatasetView(ds, pset, mask, 0.2)
    idx = torch.arange(10)
    out = view.batch(idx)
    expect = (ds.images[[1, 4]] + pset.deltas[[1, 4]]).clamp(0, 1)
    assert torch.equal(out[[1, 4]], expect)
    clean_ids = torch.tensor([i for i in range(10) if i not in (1, 4)])
    assert torch.equal(out[clean_ids], ds.images[clean_ids])


def test_poisoned_view_clips_to_unit_range():
    ds = random_dataset(n=6)
    ds.images = torch.full_like(ds.images, 0.999)
    pset = make_poison(ds)
    view = apply_poison(ds, pset, 1.0)
    out = view.batch(torch.arange(6))
    assert out.max().item() <= 1.0
    assert out.min().item() >= 0.0


def test_poison_mask_length_and_fingerprint_are_checked():
    ds = random_dataset(n=10)
    pset = make_poison(ds)
    with pytest.raises(DataError, match="mask length"):
        PoisonedDatasetView(ds, pset, torch.zeros(9, dtype=torch.bool), 0.0)
    other = random_dataset(n=10, seed=99)
    with pytest.raises(DataError, match="fingerprint"):
        apply_poison(other, pset, 1.0)


def test_poison_ratio_selection():
    ds = random_dataset(n=20)
    pset = make_poison(ds)
    assert apply_poison(ds, pset, 0.0).poisoned_ids().numel() == 0
    assert apply_poison(ds, pset, 1.0).poisoned_ids().numel() == 20

    g = torch.Generator().manual_seed(5)
    half = apply_poison(ds, pset, 0.5, gen=g)
    assert half.poisoned_ids().numel() == 10
    again = apply_poison(ds, pset, 0.5, gen=torch.Generator().manual_seed(5))
    assert torch.equal(half.mask, again.mask)
    with pytest.raises(ValueError, match="generator"):
        apply_poison(ds, pset, 0.5)
    with pytest.raises(ValueError, match="ratio"):
        apply_poison(ds, pset, 1.5)


def test_stratified_poison_draws_per_class():
    ds = random_dataset(n=40, classes=4)  # 10 per class
    pset = make_poison(ds)
    view = apply_poison(ds, pset, 0.3, gen=torch.Generator().manual_seed(0), stratified=True)
    for cls in range(4):
        hit = view.mask[ds.labels == cls].sum().item()
        assert hit == 3


def test_zero_epsilon_poison_is_identity():
    ds = random_dataset(n=8)
    pset = zero_perturbations(ds, epsilon=0.0, attack="clean", seed=0)
    assert pset.epsilon == 0.0
    view = apply_poison(ds, pset, 1.0)
    assert torch.equal(view.batch(torch.arange(8)), ds.images)


def test_export_poisoned_dataset_roundtrip(tmp_path):
    ds = quantized_dataset(n=9, classes=3)
    pset = make_poison(ds)
    view = apply_poison(ds, pset, 1.0)
    out_root = export_poisoned_dataset(view, tmp_path / "out")

    manifest = json.loads((out_root / "poison_manifest.json").read_text())
    assert manifest["attack"] == "tp"
    assert manifest["dataset_fingerprint"] == ds.fingerprint()
    assert manifest["poisoned_ids"] == list(range(9))
    assert manifest["quantization"] == "uint8"

    back = load_dataset(out_root, "train")
    want = view.batch(torch.arange(9))
    # 8-bit quantization: reloaded pixels are the nearest 1/255 step
    assert (back.images - want).abs().max().item() <= 0.5 / 255.0 + 1e-6
    assert torch.equal(back.labels, ds.labels)
