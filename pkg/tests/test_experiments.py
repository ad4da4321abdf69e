import pytest
import torch

from countgan.datasets import MultiMnistSpec, generate_multi_mnist
from countgan.errors import FractionError, InvalidConfig, InvalidExclusion, ModeViolation
from countgan.experiments import (
    AugmentationDesign, TransferReport, ablation_variants, classic_augment, run_ablation_sweep,
    run_augmentation_study, run_count_transfer, sign_test_p, split_validation,
)
from countgan.experiments import _cells
from countgan.training import GanState, PredictorConfig, TrainConfig


@pytest.fixture(scope="module")
def toy2(tmp_path_factory, toy_glyphs):
    """Two classes, counts up to 2, 16x16; 54 images."""
    spec = MultiMnistSpec(class_subset=(0, 1), max_count=2, images_per_combination=6,
                          resolution=(16, 16), seed=5)
    return generate_multi_mnist(toy_glyphs, spec, out_dir=tmp_path_factory.mktemp("toy2"))


def tiny(**kw):
    base = dict(epochs=1, batch_size=16, learning_rate=1e-3, latent_dim=8, growth_rate=4,
                base_channels=8, disc_channels=(4, 8, 8, 8), seed=0)
    base.update(kw)
    return TrainConfig(**base)


PRED = PredictorConfig(epochs=2, batch_size=16, channels=(4, 8, 8, 8))


def test_split_validation_partitions(toy2):
    fit, val = split_validation(toy2, 0.2, seed=1)
    assert len(fit) + len(val) == len(toy2)
    assert {i.image_path for i in fit.items}.isdisjoint({i.image_path for i in val.items})
    assert [i.image_path for i in split_validation(toy2, 0.2, 1)[1].items] == [i.image_path for i in val.items]


# --------------------------------------------------------------------------- transfer

def test_transfer_rejects_bad_requests(toy2):
    with pytest.raises(InvalidExclusion):
        run_count_transfer(toy2, [], "interpolation", tiny(), [0])
    with pytest.raises(ModeViolation):
        run_count_transfer(toy2, [(0, 1)], "sideways", tiny(), [0])
    with pytest.raises(ModeViolation):
        run_count_transfer(toy2, [(0, 1)], "extrapolation", tiny(), [0])


def test_transfer_report_shape_and_determinism(tmp_path, toy2):
    a = run_count_transfer(toy2, [(0, 1)], "interpolation", tiny(), [0, 1], out_dir=tmp_path)
    b = run_count_transfer(toy2, [(0, 1)], "interpolation", tiny(), [0, 1])
    assert a.per_seed == b.per_seed
    assert len(a.per_seed["seen"]) == 2 and len(a.per_seed["interpolation"]) == 2
    assert a.mse_extrapolation is None and a.mse_interpolation >= 0 and a.mse_seen >= 0
    assert (tmp_path / "transfer_interpolation.json").exists()
    assert (tmp_path / "interpolation_seed1" / "checkpoint.pt").exists()
    e = run_count_transfer(toy2, [(1, 2)], "extrapolation", tiny(), [0, 1])
    both = TransferReport.combine(a, e)
    assert both.mse_interpolation == a.mse_interpolation
    assert both.mse_extrapolation == e.mse_extrapolation
    assert len(both.per_seed["seen"]) == 4


def test_sign_test():
    assert sign_test_p([1.0, 2.0, 3.0]) == pytest.approx(0.125)
    assert sign_test_p([-1.0, -2.0, -3.0]) == pytest.approx(1.0)
    assert sign_test_p([0.0, 0.0]) == 1.0


# --------------------------------------------------------------------------- ablation

def test_ablation_variants():
    names = [n for n, _ in ablation_variants(tiny(), ["count_loss", "weight_sharing", "label_mapping", "backbone"])]
    assert names == ["full", "w/o count loss", "w/o weight sharing", "w/o label mapping", "plain backbone"]
    with pytest.raises(InvalidConfig):
        ablation_variants(tiny(), [])
    with pytest.raises(InvalidConfig):
        ablation_variants(tiny(), ["dropout"])


def test_weight_sharing_variant_has_two_trunks(toy2):
    (_, full), (_, split) = ablation_variants(tiny(), ["weight_sharing"])
    assert GanState.create(full, full.model_config_for(toy2)).discriminator.count_trunk is None
    assert GanState.create(split, split.model_config_for(toy2)).discriminator.count_trunk is not None


def test_ablation_sweep_is_repeatable(tmp_path, toy2):
    judge = lambda imgs: torch.zeros(len(imgs), 2)  # noqa: E731
    a = run_ablation_sweep(toy2, tiny(), ["count_loss"], [0], judge, samples_per_count=4, out_dir=tmp_path)
    b = run_ablation_sweep(toy2, tiny(), ["count_loss"], [0], judge, samples_per_count=4)
    assert a.rows == b.rows
    assert [r.variant for r in a.rows] == ["full", "w/o count loss"]
    assert (tmp_path / "ablation.csv").read_text().startswith("variant,seed,count_mse")


# --------------------------------------------------------------------------- augmentation

def test_design_validation():
    with pytest.raises(FractionError):
        AugmentationDesign(fractions=(1.5,)).validate()
    with pytest.raises(FractionError):
        AugmentationDesign(fractions=()).validate()
    with pytest.raises(InvalidConfig):
        AugmentationDesign(mode="mixed").validate()
    AugmentationDesign(mode="additive", fractions=(0.0, 1.0, 2.0)).validate()


def test_replacement_cells():
    names = [c[0] for c in _cells(AugmentationDesign())]
    assert names == ["100% real", "50% real + 50% synthetic", "50% real only", "synthetic only"]
    names = [c[0] for c in _cells(AugmentationDesign(mode="additive", fractions=(1.0,)))]
    assert names == ["real only", "real + 100% augmented", "real + 100% synthetic"]


def test_classic_augment_bounds():
    x = torch.full((50, 1, 20, 20), -1.0)
    x[:, :, 8:12, 8:12] = 1.0
    out = classic_augment(x, ("hflip", "translate"), 0.1, torch.Generator().manual_seed(0))
    assert out.shape == x.shape
    # a centered block survives translation by at most 2 pixels intact
    assert torch.equal((out > 0).sum(dim=(1, 2, 3)), (x > 0).sum(dim=(1, 2, 3)))
    rows = torch.nonzero(out[:, 0].amax(dim=2) > 0)[:, 1]
    assert rows.min() >= 6 and rows.max() <= 13
    flip_only = classic_augment(x[:1], ("hflip",), 0.0, torch.Generator().manual_seed(0))
    assert torch.equal(flip_only, x[:1])


def _generator(toy2):
    cfg = tiny()
    return GanState.create(cfg, cfg.model_config_for(toy2))


def test_replacement_study_sizes_and_repeatability(toy2):
    design = AugmentationDesign(fractions=(1.0, 0.5, 0.0), train_size=20, test_fraction=0.25)
    state = _generator(toy2)
    a = run_augmentation_study(toy2, state, PRED, design, [0])
    b = run_augmentation_study(toy2, state, PRED, design, [0])
    assert a.to_json() == b.to_json()
    for r in a.rows:
        assert r.real_images + r.synthetic_images == (10 if r.cell == "50% real only" else 20)
    assert a.config["test_items"] == len(toy2) - round(0.75 * len(toy2))


def test_additive_zero_synthetic_equals_real_only(toy2):
    design = AugmentationDesign(mode="additive", fractions=(0.0, 0.5), train_size=20)
    rep = run_augmentation_study(toy2, _generator(toy2), PRED, design, [3], label_judge=lambda x: torch.zeros(len(x), 2))
    assert rep.mean("real + 0% synthetic") == rep.mean("real only")
    assert rep.mean("real + 0% augmented") == rep.mean("real only")
    aug = [r for r in rep.rows if r.cell == "real + 50% augmented"][0]
    assert (aug.real_images, aug.synthetic_images, aug.augmented_images) == (20, 0, 10)
    assert 0.0 <= rep.label_noise_rate <= 1.0


def test_generator_space_must_match(toy2, toy_manifest):
    with pytest.raises(InvalidConfig):
        run_augmentation_study(toy_manifest, _generator(toy2), PRED, AugmentationDesign(train_size=10), [0])


def test_study_needs_enough_real_images(toy2):
    with pytest.raises(FractionError):
        run_augmentation_study(toy2, _generator(toy2), PRED, AugmentationDesign(train_size=500), [0])

