"""
Tests for augmentation and P x K batch sampling.
"""

import pytest
import torch

from app.core.errors import ConfigurationError
from app.core.parsing import ParsingMask
from app.data.dataset import Sample, TrainingView
from app.data.sampler import balanced_batches, shuffled_batches
from app.data.transforms import augment, erase_params, hflip, resize
from app.models.config import AugmentConfig, Stage2Config
from tests.conftest import toy_sample


@pytest.fixture
def sample() -> Sample:
    gen = torch.Generator().manual_seed(0)
    label_map = torch.randint(0, 7, (8, 4), generator=gen)
    return Sample(
        image=torch.rand(3, 8, 4, generator=gen),
        identity=0,
        clothing=0,
        camera=0,
        split="train",
        mask=ParsingMask(label_map),
    )


# ----------------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------------


class TestAugment:
    def test_eval_path_is_deterministic(self, sample):
        config = AugmentConfig()
        a = augment(sample, train=False, size=(16, 8), config=config)
        b = augment(sample, train=False, size=(16, 8), config=config)
        assert torch.equal(a.image, b.image)
        assert torch.equal(a.mask.label_map, b.mask.label_map)

    def test_resize_uses_nearest_for_masks(self, sample):
        out = resize(sample, (16, 8))
        assert out.image.shape == (3, 16, 8)
        assert out.mask.shape == (16, 8)
        assert set(torch.unique(out.mask.label_map).tolist()) <= set(torch.unique(sample.mask.label_map).tolist())
        assert torch.equal(out.mask.label_map[::2, ::2], sample.mask.label_map)

    def test_resize_same_size_is_noop(self, sample):
        assert resize(sample, (8, 4)) is sample

    def test_flip_moves_mask_with_image(self, sample):
        flipped = hflip(sample)
        width = sample.image.shape[-1]
        for col in range(width):
            assert torch.equal(flipped.image[..., col], sample.image[..., width - 1 - col])
            assert torch.equal(flipped.mask.label_map[:, col], sample.mask.label_map[:, width - 1 - col])

    def test_forced_flip(self, sample):
        config = AugmentConfig(flip_prob=1.0, erase_prob=0.0)
        out = augment(sample, train=True, size=(8, 4), config=config, generator=torch.Generator().manual_seed(0))
        assert torch.equal(out.image, torch.flip(sample.image, dims=[-1]))

    def test_erasing_leaves_mask_untouched(self, sample):
        config = AugmentConfig(flip_prob=0.0, erase_prob=1.0, erase_area=(0.2, 0.3))
        original = sample.image.clone()
        resized = resize(sample, (16, 8))
        out = augment(sample, train=True, size=(16, 8), config=config, generator=torch.Generator().manual_seed(3))
        assert torch.equal(out.mask.label_map, resized.mask.label_map)
        assert not torch.equal(out.image, resized.image)
        assert torch.equal(sample.image, original)

    def test_erase_box_fits(self):
        config = AugmentConfig()
        gen = torch.Generator().manual_seed(1)
        for _ in range(50):
            box = erase_params(64, 32, config, gen)
            if box is None:
                continue
            top, left, h, w = box
            assert 0 <= top and top + h <= 64
            assert 0 <= left and left + w <= 32

    def test_same_generator_seed_same_augmentation(self, sample):
        config = AugmentConfig()
        a = augment(sample, True, (8, 4), config, torch.Generator().manual_seed(9))
        b = augment(sample, True, (8, 4), config, torch.Generator().manual_seed(9))
        assert torch.equal(a.image, b.image)


# ----------------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------------


class TestBalancedBatches:
    """Identity-balanced P x K batches."""

    @pytest.fixture
    def view(self) -> TrainingView:
        samples = [toy_sample(i, i) for i in range(4) for _ in range(3)]
        return TrainingView.from_samples(samples)

    def test_batch_composition(self, view):
        batches = list(balanced_batches(view, 2, 2, rng=0))
        assert len(batches) == 2
        for batch in batches:
            assert len(batch) == 4
            ids = [view.labels(i)[0] for i in batch]
            assert len(set(ids)) == 2
            assert all(ids.count(y) == 2 for y in set(ids))

    def test_every_identity_each_epoch(self, view):
        seen = {view.labels(i)[0] for batch in balanced_batches(view, 3, 2, rng=1) for i in batch}
        assert seen == {0, 1, 2, 3}

    def test_fixed_seed_same_sequence(self, view):
        assert list(balanced_batches(view, 2, 2, rng=5)) == list(balanced_batches(view, 2, 2, rng=5))

    def test_small_identity_sampled_with_replacement(self):
        samples = [toy_sample(0, 0), toy_sample(1, 1), toy_sample(1, 1)]
        view = TrainingView.from_samples(samples)
        batch = next(balanced_batches(view, 2, 3, rng=0))
        assert batch.count(0) == 3

    def test_too_few_identities(self, view):
        with pytest.raises(ConfigurationError):
            list(balanced_batches(view, 5, 2, rng=0))

    def test_default_batch_size(self):
        assert Stage2Config().batch_size == 64


class TestShuffledBatches:
    def test_covers_every_index_once(self):
        batches = list(shuffled_batches(10, 4, rng=0))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(i for b in batches for i in b) == list(range(10))
