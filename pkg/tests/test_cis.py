"""
Tests for clothing information stripping.
"""

import pytest
import torch

from app.core.cis import MappingHead, cis_forward, clothing_crop, clothing_mapping
from app.core.encoders import ImageEncoder
from app.core.losses import decoupling_loss, spatial_consistency
from app.core.parsing import BodyPart, ParsingMask
from app.models.config import EncoderConfig


@pytest.fixture
def encoder() -> ImageEncoder:
    torch.manual_seed(0)
    config = EncoderConfig(image_height=32, image_width=16, patch_size=8, patch_stride=8, depth=2,
                           heads=2, mlp_ratio=2, token_dim=16, shared_dim=8)
    return ImageEncoder(config).eval()


@pytest.fixture
def image() -> torch.Tensor:
    return torch.rand(3, 6, 4, generator=torch.Generator().manual_seed(0)) + 0.1


class TestClothingCrop:
    def test_all_clothing_keeps_image(self, image):
        mask = ParsingMask(torch.full((6, 4), int(BodyPart.UPPER_CLOTHES)))
        out, flagged = clothing_crop(image, mask)
        assert not flagged
        assert torch.equal(out, image)

    def test_all_background_falls_back(self, image):
        out, flagged = clothing_crop(image, ParsingMask(torch.zeros(6, 4, dtype=torch.long)))
        assert flagged
        assert torch.equal(out, image)

    def test_checkerboard_is_pixel_exact(self, image):
        rows, cols = torch.meshgrid(torch.arange(6), torch.arange(4), indexing="ij")
        checker = (rows + cols) % 2 == 0
        label_map = torch.where(checker, int(BodyPart.LOWER_CLOTHES), int(BodyPart.HEAD))
        out, flagged = clothing_crop(image, ParsingMask(label_map))
        assert not flagged
        assert torch.equal(out[:, checker], image[:, checker])
        assert torch.all(out[:, ~checker] == 0)


class TestMapping:
    def test_mapping_head_is_independent_copy(self, encoder):
        head = MappingHead(encoder.last_block)
        own = dict(head.block.named_parameters())
        for name, param in encoder.last_block.named_parameters():
            assert own[name].data_ptr() != param.data_ptr()
        changed = [
            name for name, param in encoder.last_block.named_parameters()
            if name.endswith("weight") and param.dim() == 2 and not torch.equal(own[name], param)
        ]
        assert changed

    def test_mapping_shape(self, encoder):
        head = MappingHead(encoder.last_block)
        tokens = torch.randn(9, 16)
        assert clothing_mapping(tokens, head, encoder).shape == (8,)
        assert clothing_mapping(tokens.unsqueeze(0).repeat(3, 1, 1), head, encoder).shape == (3, 8)


class TestCISForward:
    def test_outputs_and_validity(self, encoder):
        head = MappingHead(encoder.last_block)
        images = torch.rand(2, 3, 32, 16)
        label_maps = torch.zeros(2, 32, 16, dtype=torch.long)
        label_maps[0, 8:20] = int(BodyPart.UPPER_CLOTHES)
        out = cis_forward(images, label_maps, torch.tensor([True, True]), encoder, head)
        assert out.f_ori.shape == out.f_clo.shape == out.f_img2clo.shape == (2, 8)
        assert out.valid.tolist() == [True, False]

    def test_reuses_given_tokens(self, encoder):
        head = MappingHead(encoder.last_block)
        images = torch.rand(1, 3, 32, 16)
        label_maps = torch.full((1, 32, 16), int(BodyPart.UPPER_CLOTHES))
        penultimate = encoder.encode_penultimate(images)
        f_ori = encoder(images)
        out = cis_forward(images, label_maps, torch.tensor([True]), encoder, head, penultimate, f_ori)
        assert out.f_ori is f_ori
        assert torch.allclose(out.f_img2clo, clothing_mapping(penultimate, head, encoder))

    def test_clothing_feature_keeps_gradient(self, encoder):
        encoder.train()
        head = MappingHead(encoder.last_block)
        images = torch.rand(1, 3, 32, 16)
        label_maps = torch.full((1, 32, 16), int(BodyPart.LOWER_CLOTHES))
        out = cis_forward(images, label_maps, torch.tensor([True]), encoder, head)
        assert out.f_clo.requires_grad
        assert out.f_img2clo.requires_grad

    def test_copied_head_on_all_clothing_image_has_zero_consistency(self, encoder):
        head = MappingHead(encoder.last_block, reinitialize=False)
        images = torch.rand(2, 3, 32, 16, generator=torch.Generator().manual_seed(5))
        label_maps = torch.full((2, 32, 16), int(BodyPart.UPPER_CLOTHES))
        with torch.no_grad():
            out = cis_forward(images, label_maps, torch.tensor([True, True]), encoder, head)
        assert out.valid.all()
        assert float(spatial_consistency(out.f_img2clo, out.f_clo)) == pytest.approx(0.0, abs=1e-8)


class TestStrippingDirection:
    def test_decoupling_step_lowers_cosine(self, encoder):
        head = MappingHead(encoder.last_block, reinitialize=False)
        gen = torch.Generator().manual_seed(6)
        with torch.no_grad():
            for param in head.parameters():
                param.add_(0.05 * torch.randn(param.shape, generator=gen))
            images = torch.rand(4, 3, 32, 16, generator=gen)
            penultimate = encoder.encode_penultimate(images)
            f_ori = encoder.project(encoder.refine_last_block(penultimate))

        before = decoupling_loss(f_ori, clothing_mapping(penultimate, head, encoder))
        assert float(before) > 0
        optimizer = torch.optim.SGD(head.parameters(), lr=5e-3)
        optimizer.zero_grad()
        before.backward()
        optimizer.step()

        with torch.no_grad():
            after = decoupling_loss(f_ori, clothing_mapping(penultimate, head, encoder))
        assert float(after) < float(before)
