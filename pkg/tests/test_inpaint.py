"""Masking, pairing, and the inpainting pipeline."""

import numpy as np
import pytest

from featmorph.imgio import load_image_rgb, save_image_rgb
from featmorph.inpaint import (
    DATASET_STRENGTHS,
    MaskError,
    apply_mask,
    inpaint,
    masked_descriptor_index,
    validate_mask,
)
from featmorph.neighbors import build_index, mean_feature
from featmorph.network import random_network
from featmorph.optimizer import LbfgsConfig
from featmorph.reconstruct import ReconstructionConfig
from featmorph.tensor import ShapeError


@pytest.fixture(scope="module")
def net():
    return random_network(
        [("conv1_1", 4), ("conv2_1", 4), ("conv3_1", 6), ("conv4_1", 6), ("conv5_1", 8)],
        seed=99,
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("inpaint_imgs")
    rng = np.random.default_rng(123)
    paths = []
    for i in range(10):
        yy, xx = np.meshgrid(np.linspace(0, 3, 200), np.linspace(0, 3, 200), indexing="ij")
        img = np.stack(
            [127 + 100 * np.sin(yy * (i + 1) / 3 + c) * np.cos(xx + c) for c in range(3)]
        )[None]
        img += rng.normal(0, 8, img.shape)
        p = tmp / f"img{i}.png"
        save_image_rgb(img.astype(np.float32), str(p))
        paths.append(str(p))
    return paths


def center_mask(h=200, w=200, half=40):
    mask = np.zeros((h, w), dtype=bool)
    mask[h // 2 - half : h // 2 + half, w // 2 - half : w // 2 + half] = True
    return mask


class TestApplyMask:
    def test_empty_mask_is_identity_application(self):
        # a mask with no missing pixels fails validation, but apply_mask
        # itself must leave everything untouched
        img = np.arange(12, dtype=np.float32).reshape(1, 3, 2, 2)
        mask = np.zeros((2, 2), dtype=bool)
        np.testing.assert_array_equal(apply_mask(img, mask), img)

    def test_all_missing_rejected_by_validation(self):
        with pytest.raises(MaskError, match="known"):
            validate_mask(np.ones((4, 4), dtype=bool))
        with pytest.raises(MaskError, match="missing"):
            validate_mask(np.zeros((4, 4), dtype=bool))

    def test_checkerboard_hand_case(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        mask = np.indices((4, 4)).sum(axis=0) % 2 == 0
        out = apply_mask(img, mask, fill_value=127.0)
        for i in range(4):
            for j in range(4):
                want = 127.0 if (i + j) % 2 == 0 else img[0, 0, i, j]
                assert out[0, 0, i, j] == want

    def test_default_fill_is_midgray(self):
        img = np.zeros((1, 3, 4, 4), dtype=np.float32)
        mask = center_mask(4, 4, 1)
        assert apply_mask(img, mask)[0, 0, 2, 2] == 127.0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(np.zeros((1, 3, 4, 4)), np.zeros((5, 5), dtype=bool))


class TestPairing:
    def test_source_target_sets_paired(self, net, dataset):
        index = build_index(dataset[:5], net)
        mask = center_mask()
        ids = [0, 2, 4]
        from featmorph.features import resize_short_side

        phibar_t = mean_feature(net, index, ids)
        phibar_s = mean_feature(
            net, index, ids,
            image_transform=lambda img: apply_mask(resize_short_side(img), mask),
        )
        # |S_s| == |S_t| by construction; sanity: both means share layout
        assert phibar_t.layout == phibar_s.layout

    def test_masked_candidate_differs_only_inside_mask(self, dataset):
        img = load_image_rgb(dataset[0])
        mask = center_mask()
        masked = apply_mask(img, mask)
        np.testing.assert_array_equal(masked[..., ~mask], img[..., ~mask])
        assert (masked[..., mask] == 127.0).all()

    def test_masked_index_excludes(self, net, dataset):
        index = build_index(dataset[:4], net)
        mask = center_mask()
        sub = masked_descriptor_index(index, net, mask, exclude_ids=(1, 3))
        assert [r.id for r in sub.records] == [0, 2]


class TestInpaint:
    def test_compositing_keeps_known_pixels_bit_exact(self, net, dataset):
        index = build_index(dataset, net)
        mask = center_mask()
        x = apply_mask(load_image_rgb(dataset[0]), mask)
        cfg = ReconstructionConfig(
            strength_beta=1.6, lbfgs=LbfgsConfig(max_iterations=4)
        )
        result = inpaint(x, mask, index, 3, cfg, net, exclude_ids=(0,))
        np.testing.assert_array_equal(result.image[..., ~mask], x[..., ~mask])
        assert 0 not in result.neighbor_ids
        assert len(result.neighbor_ids) == 3

    def test_no_compositing_leaves_reconstruction(self, net, dataset):
        index = build_index(dataset[:6], net)
        mask = center_mask()
        x = apply_mask(load_image_rgb(dataset[1]), mask)
        cfg = ReconstructionConfig(strength_beta=1.6, lbfgs=LbfgsConfig(max_iterations=4))
        result = inpaint(x, mask, index, 2, cfg, net, exclude_ids=(1,), composite=False)
        # without compositing the known region is optimizer output, almost
        # surely not bit-identical to the input
        assert not np.array_equal(result.image[..., ~mask], x[..., ~mask])

    def test_mask_with_no_missing_rejected(self, net, dataset):
        index = build_index(dataset[:3], net)
        x = load_image_rgb(dataset[0])
        with pytest.raises(MaskError):
            inpaint(x, np.zeros((200, 200), dtype=bool), index, 2,
                    ReconstructionConfig(strength_beta=1.6), net)

    def test_published_strengths(self):
        assert DATASET_STRENGTHS["faces"] == 1.6
        assert DATASET_STRENGTHS["shoes"] == 2.8
