"""Index construction/persistence, K-NN selection, means, edit direction."""

import numpy as np
import pytest

from featmorph.features import FeatureVector, LayoutMismatchError, phi
from featmorph.imgio import save_image_rgb
from featmorph.neighbors import (
    AttributeQuery,
    DatasetIndex,
    IndexBuildError,
    IndexRecord,
    attribute_vector,
    build_index,
    knn_by_attributes,
    knn_by_cosine,
    load_attribute_table,
    load_index,
    mean_feature,
    save_index,
    scale_alpha,
)
from featmorph.network import random_network


@pytest.fixture(scope="module")
def net():
    return random_network(
        [("conv1_1", 4), ("conv2_1", 4), ("conv3_1", 4), ("conv4_1", 4), ("conv5_1", 4)],
        seed=30,
    )


@pytest.fixture()
def image_dir(tmp_path):
    rng = np.random.default_rng(55)
    paths = []
    for i in range(10):
        img = (rng.random((1, 3, 200, 200)) * 255).astype(np.float32)
        p = tmp_path / f"img{i:02d}.png"
        save_image_rgb(img, str(p))
        paths.append(str(p))
    return paths


def synthetic_index(rng, n_records, n_attrs=4, dim=16):
    records = []
    for i in range(n_records):
        values = rng.random(n_attrs) < 0.5
        valid = rng.random(n_attrs) < 0.9
        pool5 = rng.random(dim).astype(np.float32) + 0.01
        records.append(IndexRecord(i, f"mem://{i}", values, valid, pool5))
    names = tuple(f"attr{i}" for i in range(n_attrs))
    return DatasetIndex(names, records)


from oracles import knn_attributes_direct, knn_cosine_direct


def knn_attr_oracle(index, query, k, exclude, query_pool5):
    return knn_attributes_direct(index.records, query.targets, query.care, k, exclude, query_pool5)


def knn_cos_oracle(index, q, k, exclude):
    return knn_cosine_direct(index.records, q, k, exclude)


class TestBuildIndex:
    def test_empty_list(self, net):
        index = build_index([], net)
        assert len(index) == 0 and index.rejects == []

    def test_ten_image_set_and_self_retrieval(self, net, image_dir):
        index = build_index(image_dir, net)
        assert len(index) == 10
        for rec in index.records:
            got = knn_by_cosine(index, rec.pool5, 1)
            assert got == [rec.id]

    def test_undecodable_image_skipped(self, net, image_dir, tmp_path):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"not an image at all")
        index = build_index(image_dir[:3] + [str(bad)] + image_dir[3:5], net)
        assert len(index) == 5
        assert index.rejects == [str(bad)]

    def test_duplicate_path_rejected(self, net, image_dir):
        with pytest.raises(IndexBuildError, match="duplicate"):
            build_index([image_dir[0], image_dir[0]], net)

    def test_jobs_order_deterministic(self, net, image_dir):
        a = build_index(image_dir, net, jobs=1)
        b = build_index(image_dir, net, jobs=4)
        for ra, rb in zip(a.records, b.records):
            assert ra.path == rb.path and ra.id == rb.id
            np.testing.assert_array_equal(ra.pool5, rb.pool5)


class TestIndexFile:
    def test_roundtrip_bit_exact(self, net, image_dir, tmp_path):
        names = ("smiling", "senior")
        table = {
            image_dir[0]: (np.array([True, False]), np.array([True, True])),
            image_dir[1]: (np.array([False, False]), np.array([True, False])),
        }
        index = build_index(image_dir[:4], net, attribute_table=(names, table))
        p1 = tmp_path / "a.dfix"
        p2 = tmp_path / "b.dfix"
        save_index(index, str(p1))
        save_index(load_index(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()
        loaded = load_index(str(p1))
        assert loaded.attribute_names == names
        for a, b in zip(index.records, loaded.records):
            assert (a.id, a.path) == (b.id, b.path)
            np.testing.assert_array_equal(a.pool5, b.pool5)
            np.testing.assert_array_equal(a.attr_values, b.attr_values)
            np.testing.assert_array_equal(a.attr_valid, b.attr_valid)

    def test_empty_index_roundtrip(self, net, tmp_path):
        index = build_index([], net)
        p = tmp_path / "empty.dfix"
        save_index(index, str(p))
        assert len(load_index(str(p))) == 0

    def test_truncation_rejected(self, net, image_dir, tmp_path):
        from featmorph.neighbors import IndexFormatError

        index = build_index(image_dir[:2], net)
        p = tmp_path / "full.dfix"
        save_index(index, str(p))
        data = p.read_bytes()
        short = tmp_path / "short.dfix"
        short.write_bytes(data[: len(data) - 7])
        with pytest.raises(IndexFormatError, match="truncated"):
            load_index(str(short))


class TestAttributeTable:
    def test_parse(self, tmp_path):
        csv_path = tmp_path / "attrs.csv"
        csv_path.write_text(
            "path,smiling,senior,eyeglasses\n"
            "a.png,1,-1,\n"
            "b.png,-1,,1\n",
            encoding="utf-8",
        )
        names, table = load_attribute_table(str(csv_path))
        assert names == ("smiling", "senior", "eyeglasses")
        values, valid = table["a.png"]
        assert values.tolist() == [True, False, False]
        assert valid.tolist() == [True, True, False]
        values, valid = table["b.png"]
        assert values.tolist() == [False, False, True]
        assert valid.tolist() == [True, False, True]

    def test_bad_cell_rejected(self, tmp_path):
        csv_path = tmp_path / "attrs.csv"
        csv_path.write_text("path,smiling\na.png,2\n", encoding="utf-8")
        with pytest.raises(IndexBuildError, match="smiling"):
            load_attribute_table(str(csv_path))


class TestKnnByAttributes:
    def test_single_full_match_wins(self):
        rng = np.random.default_rng(0)
        index = synthetic_index(rng, 5, n_attrs=3)
        for rec in index.records:
            rec.attr_valid = np.ones(3, dtype=bool)
            rec.attr_values = np.zeros(3, dtype=bool)
        index.records[2].attr_values = np.ones(3, dtype=bool)
        query = AttributeQuery(np.ones(3, dtype=bool), np.ones(3, dtype=bool))
        assert knn_by_attributes(index, query, 1) == [2]

    def test_tie_break_cosine_then_id(self):
        rng = np.random.default_rng(1)
        index = synthetic_index(rng, 6, n_attrs=2)
        for rec in index.records:
            rec.attr_valid = np.ones(2, dtype=bool)
            rec.attr_values = np.ones(2, dtype=bool)
        q = index.records[4].pool5
        query = AttributeQuery(np.ones(2, dtype=bool), np.ones(2, dtype=bool))
        got = knn_by_attributes(index, query, 3, query_pool5=q)
        assert got[0] == 4  # its own descriptor: distance 0
        assert got == knn_attr_oracle(index, query, 3, set(), q)
        # without a descriptor ties fall through to id
        assert knn_by_attributes(index, query, 3) == [0, 1, 2]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        index = synthetic_index(rng, 20, n_attrs=5)
        for trial in range(20):
            targets = rng.random(5) < 0.5
            care = rng.random(5) < 0.7
            if not care.any():
                care[0] = True
            query = AttributeQuery(targets, care)
            q = rng.random(16).astype(np.float32)
            k = int(rng.integers(1, 8))
            exclude = tuple(rng.choice(20, size=2, replace=False).tolist())
            got = knn_by_attributes(index, query, k, exclude=exclude, query_pool5=q)
            want = knn_attr_oracle(index, query, k, set(exclude), q)
            assert got == want, f"trial {trial}"

    def test_negated_query(self):
        targets = np.array([True, False, True])
        care = np.array([True, True, False])
        neg = AttributeQuery(targets, care).negated()
        assert neg.targets.tolist() == [False, True, True]
        assert neg.care.tolist() == care.tolist()

    def test_care_mask_required(self):
        with pytest.raises(IndexBuildError, match="care"):
            AttributeQuery(np.zeros(3, dtype=bool), np.zeros(3, dtype=bool))


class TestKnnByCosine:
    def test_exact_match_first(self):
        rng = np.random.default_rng(3)
        index = synthetic_index(rng, 8)
        q = index.records[5].pool5.copy()
        assert knn_by_cosine(index, q, 1) == [5]

    def test_exclusion_promotes_second(self):
        rng = np.random.default_rng(4)
        index = synthetic_index(rng, 8)
        q = index.records[5].pool5.copy()
        full = knn_by_cosine(index, q, 2)
        assert knn_by_cosine(index, q, 1, exclude=(full[0],)) == [full[1]]

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        index = synthetic_index(rng, 50)
        for trial in range(20):
            q = rng.random(16).astype(np.float32)
            k = int(rng.integers(1, 12))
            got = knn_by_cosine(index, q, k)
            assert got == knn_cos_oracle(index, q, k, set()), f"trial {trial}"

    def test_shortfall_returns_all(self, caplog):
        rng = np.random.default_rng(6)
        index = synthetic_index(rng, 3)
        with caplog.at_level("WARNING"):
            got = knn_by_cosine(index, rng.random(16).astype(np.float32), 10)
        assert len(got) == 3
        assert any("only 3 candidates" in r.message for r in caplog.records)


class TestMeanFeature:
    def test_single_id_is_phi(self, net, image_dir):
        index = build_index(image_dir[:3], net)
        fv = mean_feature(net, index, [1])
        from featmorph.imgio import load_image_rgb

        direct = phi(net, load_image_rgb(index.records[1].path))
        np.testing.assert_allclose(fv.data, direct.data, atol=1e-6)

    def test_two_image_average_matches_two_pass_oracle(self, net, image_dir):
        from featmorph.imgio import load_image_rgb

        index = build_index(image_dir[:4], net)
        fv = mean_feature(net, index, [0, 2])
        a = phi(net, load_image_rgb(index.records[0].path)).data.astype(np.float64)
        b = phi(net, load_image_rgb(index.records[2].path)).data.astype(np.float64)
        np.testing.assert_allclose(fv.data, ((a + b) / 2).astype(np.float32), atol=1e-6)

    def test_duplicates_collapse(self, net, image_dir):
        index = build_index(image_dir[:2], net)
        fv = mean_feature(net, index, [1, 1, 1])
        single = mean_feature(net, index, [1])
        np.testing.assert_allclose(fv.data, single.data, atol=1e-6)

    def test_permutation_invariant(self, net, image_dir):
        index = build_index(image_dir[:5], net)
        a = mean_feature(net, index, [0, 1, 2, 3])
        b = mean_feature(net, index, [3, 1, 0, 2])
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_unreadable_member_is_hard_error(self, net, image_dir, tmp_path):
        index = build_index(image_dir[:3], net)
        import os

        gone = index.records[1]
        os.rename(gone.path, str(tmp_path / "moved.png"))
        from featmorph.imgio import ImageDecodeError

        with pytest.raises((ImageDecodeError, OSError)):
            mean_feature(net, index, [0, 1])

    def test_empty_ids_rejected(self, net, image_dir):
        index = build_index(image_dir[:2], net)
        with pytest.raises(ValueError, match="at least one"):
            mean_feature(net, index, [])


class TestAttributeVector:
    def layout(self):
        return (("relu3_1", 2, 2, 2),)

    def fv(self, data):
        return FeatureVector(np.asarray(data, dtype=np.float32), self.layout())

    def test_equal_means_give_zero(self):
        a = self.fv(np.arange(8))
        assert not attribute_vector(a, a).w.data.any()

    def test_antisymmetry(self):
        rng = np.random.default_rng(7)
        a = self.fv(rng.random(8))
        b = self.fv(rng.random(8))
        w1 = attribute_vector(a, b).w.data
        w2 = attribute_vector(b, a).w.data
        np.testing.assert_allclose(w1, -w2, atol=1e-7)

    def test_difference_recovers_target(self):
        rng = np.random.default_rng(8)
        a = self.fv(rng.random(8))
        b = self.fv(rng.random(8))
        w = attribute_vector(a, b).w.data
        np.testing.assert_allclose(w + b.data, a.data, atol=1e-6)

    def test_layout_mismatch(self):
        a = self.fv(np.zeros(8))
        b = FeatureVector(np.zeros(8, dtype=np.float32), (("relu4_1", 2, 2, 2),))
        with pytest.raises(LayoutMismatchError):
            attribute_vector(a, b)


class TestScaleAlpha:
    def test_unit_vector(self):
        assert scale_alpha(np.ones(17), 0.4) == pytest.approx(0.4)

    def test_hand_case(self):
        # mean square of [3, 4] is 12.5 -> alpha = 0.4 / 12.5 = 0.032
        assert scale_alpha(np.array([3.0, 4.0]), 0.4, d=2) == pytest.approx(0.032)

    def test_rescaling_identity(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal(64)
        c = 3.5
        a1 = scale_alpha(w, 0.4)
        a2 = scale_alpha(c * w, 0.4)
        np.testing.assert_allclose(a2, a1 / c**2, rtol=1e-12)
        np.testing.assert_allclose(a2 * (c * w), (a1 * w) / c, rtol=1e-9)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            scale_alpha(np.zeros(4), 0.4)
