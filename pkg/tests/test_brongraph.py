import json

import numpy as np
import pytest

from bronchusnet.brongraph import (
    BronchialGraph,
    GraphFormatError,
    augment,
    build_graph,
    point_feature,
    sample_indices,
    voxel_feature,
)
from bronchusnet.pipeline import case_graph
from bronchusnet.skeleton import extract_segments, skeletonize
from bronchusnet.volgrid import load_volume, save_volume
from test_skeleton import y_shape


def small_graph(labels=True):
    segs = extract_segments(y_shape())
    feats = np.random.default_rng(0).normal(size=(12, 12, 12, 2))
    return build_graph(segs, feats, [0, 1, 2] if labels else None, K=4)


class TestPointFeature:
    def test_straight_x_chain(self):
        f = point_feature([(i, 0, 0) for i in range(10)], K=10).reshape(10, 3)
        np.testing.assert_allclose(f[:, 0], np.arange(10) / 9)
        assert np.all(f[:, 1:] == 0.5)

    def test_single_voxel(self):
        np.testing.assert_array_equal(point_feature([(3, 4, 5)]), np.full(30, 0.5))

    def test_indices_for_25_voxels(self):
        expected = [int(np.floor(i * 24 / 9 + 0.5)) for i in range(10)]
        assert sample_indices(25, 10).tolist() == expected
        assert expected == [0, 3, 5, 8, 11, 13, 16, 19, 21, 24]
        chain = np.stack([np.arange(25), np.arange(25) % 3, np.zeros(25)], axis=1)
        f = point_feature(chain).reshape(10, 3)
        np.testing.assert_allclose(f[:, 0], np.array(expected) / 24)

    def test_empty_chain(self):
        with pytest.raises(ValueError):
            point_feature(np.zeros((0, 3)))

    def test_translation_invariant(self, rng):
        chain = rng.integers(0, 20, size=(13, 3))
        np.testing.assert_allclose(point_feature(chain), point_feature(chain + [5, -2, 7]))


class TestVoxelFeature:
    def test_constant_volume(self):
        feats = np.full((6, 6, 6, 3), 2.5)
        np.testing.assert_array_equal(voxel_feature([(1, 1, 1), (2, 2, 2)], feats, K=4), np.full(12, 2.5))

    def test_coordinate_probe(self):
        feats = np.zeros((8, 4, 4, 3))
        feats[..., 0] = np.arange(8)[:, None, None]
        chain = [(i, 1, 2) for i in range(8)]
        out = voxel_feature(chain, feats, K=5)
        np.testing.assert_array_equal(out[::3], np.array(chain)[sample_indices(8, 5), 0])

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            voxel_feature([(9, 0, 0)], np.zeros((4, 4, 4, 2)), K=2)

    def test_matches_raw_file(self, tmp_path, case3):
        save_volume(tmp_path / "feats", case3.descriptor_feats)
        header = json.loads((tmp_path / "feats.json").read_text())
        nx, ny, nz = header["dims"]
        c = header["channels"]
        raw = np.frombuffer((tmp_path / "feats.raw").read_bytes(), dtype="<f4")
        chain = case3.branches[2].centerline
        idx = sample_indices(len(chain), 10)
        expected = []
        for x, y, z in chain[idx]:
            base = ((z * ny + y) * nx + x) * c
            expected.extend(raw[base: base + c])
        got = voxel_feature(chain, load_volume(tmp_path / "feats.json"), 10)
        np.testing.assert_array_equal(got, np.array(expected, dtype=np.float64))


class TestBuildGraph:
    def test_y_shape(self):
        g = small_graph()
        assert g.n_nodes == 3 and len(g.edges) == 3
        assert g.point_feat.shape == (3, 12) and g.voxel_feat.shape == (3, 8)
        assert g.features("pv").shape == (3, 20) and g.features("p").shape == (3, 12)

    def test_single_segment(self):
        m = np.zeros((6, 6, 6), np.uint8)
        m[1:5, 2, 2] = 1
        g = build_graph(extract_segments(m), np.zeros((6, 6, 6, 24)))
        assert g.n_nodes == 1 and len(g.edges) == 0

    def test_label_mismatch(self):
        with pytest.raises(ValueError):
            build_graph(extract_segments(y_shape()), np.zeros((12, 12, 12, 2)), [0, 1])

    def test_synthetic_node_count(self, case4):
        g = case_graph(case4)
        assert g.n_nodes == 15 and g.features("pv").shape == (15, 270)
        # A binary tree of 15 segments meeting at 7 junctions has 7 * 3 adjacent pairs.
        assert len(g.edges) == 21


class TestJson:
    def test_round_trip(self, tmp_path, case3):
        g = case_graph(case3)
        g.save(tmp_path / "g.json")
        back = BronchialGraph.load(tmp_path / "g.json")
        np.testing.assert_array_equal(back.edges, g.edges)
        np.testing.assert_array_equal(back.labels, g.labels)
        np.testing.assert_allclose(back.point_feat, g.point_feat, rtol=1e-8)
        np.testing.assert_allclose(back.voxel_feat, g.voxel_feat, rtol=1e-8)
        back.save(tmp_path / "g2.json")
        assert (tmp_path / "g.json").read_text() == (tmp_path / "g2.json").read_text()

    def test_unlabelled(self):
        d = small_graph(labels=False).to_dict()
        assert "label" not in d["nodes"][0]
        assert BronchialGraph.from_dict(d).labels is None

    @pytest.mark.parametrize("mutate,field", [
        (lambda d: d.pop("edges"), "edges"),
        (lambda d: d["nodes"][1].pop("point_feat"), "point_feat"),
        (lambda d: d["nodes"][0].__setitem__("point_feat", [0.1]), "point_feat"),
        (lambda d: d["edges"].append([0, 7]), "edge"),
        (lambda d: d["nodes"][2].pop("label"), "label"),
    ])
    def test_malformed(self, mutate, field):
        d = small_graph().to_dict()
        mutate(d)
        with pytest.raises(GraphFormatError, match=field):
            BronchialGraph.from_dict(d)

    def test_invalid_json(self, tmp_path):
        (tmp_path / "g.json").write_text("{nodes: ")
        with pytest.raises(GraphFormatError):
            BronchialGraph.load(tmp_path / "g.json")


class TestAugment:
    def test_identity(self, case3):
        g = case_graph(case3)
        out = augment(g, 1, max_rotation=0.0, scale_range=(1.0, 1.0), elastic_sigma=0.0)
        assert out.point_feat.tobytes() == g.point_feat.tobytes()

    def test_seed_repeatable(self, case3):
        g = case_graph(case3)
        a, b = augment(g, 42), augment(g, 42)
        assert a.point_feat.tobytes() == b.point_feat.tobytes()
        assert not np.array_equal(augment(g, 43).point_feat, a.point_feat)

    def test_carries_other_fields(self, case3):
        g = case_graph(case3)
        out = augment(g, 7)
        np.testing.assert_array_equal(out.voxel_feat, g.voxel_feat)
        np.testing.assert_array_equal(out.labels, g.labels)
        np.testing.assert_array_equal(out.edges, g.edges)
        assert np.all((out.point_feat >= 0) & (out.point_feat <= 1))

    def test_small_perturbation(self, case4):
        g = case_graph(case4)
        out = augment(g, 3)
        for a, b in zip(out.chains, g.chains):
            assert np.abs(a - b).max() < 12
