import json

import numpy as np
import pytest

from dnparc import io
from dnparc.annotation import FeatureTable, LabelMap, StreamlineBundle, VoxelGrid, annotate
from dnparc.cae import CaeModel
from dnparc.errors import InvalidInputError


@pytest.fixture
def grid():
    rng = np.random.default_rng(0)
    return VoxelGrid((4, 3, 5), rng.uniform(size=60) < 0.6)


class TestStreamlines:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        bundles = [StreamlineBundle(c, [rng.normal(size=(3, 3)) for _ in range(c)]) for c in range(1, 7)]
        io.write_streamlines(tmp_path / "s.ndjson", bundles)
        back = io.read_streamlines(tmp_path / "s.ndjson")
        for a, b in zip(bundles, back):
            assert a.cluster_id == b.cluster_id
            assert all(np.array_equal(x, y) for x, y in zip(a.streamlines, b.streamlines))

    def test_record_format(self, tmp_path):
        bundles = [StreamlineBundle(c, [[(0.5, 1.0, 2.0)]]) for c in range(1, 7)]
        io.write_streamlines(tmp_path / "s.ndjson", bundles)
        first = json.loads((tmp_path / "s.ndjson").read_text().splitlines()[0])
        assert first == {"cluster": 1, "points": [[0.5, 1.0, 2.0]]}

    def test_bad_cluster(self, tmp_path):
        (tmp_path / "s.ndjson").write_text('{"cluster": 9, "points": [[0,0,0]]}\n')
        with pytest.raises(InvalidInputError):
            io.read_streamlines(tmp_path / "s.ndjson")

    def test_malformed_line(self, tmp_path):
        (tmp_path / "s.ndjson").write_text("not json\n")
        with pytest.raises(InvalidInputError):
            io.read_streamlines(tmp_path / "s.ndjson")


class TestMask:
    def test_round_trip(self, tmp_path, grid):
        io.write_mask(tmp_path / "mask.json", grid)
        back = io.read_mask(tmp_path / "mask.json")
        assert back.dims == grid.dims
        assert np.array_equal(back.mask, grid.mask)

    def test_x_fastest_byte_order(self, tmp_path):
        mask = np.zeros((3, 2, 2), dtype=bool)
        mask[1, 0, 0] = True
        io.write_mask(tmp_path / "m.json", VoxelGrid((3, 2, 2), mask))
        assert (tmp_path / "m.raw").read_bytes()[:3] == bytes([0, 1, 0])

    def test_wrong_size(self, tmp_path, grid):
        io.write_mask(tmp_path / "mask.json", grid)
        (tmp_path / "mask.raw").write_bytes(b"\x00" * 5)
        with pytest.raises(InvalidInputError):
            io.read_mask(tmp_path / "mask.json")


class TestTables:
    def test_feature_round_trip_and_sort(self, tmp_path, grid):
        rng = np.random.default_rng(2)
        bundles = [StreamlineBundle(c, [rng.uniform(0, 5, size=(4, 3))]) for c in range(1, 7)]
        table = annotate(bundles, grid)
        shuffled = np.random.default_rng(3).permutation(len(table))
        io.write_feature_table(tmp_path / "f.tsv",
                               FeatureTable(table.voxels[shuffled], table.features[shuffled],
                                            table.point_count[shuffled]))
        assert io.read_feature_table(tmp_path / "f.tsv") == table
        header = (tmp_path / "f.tsv").read_text().splitlines()[0].split("\t")
        assert header == ["i", "j", "k", "x1", "x2", "x3", "x4", "x5", "x6", "point_count"]

    def test_write_read_write_bytes(self, tmp_path, grid):
        lm = LabelMap(grid.mask_voxels(), np.arange(grid.n_voxels) % 3 + 1, 3)
        io.write_label_map(tmp_path / "a.tsv", lm)
        back = io.read_label_map(tmp_path / "a.tsv")
        assert back == lm
        io.write_label_map(tmp_path / "b.tsv", back)
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.tsv").write_text("a\tb\n1\t2\n")
        with pytest.raises(InvalidInputError):
            io.read_label_map(tmp_path / "x.tsv")

    def test_non_binary_feature(self, tmp_path):
        cols = "\t".join(io.FEATURE_COLUMNS)
        (tmp_path / "f.tsv").write_text(cols + "\n0\t0\t0\t2\t0\t0\t0\t0\t0\t1\n")
        with pytest.raises(InvalidInputError):
            io.read_feature_table(tmp_path / "f.tsv")


class TestCanonicalJson:
    def test_seventeen_digits(self):
        assert io.dumps_canonical({"x": 0.1}) == '{\n "x": 0.10000000000000001\n}\n'

    def test_integral_float_keeps_point(self):
        assert io.dumps_canonical([2.0, 3]) == "[2.0, 3]\n"

    def test_floats_round_trip_exactly(self):
        rng = np.random.default_rng(4)
        values = rng.normal(size=200) * 10.0 ** rng.integers(-300, 300, size=200)
        back = json.loads(io.dumps_canonical(values.tolist()))
        assert np.array_equal(np.array(back), values)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            io.dumps_canonical([float("nan")])

    def test_checkpoint_byte_stable(self, tmp_path):
        model = CaeModel(seed=3)
        io.write_json(tmp_path / "a.json", model.to_dict())
        again = CaeModel.from_dict(io.read_json(tmp_path / "a.json"))
        assert again.equals(model)
        io.write_json(tmp_path / "b.json", again.to_dict())
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
