import json
import os

import numpy as np
import pandas as pd
import pytest

from fileio import (
    FormatError, load_dataset, read_hessian, read_manifest, read_matrix, read_reactions,
    read_structure, read_xyz, save_table, to_jsonable, write_hessian, write_json, write_matrix,
    write_xyz,
)
from structures import Fidelity, LabeledSample, LabelSet, Structure


@pytest.fixture
def dimer_sample():
    s = Structure(("H", "H"), [[0.0, 0.0, 0.0], [0.74, 0.01, -0.02]])
    hessian = np.arange(36, dtype=float).reshape(6, 6) / 7.0
    labels = LabelSet(-1.1234567890123, np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]]), hessian + hessian.T)
    return LabeledSample(s, labels, Fidelity.LOW, "stretched dimer")


@pytest.fixture
def bare_sample():
    s = Structure(("X",), [[1.0 / 3.0, 2.0, 0.0]], masses=[2.5])
    return LabeledSample(s, LabelSet(energy=0.5))


class TestXyz:
    def test_round_trip_is_lossless(self, tmp_path, dimer_sample, bare_sample):
        first = tmp_path / "a" / "data.xyz"
        second = tmp_path / "b" / "data.xyz"
        write_xyz(str(first), [dimer_sample, bare_sample])
        loaded = read_xyz(str(first))
        write_xyz(str(second), loaded)
        assert first.read_text() == second.read_text()
        assert (tmp_path / "a" / "data.xyz.0.hess").read_text() == (tmp_path / "b" / "data.xyz.0.hess").read_text()

    def test_values_survive(self, tmp_path, dimer_sample, bare_sample):
        path = str(tmp_path / "data.xyz")
        sidecars = write_xyz(path, [dimer_sample, bare_sample])
        assert [os.path.basename(p) for p in sidecars] == ["data.xyz.0.hess"]

        ds = read_xyz(path)
        assert len(ds) == 2
        dimer, bare = ds[0], ds[1]
        assert dimer.labels.energy == dimer_sample.labels.energy
        np.testing.assert_array_equal(dimer.structure.positions, dimer_sample.structure.positions)
        np.testing.assert_array_equal(dimer.labels.hessian, dimer_sample.labels.hessian)
        assert dimer.fidelity == Fidelity.LOW
        assert dimer.tag == "stretched dimer"
        assert bare.labels.forces is None
        assert bare.labels.hessian is None
        assert bare.structure.masses[0] == 2.5
        assert bare.structure.positions[0, 0] == 1.0 / 3.0

    def test_npy_sidecars(self, tmp_path, dimer_sample):
        path = str(tmp_path / "data.xyz")
        sidecars = write_xyz(path, [dimer_sample], hessian_format="npy")
        assert sidecars[0].endswith(".npy")
        np.testing.assert_array_equal(read_xyz(path)[0].labels.hessian, dimer_sample.labels.hessian)

    def test_unknown_hessian_format(self, tmp_path, dimer_sample):
        with pytest.raises(FormatError):
            write_xyz(str(tmp_path / "data.xyz"), [dimer_sample], hessian_format="hdf5")

    def test_truncated_sidecar(self, tmp_path, dimer_sample):
        path = str(tmp_path / "data.xyz")
        (sidecar,) = write_xyz(path, [dimer_sample])
        with open(sidecar) as f:
            lines = f.readlines()
        with open(sidecar, "w") as f:
            f.writelines(lines[:-1])
        with pytest.raises(FormatError, match="expected 36 Hessian elements"):
            read_xyz(path)

    def test_missing_sidecar(self, tmp_path, dimer_sample):
        path = str(tmp_path / "data.xyz")
        (sidecar,) = write_xyz(path, [dimer_sample])
        os.remove(sidecar)
        with pytest.raises(FormatError, match="not found"):
            read_xyz(path)

    def test_plain_xyz_defaults(self, tmp_path):
        path = tmp_path / "water.xyz"
        path.write_text("3\n\nO 0 0 0.117\nH 0 0.757 -0.469\nH 0 -0.757 -0.469\n")
        s = read_structure(str(path))
        assert s.species == ("O", "H", "H")
        assert s.masses[0] == pytest.approx(15.999, abs=1e-2)

    def test_bad_column_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("2\n\nH 0 0 0\nH 0 0\n")
        with pytest.raises(FormatError, match="bad.xyz:4"):
            read_xyz(str(path))

    def test_truncated_frame(self, tmp_path):
        path = tmp_path / "short.xyz"
        path.write_text("3\n\nH 0 0 0\n")
        with pytest.raises(FormatError, match="file ends inside a frame"):
            read_xyz(str(path))

    def test_unknown_fidelity(self, tmp_path):
        path = tmp_path / "fid.xyz"
        path.write_text("1\nfidelity=medium\nH 0 0 0\n")
        with pytest.raises(FormatError, match="unknown fidelity"):
            read_xyz(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_xyz(str(tmp_path / "nope.xyz"))


class TestHessianFiles:
    def test_text_and_npy(self, tmp_path):
        h = np.eye(3) * 2.0
        write_hessian(str(tmp_path / "h.hess"), h)
        write_hessian(str(tmp_path / "h.npy"), h)
        np.testing.assert_array_equal(read_hessian(str(tmp_path / "h.hess"), 3), h)
        np.testing.assert_array_equal(read_hessian(str(tmp_path / "h.npy"), 3), h)

    def test_wrong_size(self, tmp_path):
        write_hessian(str(tmp_path / "h.hess"), np.eye(3))
        with pytest.raises(FormatError, match="expected 36"):
            read_hessian(str(tmp_path / "h.hess"), 6)


class TestManifests:
    def test_manifest_concatenates(self, tmp_path, dimer_sample, bare_sample):
        write_xyz(str(tmp_path / "one.xyz"), [dimer_sample])
        write_xyz(str(tmp_path / "two.xyz"), [bare_sample])
        manifest = tmp_path / "all.txt"
        manifest.write_text("# training data\none.xyz\n\ntwo.xyz\n")
        ds = load_dataset(str(manifest))
        assert len(ds) == 2
        assert ds.n_hessian == 1

    def test_manifest_missing_member(self, tmp_path):
        manifest = tmp_path / "all.txt"
        manifest.write_text("one.xyz\n")
        with pytest.raises(FormatError, match="all.txt:1"):
            read_manifest(str(manifest))

    def test_reactions(self, tmp_path):
        (tmp_path / "r.xyz").write_text("1\n\nX -0.55 1.44 0\n")
        (tmp_path / "p.xyz").write_text("1\n\nX -0.05 0.47 0\n")
        (tmp_path / "reactions.yaml").write_text(
            "reactions:\n  - name: AC\n    reactant: r.xyz\n    product: p.xyz\n  - reactant: p.xyz\n    product: r.xyz\n")
        reactions = read_reactions(str(tmp_path / "reactions.yaml"))
        assert [r[0] for r in reactions] == ["AC", "reaction_1"]
        assert reactions[0][1].positions[0, 0] == pytest.approx(-0.55)

    def test_reactions_need_both_endpoints(self, tmp_path):
        (tmp_path / "reactions.yaml").write_text("reactions:\n  - reactant: r.xyz\n")
        with pytest.raises(FormatError):
            read_reactions(str(tmp_path / "reactions.yaml"))

    def test_reactions_need_a_list(self, tmp_path):
        (tmp_path / "reactions.yaml").write_text("name: nothing\n")
        with pytest.raises(FormatError, match="reactions"):
            read_reactions(str(tmp_path / "reactions.yaml"))


class TestMatrices:
    @pytest.mark.parametrize("name", ["k.json", "k.npy", "k.txt"])
    def test_formats(self, tmp_path, name):
        k = np.array([[2.0, -1.0], [-1.0, 2.0]])
        path = str(tmp_path / name)
        write_matrix(path, k)
        np.testing.assert_array_equal(read_matrix(path), k)

    def test_not_square(self, tmp_path):
        path = tmp_path / "k.txt"
        path.write_text("1 2 3\n4 5 6\n")
        with pytest.raises(FormatError, match="square"):
            read_matrix(str(path))


class TestResults:
    def test_to_jsonable(self):
        data = {"a": np.float64(np.nan), "b": np.arange(2), "c": Fidelity.HIGH, 3: (np.int64(4),)}
        assert to_jsonable(data) == {"a": None, "b": [0, 1], "c": "high", "3": [4]}

    def test_save_table(self, tmp_path):
        df = pd.DataFrame({"x": [1.0, float("nan")], "status": ["Success", "GuessFailed"]})
        csv_path, json_path = save_table(df, str(tmp_path / "out" / "table"))
        assert pd.read_csv(csv_path)["status"].tolist() == ["Success", "GuessFailed"]
        with open(json_path, encoding="utf-8") as f:
            assert json.load(f) == [{"x": 1.0, "status": "Success"}, {"x": None, "status": "GuessFailed"}]

    def test_write_json_unicode(self, tmp_path):
        path = str(tmp_path / "meta.json")
        write_json(path, {"unit": "Å"})
        with open(path, encoding="utf-8") as f:
            assert "Å" in f.read()
