import json

import numpy as np
import pytest

from fileio import read_xyz, write_xyz
from main import build_parser, cli_dispatch
from oracles import make_potential, reference_structure
from potential import DescriptorConfig, NeuralPotential, save_checkpoint
from structures import LabeledSample, LabelSet


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("HINT_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("HINT_OUT_DIR", raising=False)


@pytest.fixture
def out(tmp_path):
    return str(tmp_path / "out")


@pytest.fixture
def a2f_file(tmp_path):
    path = tmp_path / "a2f.dat"
    w = np.linspace(0.0, 60.0, 601)
    values = 0.5 * 50.0 * np.exp(-0.5 * (w - 50.0) ** 2) / np.sqrt(2 * np.pi)
    values[0] = 0.0
    np.savetxt(path, np.column_stack([w, values]))
    return str(path)


def _config(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return str(path)


class TestUsage:
    def test_no_command(self):
        assert cli_dispatch([]) == 2

    def test_experiments_needs_subcommand(self):
        assert cli_dispatch(["experiments"]) == 2

    def test_unknown_option(self):
        assert cli_dispatch(["tc", "--bogus"]) == 2

    def test_help_exits_zero(self):
        assert cli_dispatch(["--help"]) == 0

    def test_bad_config(self, tmp_path, out):
        cfg = _config(tmp_path, "train:\n  epoch: 3\n")
        assert cli_dispatch(["--config", cfg, "--out", out, "gen-data"]) == 2

    def test_bad_threads(self, out):
        assert cli_dispatch(["--threads", "0", "--out", out, "gen-data"]) == 2

    def test_subcommands_registered(self):
        parser = build_parser()
        args = parser.parse_args(["--seed", "4", "tc", "--a2f", "x.dat", "--out", "t.json"])
        assert (args.seed, args.command, args.table) == (4, "tc", "t.json")


class TestTc:
    def test_missing_file_is_domain_error(self, tmp_path, out):
        assert cli_dispatch(["--out", out, "tc", "--a2f", str(tmp_path / "none.dat")]) == 1

    def test_bad_mu_star(self, a2f_file, out):
        assert cli_dispatch(["--out", out, "tc", "--a2f", a2f_file, "--mu-star", "0.1,abc"]) == 2

    def test_writes_table(self, tmp_path, a2f_file, out):
        table = str(tmp_path / "tc.json")
        assert cli_dispatch(["--out", out, "tc", "--a2f", a2f_file, "--mu-star", "0.1,0.15",
                             "--out", table]) == 0
        with open(table, encoding="utf-8") as f:
            rows = json.load(f)
        assert [r["mu_star"] for r in rows] == [0.1, 0.15]
        assert rows[0]["tc"] > rows[1]["tc"] > 0


class TestDataAndModels:
    def test_gen_data(self, tmp_path, out):
        path = str(tmp_path / "data.xyz")
        code = cli_dispatch(["--out", out, "gen-data", "--n", "3", "--hessian-fraction", "1.0",
                             "--output", path])
        assert code == 0
        ds = read_xyz(path)
        assert len(ds) == 3
        assert ds.n_hessian == 3

    def test_eval_checkpoint(self, tmp_path, out):
        data = str(tmp_path / "data.xyz")
        assert cli_dispatch(["--out", out, "gen-data", "--n", "2", "--output", data]) == 0
        model = NeuralPotential(DescriptorConfig(cutoff=4.0, n_basis=4), ("S", "H"), (4,))
        ckpt = str(tmp_path / "model.ckpt")
        save_checkpoint(ckpt, model, model.init_params(0))

        metrics_path = str(tmp_path / "metrics.json")
        assert cli_dispatch(["--out", out, "eval", "--model", ckpt, "--data", data,
                             "--output", metrics_path]) == 0
        with open(metrics_path, encoding="utf-8") as f:
            metrics = json.load(f)
        assert metrics["n_samples"] == 2
        assert metrics["energy_mae"] >= 0

    def test_eval_missing_checkpoint(self, tmp_path, out):
        data = str(tmp_path / "data.xyz")
        assert cli_dispatch(["--out", out, "gen-data", "--n", "1", "--output", data]) == 0
        assert cli_dispatch(["--out", out, "eval", "--model", str(tmp_path / "no.ckpt"), "--data", data]) == 1

    def test_thermo_on_oracle_minimum(self, tmp_path, out):
        pot = make_potential("double_well_chain", {"embedding": "hosted", "n_sites": 1})
        minimum = reference_structure(pot, eta=1.0 / np.sqrt(2.0))
        structure = str(tmp_path / "minimum.xyz")
        write_xyz(structure, [LabeledSample(minimum, LabelSet())])
        result = str(tmp_path / "thermo.json")
        assert cli_dispatch(["--out", out, "thermo", "--structure", structure, "--output", result]) == 0
        with open(result, encoding="utf-8") as f:
            data = json.load(f)
        assert data["E"] == pytest.approx(-0.25, abs=1e-9)
        assert len(data["frequencies"]) == 4


@pytest.mark.slow
def test_pretrain_finetune_eval_pipeline(tmp_path, out):
    cfg = _config(tmp_path, (
        "descriptor:\n  n_basis: 4\n"
        "model:\n  layer_widths: [4]\n"
        "train:\n  epochs: 2\n  batch_size: 2\n  validation_fraction: 0.25\n"
    ))
    low, high = str(tmp_path / "low.xyz"), str(tmp_path / "high.xyz")
    base = ["--config", cfg, "--out", out]
    assert cli_dispatch(base + ["gen-data", "--fidelity", "low", "--n", "4", "--output", low]) == 0
    assert cli_dispatch(base + ["gen-data", "--n", "4", "--output", high]) == 0

    pre = str(tmp_path / "pre.ckpt")
    fine = str(tmp_path / "fine.ckpt")
    assert cli_dispatch(base + ["pretrain", "--data", low, "--output", pre]) == 0
    assert cli_dispatch(base + ["finetune", "--data", high, "--init", pre, "--hessian-fraction", "0.5",
                                "--output", fine]) == 0
    assert cli_dispatch(base + ["eval", "--model", fine, "--data", high]) == 0
