import json
import subprocess
import sys

import numpy as np
import pytest

from advkit.epochs import EpochSet
from advkit.harness import cli
from advkit.harness.container import (BadMagicError, CountMismatchError, TruncatedPayloadError,
                                      decode, encode, read_container, write_container)
from advkit.harness.runner import (COLUMNS, ConfigError, ExperimentConfig, child_seed, read_report,
                                   run_experiment, verify_run)
from advkit.harness.synth import SynthSpec, synth_dataset
from advkit.diffcore import ContainerError
from conftest import make_set


def small_set(n=10, c=3, t=16, seed=0):
    rng = np.random.default_rng(seed)
    ep = make_set(rng.standard_normal((n, c, t)).astype(np.float32), labels=np.arange(n) % 2,
                  subjects=np.arange(n) % 3)
    ep.provenance.update(source="unit", note="x")
    return ep


# ---- container ---------------------------------------------------------------------


def test_container_round_trip_is_exact(tmp_path):
    ep = small_set()
    back = read_container(write_container(ep, tmp_path / "a.eegb"))
    np.testing.assert_array_equal(back.data, ep.data)
    assert back.data.dtype == np.float32
    np.testing.assert_array_equal(back.labels, ep.labels)
    np.testing.assert_array_equal(back.subjects, ep.subjects)
    assert back.fs == ep.fs and back.provenance == ep.provenance
    assert list(back.class_names) == list(ep.class_names)


def test_reserialising_is_byte_identical():
    raw = encode(small_set())
    assert encode(decode(raw)) == raw


def test_bad_magic_is_rejected():
    raw = bytearray(encode(small_set()))
    raw[:4] = b"XEGB"
    with pytest.raises(BadMagicError):
        decode(bytes(raw))


def test_header_count_larger_than_payload():
    ten = encode(small_set(10))
    nine = encode(small_set(9))
    # splice the ten-epoch header onto a nine-epoch payload
    hlen = lambda b: 10 + int.from_bytes(b[6:10], "little")
    with pytest.raises(CountMismatchError):
        decode(ten[:hlen(ten)] + nine[hlen(nine):])


def test_truncated_payload():
    raw = encode(small_set())
    with pytest.raises(TruncatedPayloadError):
        decode(raw[:-3])
    with pytest.raises(TruncatedPayloadError):
        decode(raw[:5])


def test_container_errors_share_a_base():
    for exc in (BadMagicError, CountMismatchError, TruncatedPayloadError):
        assert issubclass(exc, ContainerError)
    raw = bytearray(encode(small_set()))
    raw[4] = 9
    with pytest.raises(ContainerError):
        decode(bytes(raw))


# ---- synthetic data ------------------------------------------------------------------


def test_synth_shape_and_balance():
    ep, keys = synth_dataset(SynthSpec(n_classes=4, n_epochs=80, n_channels=6, n_samples=32))
    assert ep.data.shape == (80, 6, 32)
    assert np.bincount(ep.labels).tolist() == [20] * 4
    assert len(keys) == 80


def test_synth_is_seed_deterministic():
    a, _ = synth_dataset(SynthSpec(n_epochs=40, n_samples=32, seed=5))
    b, _ = synth_dataset(SynthSpec(n_epochs=40, n_samples=32, seed=5))
    c, _ = synth_dataset(SynthSpec(n_epochs=40, n_samples=32, seed=6))
    assert encode(a) == encode(b)
    assert encode(a) != encode(c)


def test_synth_is_linearly_separable_at_zero_db():
    ep, _ = synth_dataset(SynthSpec(n_epochs=600, n_samples=64, snr_db=0.0, seed=1))
    x = ep.data.reshape(len(ep), -1).astype(np.float64)
    y = np.where(ep.labels == 1, 1.0, -1.0)
    tr, te = slice(0, 400), slice(400, None)
    perm = np.random.default_rng(0).permutation(len(ep))
    x, y = x[perm], y[perm]
    # ridge regression on raw samples as an independent, model-free separability oracle
    a = x[tr]
    w = np.linalg.solve(a.T @ a + 10.0 * np.eye(a.shape[1]), a.T @ y[tr])
    assert np.mean(np.sign(x[te] @ w) == y[te]) >= 0.9


@pytest.mark.parametrize("bad", [dict(n_classes=1), dict(n_epochs=0), dict(fs=-1.0),
                                 dict(n_epochs=101), dict(group_size=3, n_epochs=40)])
def test_invalid_synth_spec(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad)


# ---- runner ---------------------------------------------------------------------------


def test_child_seed_is_stable_and_role_specific():
    assert child_seed(0, "split") == child_seed(0, "split")
    assert child_seed(0, "split") != child_seed(1, "split")
    assert child_seed(0, "split") != child_seed(0, "synth")
    assert 0 <= child_seed(7, "x") < 2 ** 32


def test_config_rejects_unknown_and_invalid_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"architectures": ["eegnet"], "attacks": ["whitebox"], "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig(["eegnet"], ["whitebox"], epsilons=[-0.1])
    with pytest.raises(ValueError):
        ExperimentConfig(["nonet"], ["whitebox"])


GRID = dict(architectures=["eegnet", "deepcnn", "shallowcnn"], attacks=["whitebox", "fgsm"],
            epsilons=[0.1, 0.3], synth=dict(n_epochs=400, n_samples=64, snr_db=-10.0),
            split={"kind": "mixed"}, train=dict(max_epochs=15, patience=5), seed=3)


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    return run_experiment(ExperimentConfig(**GRID, out_dir=str(out)))


def test_grid_has_one_row_per_cell(grid_run):
    assert len(grid_run.cells()) == 3 * 1 * 2 * 2
    assert len(grid_run.baselines()) == 3
    header = grid_run.csv_path.read_text().splitlines()[0]
    assert tuple(header.split(",")) == COLUMNS
    assert len(read_report(grid_run.csv_path)) == 15


def test_whitebox_never_helps(grid_run):
    for r in grid_run.cells():
        if r["attack"] == "whitebox":
            assert r["adv_rca"] <= r["clean_rca"], r


def test_run_reproduces_from_disk(grid_run):
    assert verify_run(grid_run.csv_path.parent) == []


def test_rerun_gives_identical_report(grid_run, tmp_path):
    cfg = dict(GRID, architectures=["eegnet"])
    a = run_experiment(ExperimentConfig(**cfg, out_dir=str(tmp_path / "a")))
    b = run_experiment(ExperimentConfig(**cfg, out_dir=str(tmp_path / "b")))
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    # same master seed and role as the full grid, so the eegnet rows match it too
    full = [r for r in grid_run.rows if r["arch"] == "eegnet"]
    assert [r.get("adv_rca") for r in a.rows] == [r.get("adv_rca") for r in full]


def test_failed_cell_does_not_abort_the_grid(tmp_path):
    cfg = ExperimentConfig(architectures=["shallowcnn"],
                           attacks=[{"kind": "blackbox", "substitute": "shallowcnn", "query_budget": 1},
                                    "whitebox"],
                           epsilons=[0.1], synth=dict(n_epochs=120, n_samples=32),
                           train=dict(max_epochs=2, patience=1), out_dir=str(tmp_path))
    bundle = run_experiment(cfg)
    cells = bundle.manifest["units"][0]["cells"]
    assert [c["status"] for c in cells] == ["error", "ok"]
    assert "QueryBudgetExceeded" in cells[0]["error"]
    assert verify_run(tmp_path) == []


# ---- command line ---------------------------------------------------------------------


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "advkit", *args], capture_output=True, text=True,
                          cwd=cwd)


def test_cli_synth_is_deterministic(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_epochs": 40, "n_samples": 32}))
    for name in ("a", "b"):
        assert cli.main(["synth", "--config", str(spec), "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_cli_gradcheck_passes():
    p = run_cli("gradcheck", "--arch", "eegnet")
    assert p.returncode == 0, p.stderr
    err = float(p.stdout.split("max_rel_err=")[1].split()[0])
    assert err <= 1e-5


def test_cli_missing_config_is_usage_error():
    p = run_cli("attack")
    assert p.returncode == 1
    assert "usage:" in p.stderr and "--config" in p.stderr


def test_cli_unknown_subcommand():
    p = run_cli("frobnicate")
    assert p.returncode == 1
    assert "usage:" in p.stderr


def test_cli_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"architectures": ["eegnet"], "attacks": ["whitebox"], "oops": 1}))
    assert cli.main(["sweep", "--config", str(bad)]) == 1
    assert "oops" in capsys.readouterr().err


def test_cli_eval_and_report(grid_run, tmp_path, capsys):
    run = grid_run.csv_path.parent
    unit = grid_run.manifest["units"][0]
    cell = unit["cells"][0]
    out = tmp_path / "m.json"
    assert cli.main(["eval", "--model", str(run / unit["model"]), "--data", str(run / cell["adversarial"]),
                     "--clean", str(run / unit["test_set"]), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["rca"] == pytest.approx(grid_run.rows[1]["adv_rca"], abs=1e-12)
    assert rep["snr_db"] == pytest.approx(grid_run.rows[1]["snr_db"], abs=1e-6)
    capsys.readouterr()
    assert cli.main(["report", "--run", str(run), "--out", str(tmp_path / "tfr")]) == 0
    assert "time-frequency report" in capsys.readouterr().out
    assert any((tmp_path / "tfr").iterdir())
