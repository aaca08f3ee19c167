import json
import os

import numpy as np
import pytest

from anisofield import io as fio
from anisofield.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_IO, EXIT_PASS, OUT_ENV, main
from anisofield.lepage import FieldGrid

BASE_1D = {
    "schema_version": 1,
    "seed": 7,
    "matrix": [[1.0]],
    "kernel": {"kind": "harmonizable_os", "H": 0.5},
    "density": {"kind": "isotropic_mixture", "alpha0": 1.5, "r0": 2.718281828459045, "zeta": 0.1},
    "alpha": {"kind": "constant", "value": 1.5},
    "grid": {"box": [[0, 1]], "resolution": [256]},
    "N": 1000,
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(cmd, cfg_path, out, *extra):
    return main([cmd, "--config", cfg_path, "--out", str(out), *extra])


def with_(cfg, **kw):
    c = json.loads(json.dumps(cfg))
    c.update(kw)
    return c


# -- simulate ------------------------------------------------------------------

def test_simulate_three_files_reproducible(tmp_path):
    cfg = write_cfg(tmp_path, BASE_1D)
    assert run("simulate", cfg, tmp_path / "a") == EXIT_PASS
    assert run("simulate", cfg, tmp_path / "b", "--threads", "3") == EXIT_PASS
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["field.csv", "field.json", "field.pgm"]
    for ext in ("csv", "pgm"):
        a, b = (fio.file_sha256(tmp_path / d / f"field.{ext}") for d in "ab")
        assert a == b
    side = json.loads((tmp_path / "a" / "field.json").read_text())
    assert side["checksums"]["csv"] == fio.file_sha256(tmp_path / "a" / "field.csv")
    # every file carries the config hash
    h = side["config_hash"]
    assert h in (tmp_path / "a" / "field.csv").read_text()
    assert h.encode() in (tmp_path / "a" / "field.pgm").read_bytes()


def test_seed_flag_changes_output(tmp_path):
    cfg = write_cfg(tmp_path, BASE_1D)
    run("simulate", cfg, tmp_path / "a")
    run("simulate", cfg, tmp_path / "b", "--seed", "8")
    a, b = (fio.read_field_csv(tmp_path / d / "field.csv").values for d in "ab")
    assert not np.array_equal(a, b)


def test_simulate_H_constraint(tmp_path, capsys):
    cfg = write_cfg(tmp_path, with_(BASE_1D, kernel={"kind": "harmonizable_os", "H": 1.0}))
    assert run("simulate", cfg, tmp_path) == EXIT_CONFIG
    assert "H" in capsys.readouterr().err


def test_simulate_riesz_bessel_constraint(tmp_path):
    cfg = with_(BASE_1D, matrix=[[1.0, 0.0], [0.0, 2.0]],
                kernel={"kind": "riesz_bessel", "beta1": 0.7, "beta2": 0.7},
                density={"kind": "eigen_product", "zeta": 0.5},
                grid={"box": [[0, 1], [0, 1]], "resolution": [8, 8]})
    # q(E) = 3 so beta1 + beta2 must exceed 1.5
    assert run("simulate", write_cfg(tmp_path, cfg), tmp_path) == EXIT_CONFIG
    cfg["kernel"]["beta2"] = 1.0
    assert run("simulate", write_cfg(tmp_path, cfg), tmp_path / "ok") == EXIT_PASS


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(bogus=1),
    lambda c: c["kernel"].update(extra=2),
    lambda c: c.update(schema_version=2),
    lambda c: c.pop("N"),
    lambda c: c.update(alpha={"kind": "constant", "value": 2.5}),
    lambda c: c.update(source="cauchy"),
])
def test_invalid_configs(tmp_path, mutate):
    cfg = json.loads(json.dumps(BASE_1D))
    mutate(cfg)
    assert run("simulate", write_cfg(tmp_path, cfg), tmp_path) == EXIT_CONFIG


def test_config_not_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run("simulate", str(p), tmp_path) == EXIT_CONFIG


def test_missing_config_is_io_error(tmp_path):
    assert run("simulate", str(tmp_path / "nope.json"), tmp_path) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("simulate", write_cfg(tmp_path, BASE_1D), blocker / "sub") == EXIT_IO


def test_env_var_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["simulate", "--config", write_cfg(tmp_path, BASE_1D)]) == EXIT_PASS
    assert (tmp_path / "env" / "field.csv").exists()


# -- verify --------------------------------------------------------------------

def verify_cfg(**suite):
    return {"schema_version": 1, "seed": 1, "verify": suite}


def test_verify_tails_rademacher(tmp_path):
    cfg = write_cfg(tmp_path, verify_cfg(suite="tails", source="rademacher_real", M=10 ** 5))
    assert run("verify", cfg, tmp_path) == EXIT_PASS
    rep = json.loads((tmp_path / "field_verify_tails.json").read_text())
    assert rep["passed"] and len(rep["rows"]) == 4 and rep["config_hash"]


def test_verify_mgf_and_supsum(tmp_path):
    cfg = verify_cfg(suite="mgf", M=10 ** 5)
    assert run("verify", write_cfg(tmp_path, cfg), tmp_path) == EXIT_PASS
    cfg = verify_cfg(suite="supsum", M=10 ** 4, N_max=20)
    assert run("verify", write_cfg(tmp_path, cfg), tmp_path) == EXIT_PASS


def test_verify_rate_bad_pprime(tmp_path, capsys):
    cfg = write_cfg(tmp_path, verify_cfg(suite="rate", pprime=4))
    assert run("verify", cfg, tmp_path) == EXIT_CONFIG
    assert "admissible interval" in capsys.readouterr().err


def test_verify_unknown_suite_key(tmp_path):
    cfg = write_cfg(tmp_path, verify_cfg(suite="tails", t_grid=[1], colour="red"))
    assert run("verify", cfg, tmp_path) == EXIT_CONFIG


def test_verify_fdd_identical_densities(tmp_path):
    cfg = with_(BASE_1D, N=200, verify={"suite": "fdd", "M": 1000, "points": [[0.3], [0.7]],
                                        "char_args": [0.5, 1.0]})
    assert run("verify", write_cfg(tmp_path, cfg), tmp_path) == EXIT_PASS
    rep = json.loads((tmp_path / "field_verify_fdd.json").read_text())
    assert rep["passed"]


def test_verify_fails_with_exit_1(tmp_path):
    # an absurd slope tolerance turns the envelope check into a violation
    cfg = with_(BASE_1D, verify={"suite": "envelope", "slope_tol": 0.0, "max_spread": 1.0})
    assert run("verify", write_cfg(tmp_path, cfg), tmp_path) == EXIT_FAIL
    assert not json.loads((tmp_path / "field_verify_envelope.json").read_text())["passed"]


# -- estimate ------------------------------------------------------------------

def constant_grid(path, n=200):
    f = FieldGrid([[0, 1]], (n,), np.full(n, 2.0 + 0j))
    fio.write_field_csv(f, path, "abc")
    return str(path)


def test_estimate_constant_grid(tmp_path):
    inp = constant_grid(tmp_path / "const.csv")
    cfg = write_cfg(tmp_path, {"schema_version": 1, "estimate": {"input": inp, "axes": [0]}})
    assert run("estimate", cfg, tmp_path) == EXIT_PASS
    rep = json.loads((tmp_path / "field_estimate.json").read_text())
    assert any("zero increments" in n for n in rep["metadata"]["notes"])
    assert rep["fit"] is None
    assert (tmp_path / "field_estimate.csv").read_text().startswith("# config_hash: ")


def test_estimate_from_simulated_grid(tmp_path):
    assert run("simulate", write_cfg(tmp_path, BASE_1D), tmp_path / "sim") == EXIT_PASS
    cfg = {"schema_version": 1, "seed": 2,
           "estimate": {"input": str(tmp_path / "sim" / "field.csv"), "axes": [0],
                        "k_range": [2, 7], "beta": 0.4}}
    cfg_path = write_cfg(tmp_path, cfg)
    assert run("estimate", cfg_path, tmp_path / "e1") == EXIT_PASS
    assert run("estimate", cfg_path, tmp_path / "e2") == EXIT_PASS
    rep = json.loads((tmp_path / "e1" / "field_estimate.json").read_text())
    assert "0" in rep["directional"] and rep["holder_C"] > 0
    assert 0 < rep["fit"]["beta"] < 1.2
    for name in ("field_estimate.json", "field_estimate.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()


def test_estimate_inline_simulation(tmp_path):
    cfg = with_(BASE_1D, estimate={"k_range": [2, 7]})
    assert run("estimate", write_cfg(tmp_path, cfg), tmp_path) == EXIT_PASS


def test_estimate_corrupted_csv(tmp_path):
    inp = constant_grid(tmp_path / "c.csv")
    lines = open(inp).read().splitlines()
    lines[10] = lines[10][: len(lines[10]) // 2]
    open(inp, "w").write("\n".join(lines))
    cfg = write_cfg(tmp_path, {"schema_version": 1, "estimate": {"input": inp}})
    assert run("estimate", cfg, tmp_path) == EXIT_IO
    cfg = write_cfg(tmp_path, {"schema_version": 1, "estimate": {"input": str(tmp_path / "no")}})
    assert run("estimate", cfg, tmp_path) == EXIT_IO


# -- file formats --------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=12) + 1j * rng.normal(size=12)
    f = FieldGrid([[0, 1], [-1, 2]], (3, 4), vals, {"note": "x"})
    fio.write_field_csv(f, tmp_path / "f.csv", "h")
    g = fio.read_field_csv(tmp_path / "f.csv")
    assert np.array_equal(g.values, f.values) and g.resolution == (3, 4)
    assert g.metadata["note"] == "x" and g.metadata["config_hash"] == "h"


def test_pgm_roundtrip(tmp_path):
    vals = np.arange(12.0) + 0j
    f = FieldGrid([[0, 1], [0, 1]], (3, 4), vals)
    fio.write_pgm(f, tmp_path / "f.pgm", "hash123")
    img, comments = fio.read_pgm(tmp_path / "f.pgm")
    assert img.shape == (3, 4) and img[0, 0] == 0 and img[-1, -1] == 255
    assert np.all(np.diff(img.ravel().astype(int)) >= 0)
    assert "config_hash=hash123" in comments[0]


def test_pgm_constant_field(tmp_path):
    f = FieldGrid([[0, 1]], (5,), np.ones(5, complex))
    fio.write_pgm(f, tmp_path / "c.pgm")
    img, _ = fio.read_pgm(tmp_path / "c.pgm")
    assert img.shape == (1, 5) and np.all(img == 0)


def test_config_hash_is_canonical():
    assert fio.config_hash({"a": 1, "b": [1, 2]}) == fio.config_hash({"b": [1, 2], "a": 1})
    assert fio.config_hash({"a": 1}) != fio.config_hash({"a": 2})
