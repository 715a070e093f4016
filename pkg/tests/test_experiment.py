import json
import math

import numpy as np
import pytest

from pmpotts import experiment as ex
from pmpotts.experiment import ConfigError, ExperimentConfig, StudyFailure, preset, run_study
from pmpotts.metrics import modal_select
from pmpotts.samplers import read_long_csv


def small_toy(**kw):
    raw = {"study": "toy", "width": 10, "height": 10, "J": [0.4], "replicates": 2, "seed": 3,
           "smc": {"n_particles": 10, "n_temperatures": 5},
           "samplers": [{"kind": "nwpm", "n": 6}, {"kind": "indep"}, {"kind": "nwse", "n": 6},
                        {"kind": "nwma", "n": 7, "kappa": 3}]}
    raw.update(kw)
    return ExperimentConfig.from_dict(raw)


# --- configuration -------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    {"study": "weather"},
    {"J": [-0.1]},
    {"J": ["x"]},
    {"colour": "red"},
    {"smc": {"n_particles": 1}},
    {"smc": {"bogus": 1}},
    {"samplers": []},
    {"samplers": [{"kind": "gibbs", "n": 3}]},
    {"samplers": [{"kind": "nwpm"}]},
    {"samplers": [{"kind": "nwma", "n": 5, "kappa": 0.5}]},
    {"samplers": [{"kind": "nwpm", "n": 5}, {"kind": "nwpm", "n": 5}]},
    {"burn_in": 10, "samplers": [{"kind": "nwpm", "n": 5}]},
    {"width": 12, "height": 12},
    {"replicates": 0},
    {"seed": -1},
    {"seed": 1.5},
    {"pair_sum": "both"},
    {"init": "random"},
    {"data_path": "/nonexistent/data.csv"},
    {"study": "custom"},
    {"pet": {"error": "cauchy"}},
    {"toy": {"mu0": {"A": 1.0}}},
])
def test_invalid_configs_rejected(bad):
    raw = {"study": "toy"}
    raw.update(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_round_trip_and_hash():
    cfg = small_toy()
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.config_hash == cfg.config_hash
    assert cfg.replace(workers=4, out="elsewhere").config_hash == cfg.config_hash
    assert cfg.replace(seed=4).config_hash != cfg.config_hash
    assert len(cfg.config_hash) == 16


def test_pair_sum_convention():
    assert small_toy().edge_coupling(0.4) == pytest.approx(0.8)
    assert small_toy(pair_sum="edges").edge_coupling(0.4) == pytest.approx(0.4)


def test_sampler_overrides_and_labels():
    cfg = small_toy(samplers=[{"kind": "nwpm", "n": 5, "n_particles": 30}, {"kind": "nwma", "n": 5, "kappa": 2}])
    assert cfg.smc_config(cfg.samplers[0]).n_particles == 30
    assert cfg.smc_config(cfg.samplers[0]).n_temperatures == 5
    assert [s.label for s in cfg.samplers] == ["nwpm_n5_N30", "nwma_n5_k2"]


def test_presets_are_valid():
    for name in ex.PRESETS:
        cfg = preset(name)
        assert cfg.out == f"runs/{name}"
    s1 = preset("toy-study1")
    assert s1.J == pytest.approx([0.2 * i for i in range(26)]) and s1.replicates == 50
    assert (s1.smc.n_particles, s1.smc.n_temperatures, s1.samplers[0].n) == (50, 80, 100)
    large = preset("toy-study1-large")
    problem = ex.build_problem(large)
    assert problem.graph.n_nodes == 10_000 and problem.states == ("C", "D", "E")
    assert large.toy.mu0 == {"C": 7.0, "D": 0.0, "E": -7.0}
    assert set(np.unique(problem.truth)) == {0, 1, 2}
    desk = preset("pet-sim-desk")
    assert (desk.width, desk.replicates, desk.smc.n_particles, desk.smc.n_temperatures) == (10, 10, 100, 200)
    with pytest.raises(ConfigError):
        preset("nope")


def test_pet_problem_truth():
    problem = ex.build_problem(preset("pet-sim-desk"))
    assert problem.states == (1, 2, 3)
    assert np.bincount(problem.truth, minlength=3).tolist() == [26, 49, 25]


def test_custom_study_with_mask(tmp_path):
    (tmp_path / "mask.txt").write_text("0 0 1\n0 1 1\n")
    cfg = ExperimentConfig.from_dict({"study": "custom", "model": "toy", "width": 3, "height": 2,
                                      "mask": str(tmp_path / "mask.txt"), "mapping": {"0": "A", "1": "B"}})
    assert ex.build_problem(cfg).truth.tolist() == [0, 0, 1, 0, 1, 1]
    with pytest.raises(ConfigError):
        cfg.replace(width=4)


# --- running -------------------------------------------------------------------

def test_run_study_outputs_and_accounting(tmp_path):
    cfg = small_toy()
    rep = run_study(cfg, tmp_path)
    V, D = 100, 2
    counts = {(c["sampler"], c["replicate"]): c["n_estimates"] for c in rep.cells}
    for r in range(2):
        assert counts[("nwpm_n6", r)] == 6 * V
        assert counts[("nwse_n6", r)] == V * D
        assert counts[("nwma_n7_k3", r)] == V * D * (1 + 7 // 3)
        assert counts[("indep", r)] == V * D
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config_hash"] == cfg.config_hash and man["seed"] == 3
    assert "workers" not in man["config"]
    for name in man["files"]:
        path = tmp_path / name
        assert path.read_text().startswith(f"# config_hash={cfg.config_hash}"), name
    table = {(a, J): (m, n) for a, J, m, s, n in rep.table()}
    assert table[("nwpm_n6", 0.4)][1] == 2
    assert math.isnan(next(J for a, J, *_ in rep.table() if a == "indep"))
    it_rows = [ln for ln in (tmp_path / "iterations.csv").read_text().splitlines()[2:] if ln.startswith("nwpm")]
    assert len(it_rows) == 6


def test_stored_trace_selection_matches_in_process(tmp_path):
    cfg = small_toy(replicates=1)
    rep = run_study(cfg, tmp_path)
    problem = ex.build_problem(cfg)
    fields = read_long_csv(tmp_path / "replicates/r000/nwpm_n6_J0.4/trace.csv", 100, problem.states)
    sel = modal_select(fields, n_states=2).selected
    pc = 100.0 * np.mean(sel == problem.truth)
    assert pc == pytest.approx(rep.values("nwpm_n6")[0])


def test_simulate_then_run_on_file_is_identical(tmp_path):
    cfg = small_toy(replicates=1)
    ex.simulate(cfg, tmp_path / "sim")
    run_study(cfg, tmp_path / "a")
    run_study(cfg.replace(data_path=str(tmp_path / "sim" / "data.csv")), tmp_path / "b")
    for name in ("nwpm_n6_J0.4/trace.csv", "nwse_n6_J0.4/trace.csv", "evidence_N10_T5.csv"):
        a = (tmp_path / "a/replicates/r000" / name).read_text().splitlines()[1:]
        b = (tmp_path / "b/replicates/r000" / name).read_text().splitlines()[1:]
        assert a == b


def test_fresh_and_fixed_data():
    problem = ex.build_problem(small_toy())
    fresh = [ex.replicate_data(small_toy(), problem, r) for r in (0, 1)]
    fixed = [ex.replicate_data(small_toy(data="fixed"), problem, r) for r in (0, 1)]
    assert not np.array_equal(*fresh)
    assert np.array_equal(*fixed) and np.array_equal(fixed[0], fresh[0])


def test_pet_study_writes_vd_table(tmp_path):
    cfg = preset("pet-sim-desk", replicates=1, smc={"n_particles": 8, "n_temperatures": 4},
                 samplers=[{"kind": "indep"}, {"kind": "nwse", "n": 5}])
    run_study(cfg, tmp_path)
    lines = (tmp_path / "vd_rmse.csv").read_text().splitlines()
    assert lines[1] == "sampler,J,mode,mean_rmse,se,n"
    assert len(lines) == 2 + 2 * 2
    assert (tmp_path / "replicates/r000/nwse_n5_J0.4/vd_map.csv").exists()


def test_partial_failure_policy(tmp_path, monkeypatch):
    real = ex.run_replicate

    def flaky(bad):
        def run(cfg, r, out=None):
            if r in bad:
                raise ex.ComputeBudgetError("too many failed estimates")
            return real(cfg, r, out)
        return run

    cfg = small_toy(replicates=10, samplers=[{"kind": "indep"}])
    monkeypatch.setattr(ex, "run_replicate", flaky({4}))
    rep = run_study(cfg, tmp_path / "one")
    assert rep.failures == [(4, "ComputeBudgetError: too many failed estimates")]
    assert len(rep.cells) == 9
    monkeypatch.setattr(ex, "run_replicate", flaky({1, 2}))
    with pytest.raises(StudyFailure):
        run_study(cfg, tmp_path / "two")
    assert len((tmp_path / "two/failures.csv").read_text().splitlines()) == 4


def test_workers_do_not_change_outputs(tmp_path):
    cfg = small_toy(replicates=2, samplers=[{"kind": "nwpm", "n": 4}, {"kind": "indep"},
                                          {"kind": "nwma", "n": 4, "kappa": 2}])
    run_study(cfg, tmp_path / "w1", workers=1)
    run_study(cfg, tmp_path / "w2", workers=2)
    files = sorted(p.relative_to(tmp_path / "w1") for p in (tmp_path / "w1").rglob("*")
                   if p.is_file() and "runtime" not in p.parts)
    assert files
    for f in files:
        assert (tmp_path / "w1" / f).read_bytes() == (tmp_path / "w2" / f).read_bytes(), f


# --- variance probing -------------------------------------------------------------

def test_probe_variance_scaling(tmp_path):
    cfg = small_toy()
    rows = ex.probe_variance(cfg, "A", [(50, 20), (200, 20)], replicates=300, out=tmp_path / "v.csv")
    assert len(rows) == 2
    ratio = rows[0][3] / rows[1][3]
    assert 2.5 < ratio < 6.5
    body = (tmp_path / "v.csv").read_text().splitlines()
    assert body[1] == "N,T,mean_log_z,var_log_z,se_var,replicates" and len(body) == 4


def test_probe_variance_falls_with_particles():
    cfg = small_toy()
    y = np.array([5.0])
    var = [r[3] for r in ex.probe_variance(cfg, "A", [(10, 10), (100, 10), (1000, 10)], replicates=50, y=y)]
    assert var[0] > var[1] > var[2]
    with pytest.raises(ConfigError):
        ex.probe_variance(cfg, "Z", [(10, 10)])
