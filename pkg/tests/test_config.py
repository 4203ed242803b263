import numpy as np
import pytest

from drlqr.config import ConfigError, ExperimentConfig, derive_seed


def test_defaults_follow_study():
    cfg = ExperimentConfig()
    assert cfg.verify.m_list == [10, 20, 500]
    assert cfg.pg.alpha == 1e-3 and cfg.anneal.schedule == [[1.0, 1e-3, 20]]
    assert cfg.sgd.alpha == 2e-4 and cfg.sgd.gamma0 == 0.99
    assert cfg.entropic.t == 1.0 and cfg.n_mc == 100_000
    fam, dist, cost, norm = cfg.problem()
    assert fam.name == "pendulum" and cost.is_normalized and norm.scale == 1.0


def test_roundtrip(tmp_path):
    cfg = ExperimentConfig.from_dict({"seeds": [3, 4], "verify": {"m_list": [5]}, "cost": {"q": [[2, 0], [0, 1]]}})
    cfg.dump(tmp_path / "c.yaml")
    assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg


def test_empty_file(tmp_path):
    (tmp_path / "e.yaml").write_text("")
    assert ExperimentConfig.load(tmp_path / "e.yaml") == ExperimentConfig()


@pytest.mark.parametrize("data", [
    {"pg": {"alpha": -1}},
    {"delta": 1.5},
    {"sgd": {"gamma0": 1.0}},
    {"algorithm": "newton"},
    {"lower": [1.0, 1.0], "upper": [0.5, 0.5]},
    {"seeds": 0},
    {"unknown": 1},
    {"pg": {"bogus": 1}},
    {"pg": 3},
    {"anneal": {"schedule": [[1.0, 0.0, 20]]}},
    {"verify": {"m_list": [0]}},
])
def test_validation(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_bad_yaml(tmp_path):
    (tmp_path / "b.yaml").write_text("a: [1, 2")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "b.yaml")


def test_dimension_mismatch():
    cfg = ExperimentConfig.from_dict({"lower": [1.0], "upper": [1.0]})
    with pytest.raises(ConfigError):
        cfg.problem()


def test_seed_expansion():
    cfg = ExperimentConfig.from_dict({"seeds": 5, "master_seed": 9})
    seeds = cfg.run_seeds()
    assert seeds == ExperimentConfig.from_dict({"seeds": 5, "master_seed": 9}).run_seeds()
    assert len(set(seeds)) == 5
    assert seeds[:3] == ExperimentConfig.from_dict({"seeds": 3, "master_seed": 9}).run_seeds()
    assert seeds != ExperimentConfig.from_dict({"seeds": 5, "master_seed": 10}).run_seeds()
    assert ExperimentConfig.from_dict({"seeds": [7, 8]}).run_seeds() == [7, 8]


def test_derive_seed_streams_disjoint():
    assert derive_seed(0, 1) != derive_seed(0, 2) != derive_seed(0, 0, 0)
    assert derive_seed(0, 3, 1) == int(np.random.SeedSequence([0, 3, 1]).generate_state(1)[0])


def test_affine_family_config():
    cfg = ExperimentConfig.from_dict({
        "family": {"kind": "affine", "a0": [[0.9, 0.1], [0.0, 1.1]], "b0": [[0.0], [1.0]],
                   "a_dirs": [[[0.0, 0.0], [0.0, 0.1]]]},
        "lower": [-1.0], "upper": [1.0],
    })
    fam, dist, cost, _ = cfg.problem()
    assert fam.parameter_dim == 1 and cost.d_x == 2


def test_nonidentity_cost_normalized():
    cfg = ExperimentConfig.from_dict({"cost": {"q": [[0.5, 0], [0, 2]], "r": [[3.0]]}})
    _, _, cost, norm = cfg.problem()
    assert cost.is_normalized and norm.scale == pytest.approx(0.5)
