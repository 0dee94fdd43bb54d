import json

import pytest

from bgnn.config import RunConfig, config_from_dict, load_config
from bgnn.errors import ContractError


def write_toml(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


class TestLoading:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.model.n_stages == 3
        assert cfg.model.n_iterations == 3
        assert cfg.sampler.t == 0.07
        assert cfg.sampler.gamma_d == 0.7
        assert cfg.model.alpha_init == 2.2
        assert cfg.model.beta_init == 0.025
        assert cfg.model.rho_init == -5.0

    def test_load_toml(self, tmp_path):
        path = write_toml(tmp_path, """
[model]
d_entity = 16
n_stages = 2
gating_mode = "hard_topk"
top_n = 4

[sampler]
t = 0.1
gamma_d = 0.5

[loss]
lambda_rce = 0.5

[train]
steps = 33
seed = 9

[synthetic]
n_images = 5
n_entities_range = [3, 4]
""")
        cfg = load_config(path)
        assert cfg.model.d_entity == 16
        assert cfg.model.n_stages == 2
        assert cfg.model.gating_mode == "hard_topk"
        assert cfg.sampler.t == 0.1
        assert cfg.loss.lambda_rce == 0.5
        assert cfg.train.steps == 33
        assert cfg.synthetic.n_entities_range == (3, 4)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[model]\nd_entty = 16\n")
        with pytest.raises(ContractError, match="d_entty"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[optimizer]\nlr = 0.1\n")
        with pytest.raises(ContractError, match="optimizer"):
            load_config(path)

    def test_invalid_toml_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[model\n")
        with pytest.raises(ContractError):
            load_config(path)

    def test_invalid_model_values_rejected(self, tmp_path):
        path = write_toml(tmp_path, "[model]\nn_stages = 0\n")
        with pytest.raises(ContractError):
            load_config(path)


class TestSnapshot:
    def test_snapshot_round_trips_through_json(self):
        cfg = RunConfig()
        cfg.model.gating_mode = "linear_combo"
        cfg.train.steps = 77
        snap = json.loads(json.dumps(cfg.snapshot()))
        restored = config_from_dict(snap)
        assert restored.model.gating_mode == "linear_combo"
        assert restored.train.steps == 77
        assert restored.synthetic.n_entities_range == cfg.synthetic.n_entities_range
        assert restored.snapshot() == cfg.snapshot()
