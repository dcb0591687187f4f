from __future__ import annotations

import pytest
import torch

from evosearch.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from evosearch.config import ConfigError, PipelineConfig, dump_config, load_config
from evosearch.model import Adam, AdapterSet, ModelConfig, Policy, backward

MICRO = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, context_length=64)


def test_checkpoint_roundtrip_with_adapters_and_optimizer(tmp_path):
    pol = Policy.initialize(MICRO, seed=1)
    pol.adapters = AdapterSet.create(MICRO, 2, 4.0, seed=3, init_up="random")
    opt = Adam(1e-3)
    for t in pol.params.values():
        t.requires_grad_(True)
    tokens = torch.tensor([[3, 4, 5, 6]])
    opt.step(pol.params, backward(pol.logprobs(tokens).sum(), pol.params))
    save_checkpoint(tmp_path / "a.ckpt", pol, opt, meta={"stage": "test"})
    back, header = load_checkpoint(tmp_path / "a.ckpt")
    assert back.cfg == MICRO
    assert header["meta"] == {"stage": "test"} and header["optimizer"]["t"] == 1
    for k in pol.params:
        assert torch.equal(back.params[k], pol.params[k].detach())
    for k, v in pol.adapters.tensors().items():
        assert torch.equal(back.adapters.tensors()[k], v)
    for k in opt.m:
        assert torch.equal(header["optim_state"]["m"][k], opt.m[k])
    assert torch.equal(back.logprobs(tokens), pol.logprobs(tokens).detach())


def test_checkpoint_float64_and_bytes_stable(tmp_path):
    pol = Policy.initialize(MICRO, seed=2, dtype=torch.float64)
    save_checkpoint(tmp_path / "a.ckpt", pol)
    save_checkpoint(tmp_path / "b.ckpt", pol)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "a.ckpt")[0].dtype == torch.float64


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.ckpt")


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config(None)
    assert cfg == PipelineConfig()
    assert cfg.grpo.clip_ratio == 0.2 and cfg.grpo.kl_coeff == 0.001 and cfg.grpo.steps_per_round == 200
    assert cfg.opsd.pool_size == 8 and cfg.opsd.tau_clip == 10.0
    assert cfg.rollout.t_max == 4 and cfg.rollout.group_size == 5
    assert cfg.pipeline.n_cycles == 2
    path = tmp_path / "c.yaml"
    path.write_text("grpo:\n  lr: 0.01\nrollout:\n  group_size: 3\n")
    cfg = load_config(path, {"pipeline.seed": 7})
    assert cfg.grpo.lr == 0.01 and cfg.rollout.group_size == 3 and cfg.pipeline.seed == 7
    dump_config(cfg, tmp_path / "round.yaml")
    assert load_config(tmp_path / "round.yaml") == cfg


@pytest.mark.parametrize("text", ["grpo:\n  nope: 1\n", "mystery:\n  a: 1\n", "- 1\n- 2\n", "grpo: [\n",
                                  "grpo:\n  clip_ratio: 1.5\n", "pipeline:\n  n_cycles: 0\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    smoke = load_config(root / "smoke.yaml")
    assert smoke.pipeline.n_cycles == 1
    assert smoke.grpo.steps_per_round <= 500
    assert load_config(root / "default.yaml").pipeline.n_cycles == 2
