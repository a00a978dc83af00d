import json
import struct

import numpy as np
import pytest

from saigformer import gradcheck, network, sai2e, train
from saigformer import params as P
from saigformer import tensor as T
from saigformer.network import CheckpointError, ConfigError, ModelConfig
from saigformer.tensor import ShapeError, Tensor

TOY = dict(base_channels=8, block_counts=(1, 1, 1, 2, 1, 1, 1, 1), heads=(1, 2, 2, 4))


def toy(**kw):
    return ModelConfig(**{**TOY, **kw})


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(block_counts=(1, 2, 3))
    with pytest.raises(ConfigError, match="does not divide"):
        ModelConfig(base_channels=6, heads=(4, 4, 4, 8))
    with pytest.raises(ConfigError):
        ModelConfig(head_illum_mode="both")
    with pytest.raises(ConfigError, match="unknown model config keys: depth"):
        ModelConfig.from_dict({"depth": 3})
    cfg = toy()
    assert ModelConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_same_seed_same_weights():
    a, b = network.init_model(toy(seed=3)), network.init_model(toy(seed=3))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)
    c = network.init_model(toy(seed=4))
    assert not np.array_equal(a["embed.weight"].data, c["embed.weight"].data)


@pytest.mark.parametrize("variant", sai2e.VARIANTS)
@pytest.mark.parametrize("mode", ["replicate", "single"])
def test_identity_at_init(variant, mode):
    w = network.init_model(toy(illum_variant=variant, head_illum_mode=mode))
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 24)))
    assert np.array_equal(network.forward(w, x).data, x.data)


def test_shape_ladder_and_invocation_counts():
    w = network.init_model(ModelConfig(base_channels=8, block_counts=(1,) * 8, heads=(1, 2, 2, 4)))
    x = Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 64, 64)))
    sai2e.CALLS.clear()
    trace = {}
    y = network.forward(w, x, trace)
    assert y.shape == x.shape
    assert sai2e.CALLS["estimate_illumination"] == 1
    assert sai2e.CALLS["downsample_illumination"] == 3
    assert [m.shape[2] for m in trace["pyramid"]] == [64, 32, 16, 8]
    sizes = {k: v[2] for k, v in trace["shapes"].items()}
    assert sizes == {"enc1": 64, "enc2": 32, "enc3": 16, "bottleneck": 8, "dec3": 16, "dec2": 32, "dec1": 64, "refine": 64}
    chans = {k: v[1] for k, v in trace["shapes"].items()}
    assert chans["bottleneck"] == 64 and chans["refine"] == 8


def test_divisibility_error_mentions_padding():
    w = network.init_model(toy())
    with pytest.raises(ShapeError, match="reflect-pad"):
        network.forward(w, Tensor(np.zeros((1, 3, 20, 16))))


def test_param_count_rules():
    assert P.conv("c", 5, 7, 1)["c.weight"].size + P.conv("c", 5, 7, 1)["c.bias"].size == 7 * 5 + 5
    for cfg in (toy(), toy(head_illum_mode="single"), toy(illum_variant="avgpool2")):
        assert network.param_count(cfg) == network.init_model(cfg).num_params()


def test_default_param_count_and_search():
    from saigformer.cli import param_search

    n = network.param_count(ModelConfig())
    assert n == 10_010_659
    best = param_search()[0]
    assert abs(best["rel_gap"]) < 0.10
    assert best["params"] == network.param_count(
        ModelConfig(ffn_expansion=best["ffn_expansion"], head_illum_mode=best["head_illum_mode"])
    )


def test_every_parameter_receives_gradient():
    # zero-initialized projections block upstream gradients at step 0, so a
    # few optimizer steps come first
    with T.precision("float64"):
        w = network.init_model(toy(precision="float64"))
        data = train.synthetic_corpus(2, 16)
        cfg = train.TrainConfig(iterations=10, batch_size=2, crop_size=16, lr_start=1e-3, lr_end=1e-3)
        state = train.AdamState.zeros(w.params)
        for it in range(3):
            low, normal, _ = train.make_batch(data, it, cfg, np.float64)
            train.train_step(w, low, normal, state, 1e-3, cfg)
        w.zero_grad()
        low, normal, _ = train.make_batch(data, 3, cfg, np.float64)
        train.total_loss(network.forward(w, low), normal, cfg)[0].backward()
    dead = [k for k, p in w.params.items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_one_step_decreases_loss():
    w = network.init_model(toy())
    data = train.synthetic_corpus(1, 32)
    cfg = train.TrainConfig(batch_size=1, crop_size=32)
    low, normal, _ = train.make_batch(data, 0, cfg, np.float32)
    before = train.total_loss(network.forward(w, low), normal, cfg)[0].item()
    train.train_step(w, low, normal, train.AdamState.zeros(w.params), 1e-4, cfg)
    after = train.total_loss(network.forward(w, low), normal, cfg)[0].item()
    assert after < before


def test_network_gradients():
    reports = gradcheck.suite_network(0)
    assert all(r.ok for r in reports), [r.line() for r in reports]


# -- checkpoints --------------------------------------------------------------


def perturbed(cfg):
    w = network.init_model(cfg)
    rng = np.random.default_rng(5)
    for p in w.params.values():
        p.data = (p.data + rng.standard_normal(p.shape) * 0.01).astype(p.dtype)
    return w


def test_checkpoint_round_trip_bit_identical(tmp_path):
    w = perturbed(toy())
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    network.save_checkpoint(w, a)
    loaded = network.load_checkpoint(a, expect=w.config)
    assert list(loaded.params) == list(w.params)
    assert all(np.array_equal(loaded[k].data, w[k].data) for k in w.params)
    network.save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()


def _rewrite_header(path, fn):
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen])
    fn(header)
    new = json.dumps(header).encode()
    path.write_bytes(raw[:8] + struct.pack("<I", len(new)) + new + raw[12 + hlen :])


def test_checkpoint_errors(tmp_path):
    w = perturbed(toy())
    path = tmp_path / "m.ckpt"
    network.save_checkpoint(w, path)

    with pytest.raises(CheckpointError) as e:
        network.load_checkpoint(path, expect=toy(base_channels=16, heads=(1, 2, 4, 8)))
    assert "base_channels" in e.value.fields and "base_channels" in str(e.value)

    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        network.load_checkpoint(bad)

    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError, match="magic"):
        network.load_checkpoint(bad)

    bad.write_bytes(path.read_bytes())
    _rewrite_header(bad, lambda h: h.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        network.load_checkpoint(bad)

    bad.write_bytes(path.read_bytes())
    _rewrite_header(bad, lambda h: h["manifest"][3].update(offset=h["manifest"][3]["offset"] + 4))
    with pytest.raises(CheckpointError, match="offset"):
        network.load_checkpoint(bad)

    raw = path.read_bytes()
    bad.write_bytes(raw[:12] + b"{garbage" + raw[20:])
    with pytest.raises(CheckpointError, match="corrupt header"):
        network.load_checkpoint(bad)


def test_float64_model_checkpoint_stores_f32(tmp_path):
    w = perturbed(toy(precision="float64"))
    network.save_checkpoint(w, tmp_path / "m.ckpt")
    back = network.load_checkpoint(tmp_path / "m.ckpt")
    k = "embed.weight"
    assert back[k].dtype == np.float64
    assert np.array_equal(back[k].data, w[k].data.astype(np.float32).astype(np.float64))
