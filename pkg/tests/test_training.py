import numpy as np
import pytest

from mimscape.dataio import generate_synthetic
from mimscape.model import ViTModel
from mimscape.params import ParameterSet
from mimscape.tensor import ContractError
from mimscape.training import (OptimizerState, TrainConfig, TrainingError, adamw_step, linear_probe,
                               trainable_names, train)

from conftest import TINY


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(48, TINY, seed=0)


def test_adamw_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(g) when |g| >> eps
    p = ParameterSet(w=np.array([1.0, -2.0, 0.5]))
    new, state = adamw_step(p, {"w": np.array([3.0, -0.1, 1e-3])}, OptimizerState.zeros(p), lr=0.01, wd=0.0)
    np.testing.assert_allclose(new["w"], [0.99, -1.99, 0.49], atol=1e-7)
    assert state.step == 1


def test_adamw_decoupled_decay_with_zero_gradient():
    p = ParameterSet(w=np.array([2.0]))
    new, _ = adamw_step(p, {"w": np.array([0.0])}, OptimizerState.zeros(p), lr=0.1, wd=0.5)
    assert new["w"][0] == 2.0 - 0.1 * 0.5 * 2.0


def test_adamw_converges_on_square():
    p = ParameterSet(w=np.array([3.0, -4.0]))
    state = OptimizerState.zeros(p)
    for _ in range(2000):
        p, state = adamw_step(p, {"w": 2 * p["w"]}, state, lr=0.01, wd=0.0)
    assert np.abs(p["w"]).max() < 1e-2


def test_adamw_leaves_frozen_names_untouched():
    p = ParameterSet(a=np.ones(2), b=np.ones(2))
    new, _ = adamw_step(p, {"a": np.ones(2)}, OptimizerState.zeros(p), lr=0.1, wd=0.1)
    assert new["b"] is p["b"]


def test_adamw_rejects_non_finite_gradient():
    p = ParameterSet(w=np.ones(2))
    with pytest.raises(TrainingError, match="w"):
        adamw_step(p, {"w": np.array([1.0, np.nan])}, OptimizerState.zeros(p), lr=0.1, wd=0.0)


def test_trainable_names_by_regime(tiny_model):
    assert not any(n.startswith("head") for n in trainable_names(tiny_model, "mae"))
    assert "mask_token" not in trainable_names(tiny_model, "supervised")
    assert trainable_names(tiny_model, "probe") == ["head.weight", "head.bias"]
    with pytest.raises(ContractError):
        TrainConfig(regime="dino")


def test_zero_epochs_returns_initial_params(tiny_model, tiny_data):
    ckpt = train(tiny_model, tiny_data, TrainConfig(regime="mae", epochs=0))
    assert ckpt.params.bitwise_equal(tiny_model.params)
    assert ckpt.metadata["loss_history"] == []


@pytest.mark.parametrize("regime", ["supervised", "mae", "rcmae"])
def test_training_is_deterministic_and_reduces_loss(tiny_model, tiny_data, regime):
    cfg = TrainConfig(regime=regime, epochs=6, batch_size=16, learning_rate=3e-3, seed=2)
    a, b = train(tiny_model, tiny_data, cfg), train(tiny_model, tiny_data, cfg)
    assert a.equals(b)
    hist = a.metadata["loss_history"]
    assert len(hist) == 6 and hist[-1] < hist[0]
    assert (a.teacher is not None) == (regime == "rcmae")


def test_frozen_groups_survive_training(tiny_model, tiny_data):
    ckpt = train(tiny_model, tiny_data, TrainConfig(regime="mae", epochs=1, batch_size=16))
    for name in tiny_model.names("head"):
        assert np.array_equal(ckpt.params[name], tiny_model.params[name])


def test_rcmae_with_zero_decay_and_zero_weight_matches_mae(tiny_model, tiny_data):
    mae = train(tiny_model, tiny_data, TrainConfig(regime="mae", epochs=2, batch_size=16, seed=4))
    rc = train(tiny_model, tiny_data, TrainConfig(regime="rcmae", epochs=2, batch_size=16, seed=4,
                                                  consistency_weight=0.0, ema_decay=0.0))
    assert rc.params.bitwise_equal(mae.params)
    assert rc.teacher.bitwise_equal(rc.params)


def test_linear_probe_freezes_encoder_and_beats_chance():
    data = generate_synthetic(96, TINY, seed=0)
    held = generate_synthetic(60, TINY, seed=0, split="eval")
    source = train(ViTModel.create(TINY, seed=0), data, TrainConfig(regime="mae", epochs=3, batch_size=16))
    probe = linear_probe(source.model(), data, held, TrainConfig(regime="probe", epochs=60, batch_size=16,
                                                                  learning_rate=3e-2))
    for name in source.params:
        if not name.startswith("head"):
            assert np.array_equal(probe.params[name], source.params[name])
    assert probe.metadata["chance_accuracy"] == pytest.approx(1 / 3)
    assert probe.metadata["probe_accuracy"] > probe.metadata["chance_accuracy"]


def test_untrained_probe_head_is_at_chance():
    from mimscape.model import ViTConfig

    cfg = ViTConfig()
    train_set = generate_synthetic(64, cfg, seed=0)
    held = generate_synthetic(256, cfg, seed=0, split="eval")
    for seed in range(3):
        probe = linear_probe(ViTModel.create(cfg, seed=seed), train_set, held, TrainConfig(regime="probe", epochs=0))
        assert abs(probe.metadata["chance_accuracy"] - 1 / 8) <= 0.05
