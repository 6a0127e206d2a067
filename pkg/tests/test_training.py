import numpy as np
import pytest

from gridlens import gridworld as gw
from gridlens import training
from gridlens.model import ModelWeights

from conftest import SMALL, SMALL_SCENES


@pytest.fixture(scope="module")
def one_scene():
    return training.examples_for_scene(gw.generate_scenes(1, 0, SMALL_SCENES)[0], SMALL)


def test_memorizes_one_scene(one_scene):
    log = training.TrainingLog()
    training.train_model(SMALL, one_scene, training.Hyperparams(steps=400, batch_size=8), 0, log)
    assert log.final_accuracy == 1.0
    assert log.losses[-1] < log.initial_loss


def test_short_run_descends(one_scene):
    log = training.TrainingLog()
    training.train_model(SMALL, one_scene, training.Hyperparams(steps=40, batch_size=8), 1, log)
    assert np.mean(log.losses[-5:]) < log.initial_loss


def test_fixed_seed_identical_weights(one_scene):
    hp = training.Hyperparams(steps=6, batch_size=4)
    a = training.train_model(SMALL, one_scene, hp, 5)
    b = training.train_model(SMALL, one_scene, hp, 5)
    assert all(np.array_equal(v, b.numpy()[k]) for k, v in a.numpy().items())
    c = training.train_model(SMALL, one_scene, hp, 6)
    assert not all(np.array_equal(v, c.numpy()[k]) for k, v in a.numpy().items())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        training.train_model(SMALL, [])


def test_divergence_returns_last_finite_checkpoint(one_scene):
    hp = training.Hyperparams(steps=200, lr=1e6, clip_norm=0.0, momentum=0.99)
    with pytest.raises(training.TrainingError) as info:
        training.train_model(SMALL, one_scene, hp, 0)
    ckpt = info.value.checkpoint
    assert isinstance(ckpt, ModelWeights)
    assert all(np.all(np.isfinite(v)) for v in ckpt.numpy().values())


def test_examples_cover_every_template(one_scene):
    assert {e.template for e in one_scene} == {"localize", "classify_binary", "classify_list"}
    assert any(e.answer[0] == "no" for e in one_scene)
