import numpy as np
import pytest
from conftest import random_frame, random_params

from pishgu import data, metrics, model, training
from pishgu import numerics as nx
from pishgu.errors import ConfigError, ContractError, NonFiniteGradientError
from pishgu.model import ModelConfig, ModelParams
from pishgu.training import AdamState, TrainConfig


def small_corpus(seed=0, n_frames=3):
    s = data.DatasetSpec("t", "vehicle_birdseye", "meters", 1.0, 1.0, 3, 2)
    pts = data.synth_scene("constant_velocity", 3, s.window_length + n_frames - 1, seed=seed, speed=(0.05, 0.15), extent=2.0)
    return s, data.group_frames(data.build_windows(pts, s))


# -- loss --------------------------------------------------------------------


def test_loss_identity_zero():
    y = np.random.default_rng(0).normal(size=(2, 6, 2))
    assert training.loss(y, y).item() == 0.0


def test_loss_single_error():
    y = np.zeros((2, 6, 2))
    p = y.copy()
    p[1, 3, 0] = 0.7
    assert training.loss(p, y).item() == pytest.approx(0.49 / 24, abs=1e-15)


def test_loss_matches_loop():
    r = np.random.default_rng(1)
    y, p = r.normal(size=(3, 4, 2)), r.normal(size=(3, 4, 2))
    total = 0.0
    for i in range(3):
        for t in range(4):
            for c in range(2):
                total += (p[i, t, c] - y[i, t, c]) ** 2
    assert abs(training.loss(p, y).item() - total / 24) < 1e-12


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        training.loss(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))


# -- adam --------------------------------------------------------------------


def one_param_model(tiny_cfg, value=0.0):
    params = ModelParams.init(tiny_cfg)
    for _, t in params:
        t.data = np.full(t.shape, value)
    return params


def test_adam_first_step_hand_evaluation(tiny_cfg):
    params = one_param_model(tiny_cfg)
    grads = {name: np.ones(t.shape) for name, t in params}
    training.adam_step(params, grads, AdamState.zeros(params), TrainConfig())
    for _, t in params:
        np.testing.assert_allclose(t.data, -0.01, rtol=0, atol=1e-9)


def test_adam_second_step_hand_evaluation(tiny_cfg):
    params = one_param_model(tiny_cfg)
    state = AdamState.zeros(params)
    cfg = TrainConfig()
    training.adam_step(params, {"gin.theta": np.array([1.0])}, state, cfg)
    training.adam_step(params, {"gin.theta": np.array([-2.0])}, state, cfg)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    step2 = -0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = -0.01 / (1 + 1e-8)
    np.testing.assert_allclose(params["gin.theta"].data, [step1 + step2], rtol=0, atol=1e-15)


def test_adam_zero_gradient_is_noop(tiny_cfg):
    params = random_params(tiny_cfg, seed=0)
    before = params.copy()
    training.adam_step(params, {n: np.zeros(t.shape) for n, t in params}, AdamState.zeros(params), TrainConfig())
    for (_, a), (_, b) in zip(params, before):
        np.testing.assert_array_equal(a.data, b.data)


def test_adam_rejects_non_finite(tiny_cfg):
    params = ModelParams.init(tiny_cfg)
    grads = {"conv2.bias": np.array([np.nan] * 4)}
    with pytest.raises(NonFiniteGradientError, match="conv2.bias"):
        training.adam_step(params, grads, AdamState.zeros(params), TrainConfig())


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = training.clip_by_global_norm(grads, 1.0)
    np.testing.assert_allclose(clipped["a"], [0.6])
    np.testing.assert_allclose(clipped["b"], [0.8])
    assert training.clip_by_global_norm(grads, 10.0) is grads


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"epochs": -1}, "epochs"),
        ({"learning_rate": 0.0}, "learning_rate"),
        ({"beta1": 1.0}, "beta1"),
        ({"beta2": -0.1}, "beta2"),
        ({"epsilon": 0.0}, "epsilon"),
        ({"gradient_clip": 0.0}, "gradient_clip"),
        ({"eval_every": 0}, "eval_every"),
    ],
)
def test_train_config_validation(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**kwargs)


def test_train_presets():
    assert training.TRAIN_PRESETS["vehicle"].epochs == 40
    assert training.TRAIN_PRESETS["pedestrian"].epochs == 80
    assert all(p.learning_rate == 0.01 for p in training.TRAIN_PRESETS.values())


# -- loop --------------------------------------------------------------------


def test_train_step_gradient_matches_finite_difference(tiny_cfg, rng):
    params = random_params(tiny_cfg, seed=1)
    frame = random_frame(rng, 2, 3, 2)
    inputs = [t for _, t in params]
    fn = lambda *_: training.loss(model.forward(frame, params), frame.future)  # noqa: E731
    coords = [(i, 0) for i in range(len(inputs))]
    assert nx.grad_check(fn, inputs, coords=coords) < 1e-4


def test_zero_epochs_returns_initial(tiny_cfg):
    _, frames = small_corpus()
    init = ModelParams.init(tiny_cfg, seed=0)
    params, history = training.train(frames, tiny_cfg, TrainConfig(epochs=0), params=init.copy())
    assert history == []
    for (_, a), (_, b) in zip(params, init):
        np.testing.assert_array_equal(a.data, b.data)


def test_identical_seeds_identical_runs(tiny_cfg):
    _, frames = small_corpus()
    cfg = TrainConfig(epochs=3, seed=5)
    p1, h1 = training.train(frames, tiny_cfg, cfg, val=frames[:1])
    p2, h2 = training.train(frames, tiny_cfg, cfg, val=frames[:1])
    assert h1 == h2
    for (_, a), (_, b) in zip(p1, p2):
        assert a.data.tobytes() == b.data.tobytes()


def test_training_reduces_loss(tiny_cfg):
    _, frames = small_corpus()
    _, history = training.train(frames, tiny_cfg, TrainConfig(epochs=30, gradient_clip=1.0))
    assert history[-1].train_loss < history[0].train_loss


def test_eval_every_controls_validation(tiny_cfg):
    _, frames = small_corpus()
    _, history = training.train(frames, tiny_cfg, TrainConfig(epochs=5, eval_every=2), val=frames)
    assert [r.val_loss is not None for r in history] == [False, True, False, True, True]


def test_train_rejects_mismatched_windows(tiny_cfg):
    _, frames = small_corpus()
    cfg = ModelConfig(t_in=4, t_out=2, features_per_step=2, conv_channels=(4, 4, 4), cbam_reduction=2)
    with pytest.raises(ContractError, match="T_in"):
        training.train(frames, cfg, TrainConfig(epochs=1))


def test_train_rejects_empty_dataset(tiny_cfg):
    with pytest.raises(ConfigError):
        training.train([], tiny_cfg, TrainConfig(epochs=1))


def test_training_log(tmp_path):
    hist = [training.EpochRecord(1, 0.5, None), training.EpochRecord(2, 0.25, 0.3)]
    training.write_training_log(hist, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text() == "epoch,train_loss,val_loss\n1,0.5,\n2,0.25,0.3\n"


# -- evaluation --------------------------------------------------------------


def stationary_frames(n_frames=2, n=3):
    frames = []
    r = np.random.default_rng(0)
    for k in range(n_frames):
        ws = []
        for i in range(n):
            p = r.normal(size=2) * 5
            ws.append(data.make_window(str(i), k, np.tile(p, (3, 1)), np.tile(p, (2, 1))))
        frames.append(data.make_frame(ws))
    return frames


def test_zero_head_on_stationary_truth(tiny_cfg):
    s = data.DatasetSpec("t", "vehicle_birdseye", "meters", 1.0, 1.0, 3, 2)
    params = random_params(tiny_cfg, seed=0)
    params["head.weight"].data[:] = 0.0
    params["head.bias"].data[:] = 0.0
    rep = training.evaluate(stationary_frames(), params, s)
    assert rep.ade == 0.0 and rep.fde == 0.0
    assert rep.n_subjects == 6
    assert rep.parameter_count == model.parameter_count(params)


def test_evaluate_counts_every_window(tiny_cfg):
    s, frames = small_corpus(n_frames=4)
    rep = training.evaluate(frames, ModelParams.init(tiny_cfg), s)
    assert rep.n_subjects == sum(len(f) for f in frames)
    assert [h for h, _ in rep.rmse_per_second] == [1.0, 2.0]


def test_evaluate_uses_absolute_coordinates(tiny_cfg):
    s, frames = small_corpus()
    params = random_params(tiny_cfg, seed=2)
    truth, pred = training.collect_predictions(frames, params)
    expected = np.concatenate([f.future + f.normalization_offset for f in frames])
    np.testing.assert_array_equal(truth, expected)
    rep = training.evaluate(frames, params, s)
    assert rep.ade == pytest.approx(metrics.ade(truth, pred), abs=1e-12)


def test_evaluate_rejects_mismatched_spec(tiny_cfg):
    s, frames = small_corpus()
    other = data.DatasetSpec("t", "vehicle_birdseye", "meters", 1.0, 1.0, 3, 5)
    with pytest.raises(ContractError, match="T_out"):
        training.evaluate(frames, ModelParams.init(tiny_cfg), other)


def test_baseline_report_on_straight_lines():
    s, frames = small_corpus()
    rep = training.baseline_report(frames, s, metrics.constant_velocity_predict)
    assert rep.ade == pytest.approx(0.0, abs=1e-12)
