"""Unit tests for outfit-only DREAM training, the optimizer and the training loop."""

import numpy as np
import pytest
from recatvton.checkpoint import load_checkpoint
from recatvton.denoiser import DenoiserInputSpec, TinyUNet, TinyUNetConfig, TinyUNetParams
from recatvton.dreamtrain import (
    accumulate_gradients,
    adamw_step,
    AdamWState,
    clip_grad_norm,
    cond_dropout,
    dream_target,
    dropout_decision,
    micro_batch_loss,
    omega_t,
    outfit_only_loss,
    read_metrics_log,
    rectify_input,
    train_step,
    TrainConfig,
    Trainer,
    validation_loss
)
from recatvton.errors import InsufficientSamples, InvalidConfig, ShapeMismatch
from recatvton.gridcore import DuoGrid, LatentGrid, spatial_concat
from recatvton.guidance import assemble_conditional_input, assemble_unconditional_input
from recatvton.rng import stream
from recatvton.schedule import build_schedule, NoiseSchedule
from recatvton.toydata import gen_dataset, SceneParams


def fixed_schedule(alpha_bar):
    a = np.array([alpha_bar])
    return NoiseSchedule(kind="linear", beta=1.0 - a, alpha=a, alpha_bar=a)


@pytest.fixture(scope="module")
def schedule():
    return build_schedule("linear", 20, 1e-3, 2e-1)


@pytest.fixture(scope="module")
def scenes():
    return gen_dataset(1, 4, 2, SceneParams(C=2, H=8, W=8, n_patterns=3)).train


@pytest.fixture(scope="module")
def net():
    spec = DenoiserInputSpec(latent_channels=2, region_height=8, width=8)
    return TinyUNet(TinyUNetConfig(spec, features=4, groups=2, T=20))


def small_config(**kwargs):
    values = dict(batch_size=2, grad_accum=2, steps=2, lr=1e-3)
    values.update(kwargs)
    return TrainConfig(**values)


def single(name, values):
    return TinyUNetParams({name: np.array(values, dtype=float)})


# ----------------------------------------------------------------------
# DREAM formulas

def test_omega_t():
    s = fixed_schedule(0.75)
    assert omega_t(10.0, 0, s) == pytest.approx(0.0009765625, rel=1e-12)
    assert omega_t(0.0, 0, s) == 1.0
    with pytest.raises(InvalidConfig):
        omega_t(-1.0, 0, s)


def test_dream_target():
    rng = np.random.default_rng(0)
    eps = rng.normal(size=(2, 3, 4))
    assert np.array_equal(dream_target(eps, eps, 0.7), eps)
    assert np.array_equal(dream_target(eps, rng.normal(size=eps.shape), 0.0), eps)
    assert dream_target(np.array(1.0), np.array(0.4), 0.5) == pytest.approx(1.3)


def test_rectify_input():
    s = fixed_schedule(0.36)
    z_bar = np.zeros((1, 2, 1))
    out = rectify_input(z_bar, np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 2.0, 0, s)
    assert out[0, 0, 0] == pytest.approx(1.6)
    assert out[0, 1, 0] == 0.0

    rng = np.random.default_rng(1)
    duo = DuoGrid.from_array(rng.normal(size=(2, 6, 3)))
    eps = rng.normal(size=(2, 3, 3))
    assert rectify_input(duo, eps, eps, 5.0, 0, s).equals(duo)
    with pytest.raises(ShapeMismatch):
        rectify_input(np.zeros((2, 4, 3)), eps, eps, 1.0, 0, s)


# ----------------------------------------------------------------------
# Loss

def test_outfit_only_loss_arithmetic():
    pred = np.zeros((1, 2, 2))
    pred[0, 0] = [0.3, -0.1]
    breakdown, grad = outfit_only_loss(pred, np.zeros((1, 1, 2)))
    assert breakdown.person_mse == pytest.approx(0.05)
    assert breakdown.objective == breakdown.person_mse
    assert np.allclose(grad[0, 0], [0.3, -0.1])
    assert np.all(grad[0, 1] == 0.0)


def test_outfit_only_loss_ignores_garment_rows():
    rng = np.random.default_rng(2)
    pred = DuoGrid.from_array(rng.normal(size=(2, 8, 4)))
    target = LatentGrid(rng.normal(size=(2, 4, 4)))
    perturbed = pred.data.copy()
    perturbed[:, 4:] += rng.choice([-1000.0, 1000.0], size=(2, 4, 4))
    a, grad_a = outfit_only_loss(pred, target, t=3, omega_t_value=0.5)
    b, grad_b = outfit_only_loss(DuoGrid.from_array(perturbed), target, t=3, omega_t_value=0.5)
    assert a == b
    assert grad_a.equals(grad_b)
    assert np.all(grad_a.garment.data == 0.0)
    assert a.t_sampled == 3 and a.omega_t_value == 0.5

    matching = spatial_concat(target, LatentGrid(perturbed[:, 4:]))
    assert outfit_only_loss(matching, target)[0].person_mse == 0.0


# ----------------------------------------------------------------------
# Condition dropout

def test_dropout_decision():
    rng = np.random.default_rng(3)
    assert not any(dropout_decision(rng, 0.0) for _ in range(100))
    assert all(dropout_decision(rng, 1.0) for _ in range(100))
    rng = stream(9, 1)
    fraction = np.mean([dropout_decision(rng, 0.1) for _ in range(100_000)])
    assert 0.094 <= fraction <= 0.106
    with pytest.raises(InvalidConfig):
        dropout_decision(rng, 1.5)


def test_cond_dropout_selects_input(scenes):
    scene = scenes[0]
    zt = spatial_concat(scene.person_full, scene.garment)
    rng = np.random.default_rng(4)
    args = (zt, scene.mask, scene.person_masked, scene.garment)
    kept = cond_dropout(rng, 0.0, "recatvton", *args)
    assert kept.grid.equals(assemble_conditional_input(*args).grid)
    dropped = cond_dropout(rng, 1.0, "recatvton", *args)
    assert np.all(dropped.grid.data[:, 8:] == 0.0)


@pytest.mark.parametrize("variant", ["catvton", "recatvton"])
def test_dropped_input_is_the_sampling_unconditional_input(scenes, variant):
    scene = scenes[1]
    zt = DuoGrid.from_array(np.random.default_rng(5).normal(size=(2, 16, 8)))
    dropped = cond_dropout(
        np.random.default_rng(6), 1.0, variant, zt, scene.mask, scene.person_masked,
        scene.garment
    )
    unconditional = assemble_unconditional_input(variant, zt, scene.mask, scene.person_masked)
    assert np.array_equal(dropped.grid.data, unconditional.grid.data)


# ----------------------------------------------------------------------
# Optimizer

def test_clip_grad_norm():
    grads = single("stem.weight", [3.0, 4.0])
    clipped, total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.allclose(clipped["stem.weight"], [0.6, 0.8])
    small = single("stem.weight", [0.3, 0.4])
    unchanged, total = clip_grad_norm(small, 1.0)
    assert total == pytest.approx(0.5)
    assert np.array_equal(unchanged["stem.weight"], [0.3, 0.4])


def test_adamw_decay_only():
    params = single("stem.weight", [1.0, -2.0])
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    new, state = adamw_step(AdamWState.zeros(params), params, params.zeros_like(), cfg)
    assert np.allclose(new["stem.weight"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))
    assert state.step == 1


def test_adamw_first_step_is_sign():
    params = single("stem.weight", [0.0, 0.0, 0.0])
    grads = single("stem.weight", [2.0, -0.5, 1e-3])
    cfg = TrainConfig(lr=0.01, weight_decay=0.0)
    new, _ = adamw_step(AdamWState.zeros(params), params, grads, cfg)
    g = grads["stem.weight"]
    assert np.allclose(new["stem.weight"], -0.01 * g / (np.abs(g) + 1e-8))


def test_adamw_skips_frozen_groups():
    params = TinyUNetParams({"stem.weight": np.ones(2), "head.conv.bias": np.ones(2)})
    grads = TinyUNetParams({"stem.weight": np.ones(2), "head.conv.bias": np.ones(2)})
    cfg = TrainConfig(lr=0.1, freeze=("stem",))
    new, state = adamw_step(AdamWState.zeros(params), params, grads, cfg)
    assert np.array_equal(new["stem.weight"], params["stem.weight"])
    assert np.all(state.m["stem.weight"] == 0.0)
    assert np.all(new["head.conv.bias"] < 1.0)


def test_adamw_rejects_layout_mismatch():
    params = single("stem.weight", [1.0])
    with pytest.raises(ShapeMismatch):
        adamw_step(AdamWState.zeros(params), params, single("stem.weight", [1.0, 2.0]),
                   TrainConfig())


def test_train_config_rejects():
    with pytest.raises(InvalidConfig):
        TrainConfig(dropout_p=1.5)
    with pytest.raises(InvalidConfig):
        TrainConfig(loss="l1")
    with pytest.raises(InvalidConfig):
        TrainConfig(freeze=("encoder",))


# ----------------------------------------------------------------------
# Training step

def test_zero_dream_weight_matches_plain_loss(net, scenes, schedule):
    params = net.init_params(0)
    keys = [(0, 0, j) for j in range(len(scenes))]
    plain, plain_grads = micro_batch_loss(
        net, params, params, scenes, keys, small_config(dream=False), schedule
    )
    vanishing, grads = micro_batch_loss(
        net, params, params, scenes, keys, small_config(dream_lambda=1e6), schedule
    )
    assert [b.person_mse for b in plain] == [b.person_mse for b in vanishing]
    assert all(b.omega_t_value == 0.0 for b in plain + vanishing)
    assert all(np.array_equal(plain_grads[k], grads[k]) for k in grads)


def test_full_loss_covers_both_regions(net, scenes, schedule):
    params = net.init_params(0)
    keys = [(0, 0, j) for j in range(len(scenes))]
    losses, _ = micro_batch_loss(net, params, params, scenes, keys,
                                 small_config(loss="full"), schedule)
    assert all(b.omega_t_value == 0.0 for b in losses)
    assert any(b.objective != b.person_mse for b in losses)


def test_train_step_is_deterministic(net, scenes, schedule):
    params = net.init_params(0)
    cfg = small_config()
    a = train_step(net, params, AdamWState.zeros(params), scenes, 0, cfg, schedule)
    b = train_step(net, params, AdamWState.zeros(params), scenes, 0, cfg, schedule)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in params)
    assert len(a.losses) == 4
    assert np.isfinite(a.loss) and a.grad_norm > 0
    c = train_step(net, params, AdamWState.zeros(params), scenes, 1, cfg, schedule)
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in params)


def test_train_step_respects_freeze(net, scenes, schedule):
    params = net.init_params(0)
    cfg = small_config(freeze=("stem", "block1"))
    result = train_step(net, params, AdamWState.zeros(params), scenes, 0, cfg, schedule)
    for name in params:
        frozen = params.group_of(name) in ("stem", "block1")
        assert np.array_equal(result.params[name], params[name]) == frozen


def test_step_gradient_matches_finite_differences(net, scenes, schedule):
    rng = np.random.default_rng(7)
    params = net.init_params(3)
    for name in params:
        params[name][...] += 0.1 * rng.normal(size=params[name].shape)
    frozen = params.copy()
    cfg = small_config(dream_lambda=1.0)
    direction = TinyUNetParams({k: rng.normal(size=v.shape) for k, v in params.items()})

    def objective(h):
        shifted = TinyUNetParams({k: v + h * direction[k] for k, v in params.items()})
        losses, _ = accumulate_gradients(net, shifted, frozen, scenes, 0, cfg, schedule)
        return sum(b.objective for b in losses) / (cfg.batch_size * cfg.grad_accum)

    losses, grads = accumulate_gradients(net, params, frozen, scenes, 0, cfg, schedule)
    assert any(b.omega_t_value > 0.0 for b in losses)
    analytic = sum(float((grads[k] * direction[k]).sum()) for k in params)
    h = 1e-5
    numeric = (objective(h) - objective(-h)) / (2 * h)
    assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_frozen_pass_contributes_no_gradient(net, scenes, schedule):
    params = net.init_params(0)
    keys = [(0, 0, j) for j in range(len(scenes))]
    cfg = small_config(dream_lambda=1.0)
    shared, shared_grads = micro_batch_loss(net, params, params, scenes, keys, cfg, schedule)
    copied, copied_grads = micro_batch_loss(
        net, params, params.copy(), scenes, keys, cfg, schedule
    )
    assert shared == copied
    assert all(np.array_equal(shared_grads[k], copied_grads[k]) for k in params)

    step = train_step(net, params, AdamWState.zeros(params), scenes, 0, cfg, schedule)
    _, grads = accumulate_gradients(net, params, params.copy(), scenes, 0, cfg, schedule)
    norm = np.sqrt(sum(float((g ** 2).sum()) for _, g in grads.items()))
    assert step.grad_norm == pytest.approx(norm, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_training_reduces_validation_loss(net, schedule, seed):
    scenes = gen_dataset(seed, 16, 0, SceneParams(C=2, H=8, W=8, n_patterns=3)).train
    params = net.init_params(seed)
    before = validation_loss(net, params, scenes, schedule, seed=seed)
    cfg = small_config(steps=40, lr=1e-2, batch_size=4, grad_accum=1, seed=seed)
    trained, _ = Trainer(net, cfg, schedule, scenes).fit(params)
    assert validation_loss(net, trained, scenes, schedule, seed=seed) < before


def test_train_step_needs_scenes(net, schedule):
    params = net.init_params(0)
    with pytest.raises(InsufficientSamples):
        train_step(net, params, AdamWState.zeros(params), [], 0, small_config(), schedule)


def test_validation_loss(net, scenes, schedule):
    params = net.init_params(0)
    a = validation_loss(net, params, scenes, schedule)
    assert a == validation_loss(net, params, scenes, schedule)
    assert np.isfinite(a) and a > 0
    with pytest.raises(InsufficientSamples):
        validation_loss(net, params, [], schedule)


# ----------------------------------------------------------------------
# Training loop

def test_trainer_writes_log_and_checkpoints(net, scenes, schedule, tmp_path):
    trainer = Trainer(net, small_config(steps=3), schedule, scenes, run_dir=tmp_path,
                      config={"train.steps": 3}, checkpoint_every=2,
                      validation_scenes=scenes[:1])
    trainer.fit(net.init_params(0))
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.rcvt")) == [
        "ckpt_0000002.rcvt", "ckpt_0000003.rcvt"
    ]
    log = read_metrics_log(tmp_path / "metrics.jsonl")
    assert log["step"].tolist() == [0, 1, 2]
    assert (log["grad_norm"] > 0).all()
    checkpoint = load_checkpoint(tmp_path / "ckpt_0000003.rcvt")
    assert checkpoint.step == 3 and checkpoint.optimizer_step == 3
    assert checkpoint.config == {"train.steps": 3}


def test_resume_matches_uninterrupted_run(net, scenes, schedule, tmp_path):
    params = net.init_params(0)
    full, _ = Trainer(net, small_config(steps=4), schedule, scenes).fit(params)

    Trainer(net, small_config(steps=2), schedule, scenes, run_dir=tmp_path).fit(params)
    checkpoint = load_checkpoint(tmp_path / "ckpt_0000002.rcvt")
    state = AdamWState(checkpoint.m, checkpoint.v, checkpoint.optimizer_step)
    resumed, _ = Trainer(net, small_config(steps=4), schedule, scenes).fit(
        checkpoint.params, state=state, start_step=checkpoint.step
    )
    assert all(np.array_equal(full[k], resumed[k]) for k in params)


def test_rerun_replaces_logged_steps(net, scenes, schedule, tmp_path):
    params = net.init_params(0)
    for _ in range(2):
        Trainer(net, small_config(steps=2), schedule, scenes, run_dir=tmp_path).fit(params)
    assert read_metrics_log(tmp_path / "metrics.jsonl")["step"].tolist() == [0, 1]


def test_resume_keeps_logged_steps_unique(net, scenes, schedule, tmp_path):
    params = net.init_params(0)
    Trainer(net, small_config(steps=4), schedule, scenes, run_dir=tmp_path,
            checkpoint_every=2).fit(params)
    first = read_metrics_log(tmp_path / "metrics.jsonl")
    checkpoint = load_checkpoint(tmp_path / "ckpt_0000002.rcvt")
    state = AdamWState(checkpoint.m, checkpoint.v, checkpoint.optimizer_step)
    Trainer(net, small_config(steps=4), schedule, scenes, run_dir=tmp_path).fit(
        checkpoint.params, state=state, start_step=checkpoint.step
    )
    log = read_metrics_log(tmp_path / "metrics.jsonl")
    assert log["step"].tolist() == [0, 1, 2, 3]
    assert log["loss"].tolist() == first["loss"].tolist()


def test_trainer_rejects_bad_intervals(net, scenes, schedule):
    with pytest.raises(InvalidConfig):
        Trainer(net, small_config(), schedule, scenes, checkpoint_every=0)


def test_read_metrics_log_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_metrics_log(tmp_path / "metrics.jsonl")
