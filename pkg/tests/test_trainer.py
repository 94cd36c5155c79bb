import json
import os

import numpy as np
import pytest

from teachaug import checkpoint as ck
from teachaug import trainer as tr_mod
from teachaug.augment import ImageBatch
from teachaug.data import Dataset, ShapesSpec, batch_indices, generate_shapes, train_test_split
from teachaug.errors import ConfigError, NonFiniteError
from teachaug.numerics import Module, Optimizer, Tensor, check_gradients, no_grad, ops
from teachaug.objective import cross_entropy, target_objective
from teachaug.trainer import (
    CHECKPOINT_NAME, METRICS_NAME, TargetModel, TrainConfig, TrainRun, base_augment, evaluate,
    train,
)

SMALL = dict(batch_size=8, noise_dim=8, rgb_hidden=8, noise_hidden=16, geo_hidden=16)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def tiny():
    data = generate_shapes(ShapesSpec(n=72, height=8, width=8, seed=3))
    return train_test_split(data, 24)


def _params(mod: Module):
    return {k: v.copy() for k, v in mod.state_dict().items()}


# -- target model / helpers -------------------------------------------------
def test_target_model_shapes():
    m = TargetModel(3, 16, 12, np.random.default_rng(0))
    out = m(Tensor(np.zeros((2, 16, 12, 3), np.float32)))
    assert out.shape == (2, 3)
    with pytest.raises(ConfigError):
        TargetModel(3, 10, 12, np.random.default_rng(0))


def test_base_augment_flip_and_crop():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(50, 6, 6, 3))
    out = base_augment(x, np.random.default_rng(1), 0)
    for a, b in zip(out, x):
        assert np.array_equal(a, b) or np.array_equal(a, b[:, ::-1])
    padded = base_augment(x, np.random.default_rng(1), 2)
    assert padded.shape == x.shape
    assert padded.min() >= 0 and padded.max() <= 1


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(objective="bogus").validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(smoothing=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 1, "nope": 2})
    with pytest.raises(ConfigError):
        TrainConfig(teacher="pretrained").validate()


# -- evaluate ----------------------------------------------------------------
class Fixed:
    """Returns preset logits, looked up by an index encoded in pixel [0, 0, 0]."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def __call__(self, x):
        idx = np.rint(x.data[:, 0, 0, 0] * 1000).astype(int)
        return Tensor(self.logits[idx])


def _indexed(labels, k):
    n = len(labels)
    img = np.zeros((n, 2, 2, 3), np.float32)
    img[:, 0, 0, 0] = np.arange(n) / 1000
    return Dataset(img, np.asarray(labels, np.int64), k)


def test_evaluate_matches_confusion_matrix():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 100)
    logits = rng.standard_normal((100, 3))
    data = _indexed(labels, 3)
    acc, loss = evaluate(Fixed(logits), data, batch_size=7)
    conf = np.zeros((3, 3), int)
    for t, p in zip(labels, logits.argmax(1)):
        conf[t, p] += 1
    assert acc == np.trace(conf) / 100
    shifted = logits - logits.max(1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(1, keepdims=True))
    assert loss == pytest.approx(-logp[np.arange(100), labels].mean(), rel=1e-12)


def test_evaluate_perfect_and_uniform():
    labels = np.tile([0, 1, 2], 30)
    data = _indexed(labels, 3)
    acc, _ = evaluate(Fixed(np.eye(3)[labels] * 10), data)
    assert acc == 1.0
    acc, loss = evaluate(Fixed(np.zeros((90, 3))), data)   # argmax ties -> class 0
    assert acc == pytest.approx(1 / 3)
    assert loss == pytest.approx(np.log(3))


# -- inner step ---------------------------------------------------------------
def test_zero_lr_leaves_theta(tiny):
    train_set, _ = tiny
    run = TrainRun(small_cfg(lr_target=0.0, objective="teachaugment"), 3, (8, 8))
    before = _params(run.target)
    idx = batch_indices(len(train_set), 8, 0, 0)[0]
    loss = run.inner_step(run._batch(train_set, idx, np.random.default_rng(0)))
    assert np.isfinite(loss)
    for k, v in run.target.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert run.inner_steps == 1 and "train_loss" in run.stats.sums


def test_zero_policy_lr_leaves_phi(tiny):
    train_set, _ = tiny
    run = TrainRun(small_cfg(lr_policy=0.0, wd_policy=0.0), 3, (8, 8))
    before = _params(run.policy)
    run.policy_step(run._batch(train_set, np.arange(8), np.random.default_rng(0)))
    for k, v in run.policy.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_baseline_matches_hand_rolled_control(tiny):
    """baseline_none is a plain supervised loop: same losses, bit for bit."""
    train_set, _ = tiny
    cfg = small_cfg(objective="baseline_none", base_augment=False, epochs=3)
    run = TrainRun(cfg, 3, (8, 8))
    losses = []
    orig = run.inner_step
    run.inner_step = lambda b: losses.append(orig(b)) or losses[-1]
    train(run, train_set)

    model = TargetModel(3, 8, 8, run.streams.fresh("init.target"), np.float32)
    opt = Optimizer.sgd(model.named_parameters(), cfg.lr_target, momentum=cfg.momentum,
                        weight_decay=cfg.wd_target)
    control = []
    for epoch in range(3):
        for idx in batch_indices(len(train_set), cfg.batch_size, cfg.seed, epoch):
            model.train()
            opt.zero_grad()
            loss = target_objective(model(Tensor(train_set.images[idx])), train_set.onehot(idx))
            loss.backward()
            opt.step()
            control.append(loss.item())
    assert losses == control


def test_overfit_small_subset():
    data = generate_shapes(ShapesSpec(n=64, height=16, width=16, seed=7, palette_jitter=0.3,
                                      background_noise=0.15))
    run = TrainRun(TrainConfig(objective="baseline_none", base_augment=False, batch_size=32),
                   3, (16, 16))
    for epoch in range(150):
        for idx in batch_indices(64, 32, 0, epoch):
            run.inner_step(ImageBatch(data.images[idx], data.onehot(idx)))
    assert run.inner_steps == 300
    _, loss = evaluate(run.target, data)
    assert loss < 0.05


# -- policy step --------------------------------------------------------------
@pytest.mark.parametrize("kind,reg", [("teachaugment", 0.0), ("adv_aa", 10.0)])
def test_one_step_ascent(tiny, kind, reg):
    """From the identity init one policy step raises the ascended objective on
    the same batch and noise. The colour penalty is switched off for
    teachaugment: at the exact identity the SWD sits on its |.| kink, where the
    subgradient is zero but any move costs lambda * SWD at first order."""
    train_set, _ = tiny
    run = TrainRun(small_cfg(objective=kind, dtype="float64", color_reg=reg), 3, (8, 8))
    batch = run._batch(train_set, np.arange(16), np.random.default_rng(0))
    run.target.requires_grad_(False)
    run.target.eval()

    def objective():
        with no_grad():
            return -run.policy_objective(batch, np.random.default_rng(5))[0].item()

    start = objective()
    run.opt_policy.zero_grad()
    run.policy_objective(batch, np.random.default_rng(5))[0].backward()
    run.opt_policy.step()
    assert objective() > start


def test_pointaugment_step_descends(tiny):
    train_set, _ = tiny
    run = TrainRun(small_cfg(objective="pointaugment", dtype="float64"), 3, (8, 8))
    batch = run._batch(train_set, np.arange(16), np.random.default_rng(0))
    run.target.requires_grad_(False)
    run.target.eval()
    value = lambda: run.policy_objective(batch, np.random.default_rng(5))[0]  # noqa: E731
    with no_grad():
        start = value().item()
    run.opt_policy.zero_grad()
    value().backward()
    run.opt_policy.step()
    with no_grad():
        assert value().item() < start


@pytest.mark.parametrize("kind", ["teachaugment", "adv_aa", "pointaugment"])
@pytest.mark.parametrize("seed", range(2))
def test_policy_gradient_finite_differences(tiny, kind, seed):
    train_set, _ = tiny
    run = TrainRun(small_cfg(objective=kind, dtype="float64", seed=seed), 3, (8, 8))
    rng = np.random.default_rng(seed)
    for p in run.policy.parameters():     # move away from the zero-initialized output layers
        p.data = p.data + rng.normal(0, 0.3, p.shape)
    batch = run._batch(train_set, np.arange(8), np.random.default_rng(seed))
    run.target.requires_grad_(False)
    run.target.eval()
    res = check_gradients(lambda: run.policy_objective(batch, np.random.default_rng(11))[0],
                          run.policy.parameters(), eps=1e-6, max_coords=6, rng=rng)
    assert res.rel_error < 1e-3


# -- outer loop ---------------------------------------------------------------
def test_step_counters_and_replay_cadence(tiny):
    train_set, _ = tiny
    cfg = small_cfg(epochs=5, n_inner=2, n_buffer=2)
    run = TrainRun(cfg, 3, (8, 8))
    hist = train(run, train_set)
    per_epoch = len(train_set) // cfg.batch_size
    assert run.inner_steps == 5 * per_epoch
    assert run.policy_steps == run.inner_steps // cfg.n_inner
    assert len(run.buffer) == 5 // 2
    assert [h["replay_size"] for h in hist] == [0, 1, 1, 2, 2]
    for key in ("teacher_ratio", "mean_abs_A", "p_c", "target_loss_aug", "teacher_loss_clean"):
        assert np.isfinite(hist[-1][key])


def test_baseline_keeps_identity_policy(tiny):
    train_set, _ = tiny
    run = TrainRun(small_cfg(epochs=2, objective="baseline_none"), 3, (8, 8))
    before = _params(run.policy)
    hist = train(run, train_set)
    for k, v in run.policy.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert run.policy_steps == 0 and len(run.buffer) == 0
    assert hist[-1]["mean_abs_A"] == 0.0


@pytest.mark.parametrize("kind", ["consistency_mse", "consistency_kld", "pointaugment"])
def test_other_kinds_run(tiny, kind):
    train_set, test_set = tiny
    hist = train(TrainRun(small_cfg(epochs=1, objective=kind), 3, (8, 8)), train_set, test_set)
    assert np.isfinite(hist[0]["train_loss"]) and 0 <= hist[0]["test_acc"] <= 1


def test_zero_epochs_writes_initial_checkpoint_only(tiny, tmp_path):
    train_set, _ = tiny
    run = TrainRun(small_cfg(epochs=0), 3, (8, 8))
    assert train(run, train_set, out_dir=str(tmp_path)) == []
    assert sorted(os.listdir(tmp_path)) == [CHECKPOINT_NAME]
    back = TrainRun.from_checkpoint(ck.load(tmp_path / CHECKPOINT_NAME))
    assert back.epoch == 0
    for k, v in back.target.state_dict().items():
        np.testing.assert_array_equal(v, run.target.state_dict()[k])


def test_empty_dataset_rejected():
    run = TrainRun(small_cfg(epochs=1), 3, (8, 8))
    empty = Dataset(np.zeros((0, 8, 8, 3), np.float32), np.zeros(0, np.int64), 3)
    with pytest.raises(ConfigError):
        train(run, empty)
    few = Dataset(np.zeros((4, 8, 8, 3), np.float32), np.zeros(4, np.int64), 3)
    with pytest.raises(ConfigError):
        train(run, few)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_and_keeps_last_checkpoint(tiny, tmp_path, monkeypatch):
    train_set, _ = tiny
    run = TrainRun(small_cfg(epochs=3), 3, (8, 8))
    train(run, train_set, out_dir=str(tmp_path), epochs=1)
    good = (tmp_path / CHECKPOINT_NAME).read_bytes()
    monkeypatch.setattr(tr_mod, "target_objective", lambda logits, y: ops.log(logits * 0.0 - 1.0).sum())
    with pytest.raises(NonFiniteError):
        train(run, train_set, out_dir=str(tmp_path))
    assert (tmp_path / CHECKPOINT_NAME).read_bytes() == good


def test_determinism_and_resume(tiny, tmp_path):
    train_set, test_set = tiny
    cfg = small_cfg(epochs=4, n_buffer=1, n_inner=2)
    a, b, c = (tmp_path / n for n in "abc")
    train(TrainRun(cfg, 3, (8, 8)), train_set, test_set, out_dir=str(a))
    train(TrainRun(cfg, 3, (8, 8)), train_set, test_set, out_dir=str(b))
    assert (a / METRICS_NAME).read_bytes() == (b / METRICS_NAME).read_bytes()
    assert (a / CHECKPOINT_NAME).read_bytes() == (b / CHECKPOINT_NAME).read_bytes()

    train(TrainRun(cfg, 3, (8, 8)), train_set, test_set, out_dir=str(c), epochs=2)
    resumed = TrainRun.from_checkpoint(ck.load(c / CHECKPOINT_NAME))
    assert resumed.epoch == 2
    train(resumed, train_set, test_set, out_dir=str(c))
    assert (c / METRICS_NAME).read_bytes() == (a / METRICS_NAME).read_bytes()
    assert (c / CHECKPOINT_NAME).read_bytes() == (a / CHECKPOINT_NAME).read_bytes()
    lines = [json.loads(x) for x in (a / METRICS_NAME).read_text().splitlines()]
    assert [m["epoch"] for m in lines] == [1, 2, 3, 4]


def test_resume_drops_metric_lines_past_checkpoint(tiny, tmp_path):
    train_set, _ = tiny
    cfg = small_cfg(epochs=2)
    train(TrainRun(cfg, 3, (8, 8)), train_set, out_dir=str(tmp_path), epochs=1)
    saved = ck.load(tmp_path / CHECKPOINT_NAME)
    with open(tmp_path / METRICS_NAME, "a") as fh:   # simulate a crash after the metrics write
        fh.write(json.dumps({"epoch": 2}) + "\n")
    run = TrainRun.from_checkpoint(saved)
    train(run, train_set, out_dir=str(tmp_path))
    epochs = [json.loads(x)["epoch"] for x in (tmp_path / METRICS_NAME).read_text().splitlines()]
    assert epochs == [1, 2]


def test_pretrained_teacher_from_checkpoint(tiny, tmp_path):
    train_set, _ = tiny
    src = TrainRun(small_cfg(epochs=1, objective="baseline_none"), 3, (8, 8))
    train(src, train_set, out_dir=str(tmp_path / "src"))
    path = str(tmp_path / "src" / CHECKPOINT_NAME)
    run = TrainRun(small_cfg(epochs=1, teacher="pretrained", teacher_checkpoint=path, seed=9),
                   3, (8, 8))
    frozen = _params(run.teacher.model)
    for k, v in src.target.state_dict().items():
        np.testing.assert_array_equal(frozen[k], v)
    train(run, train_set)
    for k, v in run.teacher.model.state_dict().items():
        np.testing.assert_array_equal(v, frozen[k])


def test_teacher_loss_metrics_are_cross_entropies(tiny):
    train_set, _ = tiny
    run = TrainRun(small_cfg(), 3, (8, 8))
    batch = run._batch(train_set, np.arange(8), np.random.default_rng(0))
    run.policy_step(batch)
    with no_grad():
        expect = cross_entropy(run.teacher.model(Tensor(batch.pixels)), batch.labels).item()
    assert run.stats.mean("teacher_loss_clean") == pytest.approx(expect, rel=1e-6)
