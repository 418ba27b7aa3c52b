import numpy as np
import pytest

from falcon_dehaze import imaging
from falcon_dehaze.density import ddp
from falcon_dehaze.network import FalconConfig, trainable
from falcon_dehaze.tensor import StateError, Tensor, graph_ops
from falcon_dehaze.trainer import (
    AdamState,
    ConfigError,
    Prefetcher,
    TrainConfig,
    Trainer,
    adam_step,
    augment,
    batch_indices,
    load_pairs,
    make_batch,
    train,
)


def adam_reference(grad_fn, x0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out per the textbook recurrence."""
    x, m, v = list(x0), [0.0] * len(x0), [0.0] * len(x0)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] -= lr * mh / (vh**0.5 + eps)
    return x


def test_adam_zero_gradient_is_noop():
    w = {"a": np.ones(3, dtype=np.float32)}
    adam_step(w, {"a": np.zeros(3)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(w["a"], 1.0)


def test_adam_first_step_moves_by_lr():
    w = {"a": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
    adam_step(w, {"a": np.array([5.0, -0.01, 1e3])}, AdamState(), lr=0.01)
    # bias correction makes the first step +-lr regardless of gradient scale
    np.testing.assert_allclose(w["a"], [0.99, -1.99, 2.99], atol=1e-6)


def test_adam_on_quadratic_matches_reference():
    target = np.array([1.0, -2.0, 0.5])
    grad_fn = lambda x: [2 * (xi - ti) for xi, ti in zip(x, target)]  # noqa: E731
    x0 = [0.0, 0.0, 0.0]
    w = {"x": np.array(x0, dtype=np.float64)}
    state = AdamState()
    for _ in range(10):
        adam_step(w, {"x": 2 * (w["x"] - target)}, state, lr=0.05)
    np.testing.assert_allclose(w["x"], adam_reference(grad_fn, x0, 0.05, 10), atol=1e-6)
    assert state.step == 10


def test_adam_missing_gradient():
    with pytest.raises(StateError, match="b"):
        adam_step({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.zeros(1)}, AdamState(), lr=0.1)


def test_augment_applies_same_transform_to_both(rng):
    hazy = rng.random((10, 12, 3)).astype(np.float32)
    a, b = augment((hazy, hazy.copy()), seed=(0, 1, 2), crop_size=8)
    assert a.shape == (8, 8, 3)
    np.testing.assert_array_equal(a, b)


def test_augment_flips_only_when_drawn(rng):
    img = rng.random((6, 6, 3))
    a, _ = augment((img, img), seed=0, flip_prob=0.0)
    np.testing.assert_array_equal(a, img)
    b, _ = augment((img, img), seed=0, flip_prob=1.0)
    np.testing.assert_array_equal(b, img[::-1, ::-1])


def test_augment_crop_bounds():
    with pytest.raises(ValueError):
        augment((np.zeros((4, 4, 3)), np.zeros((4, 4, 3))), seed=0, crop_size=5)


def test_flips_commute_with_density_mask(rng):
    img = rng.random((12, 12, 3)).astype(np.float32)
    flipped, _ = augment((img, img), seed=0, flip_prob=1.0)
    dm = lambda a: ddp(Tensor(a.transpose(2, 0, 1)[None].copy()), 5).data[0, 0]  # noqa: E731
    np.testing.assert_array_equal(dm(flipped), dm(img)[::-1, ::-1])


def test_batches_cover_each_epoch():
    seen = np.concatenate([batch_indices(16, 5, seed=3, step=s) for s in range(16)])
    # 80 draws = 5 epochs of 16, each epoch a permutation
    for e in range(5):
        assert sorted(seen[16 * e : 16 * (e + 1)]) == list(range(16))
    np.testing.assert_array_equal(batch_indices(16, 5, 3, 7), batch_indices(16, 5, 3, 7))


def test_prefetcher_matches_direct_batches(corpus):
    pairs = load_pairs(corpus / "train")
    cfg = TrainConfig(crop_size=32)
    feed = Prefetcher(pairs, cfg, 0, 4)
    try:
        for step in range(4):
            got = feed.get()
            want = make_batch(pairs, cfg, step)
            np.testing.assert_array_equal(got[0], want[0])
            np.testing.assert_array_equal(got[1], want[1])
    finally:
        feed.close()


def test_config_parse_round_trip():
    cfg = TrainConfig.parse("# comment\nlearning_rate = 0.001\nsteps = 7  # inline\n\nbeta = 0\n")
    assert cfg.learning_rate == 0.001 and cfg.steps == 7 and cfg.beta == 0.0
    assert TrainConfig.parse(cfg.dumps()) == cfg


@pytest.mark.parametrize(
    "text,match",
    [("lr = 1", "unknown key"), ("steps = 1\nsteps = 2", "duplicate"), ("steps = x", "bad value"), ("steps", "expected")],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig.parse(text)


def test_config_value_checks():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.0, beta=0.0, gamma=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(patch_size=4)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_gamma_zero_has_no_density_loss_on_tape(rng):
    trainer = Trainer(TrainConfig(beta=0.0, gamma=0.0, crop_size=8), FalconConfig.toy())
    hazy = rng.random((1, 3, 8, 8)).astype(np.float32)
    losses = trainer.forward_loss(hazy, hazy)
    # the only pooling on the tape would come from the density loss (the CDM input is detached)
    assert "max_pool2d" not in graph_ops(losses.total)
    with_map = Trainer(TrainConfig(beta=0.0, crop_size=8), FalconConfig.toy()).forward_loss(hazy, hazy)
    assert "max_pool2d" in graph_ops(with_map.total)


def test_unpaired_files_are_rejected(tmp_path):
    imaging.write_corpus(tmp_path, n_train=2, n_val=0, size=8)
    (tmp_path / "train" / "clear" / "0001.ppm").unlink()
    with pytest.raises(ConfigError, match="0001"):
        load_pairs(tmp_path / "train")


def test_missing_subdirectories(tmp_path):
    with pytest.raises(ConfigError, match="hazy"):
        load_pairs(tmp_path)


def test_training_is_deterministic(corpus, tmp_path):
    cfg = TrainConfig(steps=3, crop_size=16, beta=0.0, batch_size=2, seed=11)
    a = train(cfg, corpus / "train", tmp_path / "a.falw")
    b = train(cfg, corpus / "train", tmp_path / "b.falw")
    assert a.history == b.history
    assert (tmp_path / "a.falw").read_bytes() == (tmp_path / "b.falw").read_bytes()
    c = train(TrainConfig(steps=3, crop_size=16, beta=0.0, batch_size=2, seed=12), corpus / "train")
    assert c.history != a.history


def test_checkpoints_written(corpus, tmp_path):
    cfg = TrainConfig(steps=4, crop_size=16, beta=0.0, batch_size=1, checkpoint_every=2)
    report = train(cfg, corpus / "train", tmp_path / "w.falw")
    assert [p.split("/")[-1] for p in report.checkpoints] == ["w.step2.falw", "w.step4.falw"]
    assert (tmp_path / "w.step4.falw").read_bytes() == (tmp_path / "w.falw").read_bytes()


def test_non_finite_loss_raises(rng):
    trainer = Trainer(TrainConfig(beta=0.0, crop_size=8), FalconConfig.toy())
    hazy = rng.random((1, 3, 8, 8)).astype(np.float32)
    before = {k: t.data.copy() for k, t in trainable(trainer.weights).items()}
    bad = hazy.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        trainer.step(hazy, bad)
    assert trainer.state.step == 0
    for k, t in trainable(trainer.weights).items():
        np.testing.assert_array_equal(t.data, before[k])
