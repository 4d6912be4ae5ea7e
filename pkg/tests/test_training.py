import numpy as np
import pytest

from pixbis import autodiff as ad
from pixbis.data import ProtocolError
from pixbis.model import ModelConfig, build_model
from pixbis.optim import AdamState, adam_step
from pixbis.training import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    TrainConfig,
    augment,
    balance_classes,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
    stream,
    train,
    train_new,
    write_loss_log,
)

SMALL = ModelConfig(stem_channels=4, growth_rate=2, block_layers=(2, 2))
FAST = TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=3)


def _param(value):
    return {"w": ad.Tensor(np.array([value], dtype=np.float64), requires_grad=True)}


# -- adam --------------------------------------------------------------------------

@pytest.mark.parametrize("g", [3.0, -0.02, 1e3])
def test_adam_first_step_moves_by_lr(g):
    p = _param(1.0)
    p["w"].grad = np.array([g])
    adam_step(p, AdamState(lr=1e-3, weight_decay=0.0))
    delta = p["w"].data[0] - 1.0
    assert np.sign(delta) == -np.sign(g)
    assert abs(delta) == pytest.approx(1e-3, rel=1e-4)


def test_adam_zero_gradient_no_decay_is_identity(rng):
    params = {"a": ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)}
    before = params["a"].data.copy()
    state = AdamState(weight_decay=0.0)
    for _ in range(3):
        params["a"].grad = np.zeros((3, 4))
        adam_step(params, state)
    assert np.array_equal(before, params["a"].data)
    assert state.t == 3


def test_adam_decay_only_step():
    p = _param(1.0)
    p["w"].grad = np.array([0.0])
    state = AdamState(lr=1e-4, weight_decay=1e-5)
    adam_step(p, state)
    assert p["w"].data[0] < 1.0
    # effective gradient 1e-5 -> a full lr-sized step after bias correction
    assert 1.0 - p["w"].data[0] == pytest.approx(1e-4 * 1e-5 / (1e-5 + 1e-8), rel=1e-6)
    assert np.all(state.v["w"] >= 0)


def test_adam_rejects_missing_gradient():
    p = _param(1.0)
    state = AdamState()
    with pytest.raises(ValueError, match="missing gradient"):
        adam_step(p, state)
    assert state.t == 0


def test_adam_matches_reference_loop(rng):
    w = rng.normal(size=5)
    grads = rng.normal(size=(4, 5))
    p = {"w": ad.Tensor(w.copy(), requires_grad=True)}
    state = AdamState(lr=0.01, weight_decay=0.1)
    m = np.zeros(5)
    v = np.zeros(5)
    ref = w.copy()
    for t, g in enumerate(grads, start=1):
        p["w"].grad = g
        adam_step(p, state)
        g = g + 0.1 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, ref, rtol=1e-12)


# -- balancing and augmentation ----------------------------------------------------------

def test_balance_subsamples_majority():
    labels = np.array([0] * 100 + [1] * 40)
    idx = balance_classes(labels, 0)
    assert len(idx) == 80
    assert (labels[idx] == 1).sum() == 40 and (labels[idx] == 0).sum() == 40
    assert len(set(idx.tolist())) == 80


def test_balance_keeps_balanced_input():
    labels = np.array([0, 1] * 10)
    idx = balance_classes(labels, 1)
    assert sorted(idx.tolist()) == list(range(20))


def test_balance_is_seeded():
    labels = np.array([0] * 30 + [1] * 7)
    assert np.array_equal(balance_classes(labels, 9), balance_classes(labels, 9))
    assert not np.array_equal(balance_classes(labels, 9), balance_classes(labels, 10))


def test_balance_needs_both_classes():
    with pytest.raises(ProtocolError):
        balance_classes(np.zeros(5), 0)


def test_augment_identity_without_jitter_or_flip(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    out = augment(img, np.random.default_rng(0), flip_prob=0.0, jitter=0.0)
    assert np.array_equal(out, img)


def test_augment_flip_twice_is_identity(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    once = augment(img, np.random.default_rng(0), flip_prob=1.0, jitter=0.0)
    assert np.array_equal(once, img[:, :, ::-1])
    assert np.array_equal(augment(once, np.random.default_rng(1), flip_prob=1.0, jitter=0.0), img)


def test_augment_stays_in_unit_range(rng):
    for k in range(50):
        img = rng.random((3, 6, 6))
        out = augment(img, np.random.default_rng(k), flip_prob=0.5, jitter=0.9)
        assert out.min() >= 0 and out.max() <= 1


def test_streams_are_independent_and_reproducible():
    a = stream(7, 1, 0).random(3)
    assert np.array_equal(a, stream(7, 1, 0).random(3))
    assert not np.array_equal(a, stream(7, 2, 0).random(3))
    assert not np.array_equal(a, stream(7, 1, 1).random(3))


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path, tiny_corpus):
    model = build_model(SMALL, 1)
    state = AdamState(lr=1e-3)
    for t in model.params.values():
        t.grad = np.ones_like(t.data)
    adam_step(model.params, state)
    ckpt = make_checkpoint(model, state, 4, FAST, [(1, 0.5, 0.4, 0.6)])
    path = tmp_path / "m.pixbis"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.epoch == 4 and back.model_config == SMALL
    assert back.adam.hyper() == state.hyper()
    assert back.loss_log == [[1, 0.5, 0.4, 0.6]]
    for name, arr in ckpt.arrays.items():
        if name.startswith("adam."):
            continue
        assert back.arrays[name].dtype == arr.dtype and back.arrays[name].tobytes() == arr.tobytes()
    for name in state.m:
        assert back.adam.m[name].tobytes() == state.m[name].tobytes()
        assert back.adam.v[name].tobytes() == state.v[name].tobytes()
    restored = back.model()
    for name in model.params:
        assert np.array_equal(restored.params[name].data, model.params[name].data)


def test_truncated_checkpoint_rejected_with_offset(tmp_path):
    model = build_model(SMALL, 1)
    path = tmp_path / "m.pixbis"
    save_checkpoint(make_checkpoint(model, AdamState(), 0), path)
    data = path.read_bytes()
    for cut in (4, len(MAGIC) + 3, 200, len(data) - 10):
        bad = tmp_path / f"cut{cut}.pixbis"
        bad.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(bad)


def test_corrupted_checkpoint_rejected(tmp_path):
    path = tmp_path / "m.pixbis"
    save_checkpoint(make_checkpoint(build_model(SMALL, 1), AdamState(), 0), path)
    data = bytearray(path.read_bytes())
    data[-100] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    ckpt = make_checkpoint(build_model(SMALL, 1), AdamState(), 0)
    ckpt.format_version = FORMAT_VERSION + 1
    path = tmp_path / "m.pixbis"
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.pixbis"
    path.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pixbis")


# -- training loop ---------------------------------------------------------------------------

def test_two_epochs_on_eight_samples(tmp_path, tiny_corpus):
    model, log, ckpt = train_new(SMALL, tiny_corpus, FAST, tmp_path / "ck")
    assert [row[0] for row in log] == [1, 2]
    assert all(np.isfinite(row[1:]).all() for row in log)
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch_001.pixbis", "epoch_002.pixbis"]
    assert not model.training
    write_loss_log(log, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,combined,pixel,binary" and len(lines) == 3


def test_training_is_deterministic(tmp_path, tiny_corpus):
    _, log_a, a = train_new(SMALL, tiny_corpus, FAST)
    _, log_b, b = train_new(SMALL, tiny_corpus, FAST)
    save_checkpoint(a, tmp_path / "a.pixbis")
    save_checkpoint(b, tmp_path / "b.pixbis")
    assert (tmp_path / "a.pixbis").read_bytes() == (tmp_path / "b.pixbis").read_bytes()
    assert log_a == log_b


def test_resume_matches_uninterrupted_run(tmp_path, tiny_corpus):
    cfg = TrainConfig(lr=1e-3, batch_size=4, epochs=3, seed=5)
    _, _, straight = train_new(SMALL, tiny_corpus, cfg, tmp_path / "a")
    mid = load_checkpoint(tmp_path / "a" / "epoch_002.pixbis")
    model, log = train(mid.model(), tiny_corpus, cfg, tmp_path / "b", resume=mid)
    resumed = load_checkpoint(tmp_path / "b" / "epoch_003.pixbis")
    final = load_checkpoint(tmp_path / "a" / "epoch_003.pixbis")
    assert len(log) == 3
    for name, arr in final.arrays.items():
        assert resumed.arrays[name].tobytes() == arr.tobytes(), name
    for name in final.adam.m:
        assert resumed.adam.m[name].tobytes() == final.adam.m[name].tobytes()
    assert resumed.adam.t == final.adam.t
    assert resumed.loss_log == final.loss_log


def test_training_needs_both_classes(tiny_corpus):
    from pixbis.data import Manifest

    only_attacks = Manifest([s for s in tiny_corpus.samples if s.label == "attack"], tiny_corpus.name,
                            tiny_corpus.config_hash, tiny_corpus.root)
    with pytest.raises(ProtocolError):
        train(build_model(SMALL, 0), only_attacks, FAST)


def test_bad_train_config_rejected(tiny_corpus):
    with pytest.raises(ValueError):
        train(build_model(SMALL, 0), tiny_corpus, TrainConfig(batch_size=0))
