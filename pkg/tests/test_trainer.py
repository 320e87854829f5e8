import math
import struct

import numpy as np
import pytest

from pcdreid import losses as LS
from pcdreid import model as M
from pcdreid import tensor as T
from pcdreid import trainer as TR
from pcdreid.data import AugmentConfig, synth_dataset
from pcdreid.errors import BadMagic, CheckpointIOError, ConfigError, ShapeMismatch, VersionUnsupported
from pcdreid.optim import SGD, adam_step, clip_grad_norm, cosine_lr, sgd_step


@pytest.fixture(scope="module")
def split(tmp_path_factory):
    return synth_dataset(3, 6, 5, 2, 32, 16, tmp_path_factory.mktemp("synth"))


def _config(**kw):
    base = dict(epochs=2, P=3, K=2, model=TR.tiny_model_config(), augment=AugmentConfig.uniform(0.2))
    base.update(kw)
    return TR.TrainConfig(**base)


# ---------------------------------------------------------------- schedule

def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 120) == 0.008
    assert cosine_lr(120, 120) == 0.0
    assert cosine_lr(50, 50, 0.1, 0.02) == 0.02
    assert abs(cosine_lr(60, 120) - 0.004) < 1e-15
    with pytest.raises(ValueError):
        cosine_lr(121, 120)


def test_cosine_lr_is_nonincreasing():
    vals = [cosine_lr(t, 37, 0.05, 0.001) for t in range(38)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] == 0.05 and vals[-1] == 0.001


# ---------------------------------------------------------------- optimizers

def test_sgd_hand_cases():
    p, v = np.array([1.0]), np.zeros(1)
    sgd_step(p, np.array([2.0]), 0.1, 0.0, v)
    assert p[0] == pytest.approx(0.8, abs=1e-15)

    p, v = np.array([0.0]), np.zeros(1)
    expect_p, expect_v = 0.0, 0.0
    for _ in range(2):
        sgd_step(p, np.array([1.0]), 0.1, 0.9, v)
        expect_v = 0.9 * expect_v + 1.0
        expect_p -= 0.1 * expect_v
    assert p[0] == expect_p
    assert abs(p[0] - (-0.29)) < 1e-15

    p, v = np.array([3.0]), np.array([2.0])
    sgd_step(p, np.zeros(1), 0.1, 0.5, v)
    assert v[0] == 1.0 and p[0] == pytest.approx(2.9, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        sgd_step(np.zeros(2), np.zeros(3), 0.1, 0.9, np.zeros(2))


def test_adam_first_step_and_fixed_point():
    for g in (1e-3, -2.0, 50.0):
        p = np.array([0.0])
        adam_step(p, np.array([g]), 0.01, (0.9, 0.999), 1e-8, np.zeros(1), np.zeros(1), 1)
        assert abs(abs(p[0]) - 0.01) < 1e-6 and np.sign(p[0]) == -np.sign(g)
    p, m, v = np.array([1.5]), np.zeros(1), np.zeros(1)
    for t in range(1, 6):
        adam_step(p, np.zeros(1), 0.1, (0.9, 0.999), 1e-8, m, v, t)
    assert p[0] == 1.5
    with pytest.raises(ValueError):
        adam_step(p, np.zeros(1), 0.1, (0.9, 0.999), 1e-8, m, v, 0)


def test_adam_descends_on_a_quadratic():
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    trace = [p[0]]
    for t in range(1, 6):
        adam_step(p, 2 * p, 0.1, (0.9, 0.999), 1e-8, m, v, t)
        trace.append(p[0])
    assert all(b < a for a, b in zip(trace, trace[1:]))


def test_clip_grad_norm():
    a = T.Tensor(np.zeros(2), requires_grad=True)
    b = T.Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert math.isclose(math.hypot(*a.grad, *b.grad), 1.0, rel_tol=1e-15)
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# ---------------------------------------------------------------- configuration

def test_k_one_with_pairwise_weight_is_rejected(split):
    with pytest.raises(ConfigError, match="K_DEGENERATE"):
        TR.train(_config(K=1), split)
    TR.train(_config(K=1, epochs=1, weights=LS.LossWeights(1, 0, 0, 0)), split)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(lr0=0.0), dict(optimizer="adan"),
                                dict(grad_clip=-1.0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        _config(**kw).validate()


# ---------------------------------------------------------------- training

def test_one_small_step_decreases_joint_loss():
    rng = np.random.default_rng(0)
    cfg = _config()
    loss_cfg = LS.LossConfig(num_classes=4)
    labels = np.repeat(np.arange(4), 2)
    for seed in range(10):
        params = M.init_params(cfg.model, seed)
        TR.init_heads(params, 4, cfg.model.embed_dim, seed)
        images = rng.random((8, 3, 32, 16))
        trainable = params.trainable()
        before, _ = TR.batch_loss(params, images, labels, cfg, loss_cfg)
        T.backward(before, leaves=list(trainable.values()))
        clip_grad_norm(trainable.values(), cfg.grad_clip)
        SGD(trainable, cfg.sgd_momentum).step(1e-4)
        after, _ = TR.batch_loss(params, images, labels, cfg, loss_cfg)
        assert after.item() < before.item(), seed


def test_training_is_deterministic(split):
    a, rows_a = TR.train(_config(), split)
    b, rows_b = TR.train(_config(), split)
    assert TR.encode_checkpoint(a) == TR.encode_checkpoint(b)
    assert TR.format_loss_log(rows_a) == TR.format_loss_log(rows_b)
    c, _ = TR.train(_config(seed=1), split)
    assert TR.encode_checkpoint(a) != TR.encode_checkpoint(c)


def test_adam_training_runs_and_round_trips(split):
    ckpt, rows = TR.train(_config(optimizer="adam", epochs=1), split)
    back = TR.decode_checkpoint(TR.encode_checkpoint(ckpt))
    assert back.scalars == {"adam_t": ckpt.scalars["adam_t"]} and back.scalars["adam_t"] > 0
    assert set(back.opt_state) == set(ckpt.opt_state)


def test_loss_log_format(split):
    _, rows = TR.train(_config(weights=LS.LossWeights(1, 1, 0, 0)), split)
    lines = TR.format_loss_log(rows).splitlines()
    assert lines[0] == "epoch,lr,ce,triplet,circle,cosface,total"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "1" and float(first[1]) == 0.008
    # zero-weight terms are still computed and logged, but not summed
    ce, trip, circle, cos, total = map(float, first[2:])
    assert circle > 0 and cos > 0
    assert math.isclose(total, ce + trip, rel_tol=1e-12)


def test_uncomputable_terms_are_logged_as_skipped(split):
    _, rows = TR.train(_config(K=1, epochs=1, weights=LS.LossWeights(1, 0, 0, 0)), split)
    fields = TR.format_loss_log(rows).splitlines()[1].split(",")
    assert fields[3:5] == ["skipped", "skipped"]
    assert float(fields[2]) == float(fields[6])


# ---------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def ckpt(split):
    return TR.train(_config(epochs=1), split)[0]


def test_checkpoint_round_trip_is_bit_exact(ckpt, tmp_path):
    path = tmp_path / "m.pcdn"
    TR.save_checkpoint(ckpt, path)
    back = TR.load_checkpoint(path)
    assert list(back.params) == list(ckpt.params)
    for k in ckpt.params:
        assert back.params[k].data.tobytes() == ckpt.params[k].data.tobytes()
        assert back.params[k].requires_grad == ckpt.params[k].requires_grad
    for k in ckpt.opt_state:
        assert back.opt_state[k].tobytes() == ckpt.opt_state[k].tobytes()
    assert back.config == ckpt.config
    assert (back.epoch, back.rng_state, back.class_pids) == (ckpt.epoch, ckpt.rng_state, ckpt.class_pids)
    assert TR.encode_checkpoint(back) == path.read_bytes()


def test_truncated_checkpoint_never_loads(ckpt):
    blob = TR.encode_checkpoint(ckpt)
    for cut in sorted({0, 2, 4, 7, 11, 40, len(blob) // 2, len(blob) - 8, len(blob) - 1}):
        with pytest.raises((BadMagic, CheckpointIOError)):
            TR.decode_checkpoint(blob[:cut])
    with pytest.raises(CheckpointIOError):
        TR.decode_checkpoint(blob + b"\0")


def test_checkpoint_version_and_magic_gates(ckpt, tmp_path):
    blob = TR.encode_checkpoint(ckpt)
    with pytest.raises(VersionUnsupported):
        TR.decode_checkpoint(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(BadMagic):
        TR.decode_checkpoint(b"PCDF" + blob[4:])
    with pytest.raises(CheckpointIOError):
        TR.load_checkpoint(tmp_path / "absent.pcdn")


def test_extract_features_order_and_eval_mode(ckpt, split):
    cfg = ckpt.config.model
    recs = split.gallery[:5]
    a = TR.extract_features(ckpt.params, cfg, recs, batch_size=2)
    b = TR.extract_features(ckpt.params, cfg, recs[::-1], batch_size=5)
    assert a.features.shape == (5, cfg.embed_dim)
    assert [r.path for r in a.records] == [r.path for r in recs]
    np.testing.assert_allclose(a.features, b.features[::-1], rtol=1e-12, atol=1e-12)
