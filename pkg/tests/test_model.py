import numpy as np
import pytest

from conftest import TINY, toy_set
from ecgunlearn import model as model_mod
from ecgunlearn.checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    model_from_bytes,
    save_checkpoint,
)
from ecgunlearn.dataset import SegmentSet
from ecgunlearn.model import ModelConfig, ModelError, build_model, evaluate, forward, logits_of, predict
from ecgunlearn.training import Hyper, finetune_patient, train


def test_zero_input_gives_finite_logits():
    m = build_model(ModelConfig(), seed=0)
    z = logits_of(m, np.zeros((12, 500)))
    assert z.shape == (1, 2) and np.isfinite(z).all()


def test_parameter_count_hand_checked():
    # stem conv 8*12*7 + stem bn 2*8 + block conv1/conv2 2*(8*8*3) + two bn 2*(2*8) + head 8*2+2
    m = build_model(ModelConfig(stage_blocks=(1,), stage_channels=(8,)), seed=0)
    assert m.n_parameters() == 672 + 16 + 384 + 32 + 18 == 1122


def test_parameter_count_closed_form():
    cfg = ModelConfig()
    c, k, L = cfg.stage_channels, cfg.block_kernel, cfg.in_leads
    expected = c[0] * L * cfg.stem_kernel + 2 * c[0]
    cin = c[0]
    for ch in c:
        expected += ch * cin * k + ch * ch * k + 4 * ch
        if cin != ch:
            expected += ch * cin + 2 * ch
        cin = ch
    expected += c[-1] * cfg.n_classes + cfg.n_classes
    assert build_model(cfg, 0).n_parameters() == expected


def test_same_seed_same_init():
    assert build_model(TINY, 3).checksum() == build_model(TINY, 3).checksum()
    assert build_model(TINY, 3).checksum() != build_model(TINY, 4).checksum()


def test_invalid_config():
    with pytest.raises(ModelError):
        build_model(ModelConfig(stage_blocks=(1, 1), stage_channels=(8,)))
    with pytest.raises(ModelError):
        build_model(ModelConfig(stage_channels=(8, 8, 32, 64)))


def test_predict_contract():
    m = build_model(TINY, 1)
    x = np.random.default_rng(0).standard_normal((2, 64))
    p = predict(m, x)
    assert p.shape == (2,) and abs(p.sum() - 1) < 1e-9
    np.testing.assert_array_equal(p, predict(m, x))
    with pytest.raises(ModelError):
        predict(m, np.zeros((3, 64)))


def test_untrained_models_are_near_uniform():
    cfg = ModelConfig()
    x = np.random.default_rng(0).standard_normal((12, 500))
    worst = max(predict(build_model(cfg, s), x).max() for s in range(100))
    assert worst < 0.9


def test_eval_is_pure(tiny_model, toy_data):
    before = tiny_model.checksum()
    evaluate(tiny_model, toy_data)
    predict(tiny_model, toy_data.x[0])
    assert tiny_model.checksum() == before


def test_evaluate_oracle_model(monkeypatch, toy_data):
    lookup = {arr.tobytes(): y for arr, y in zip(toy_data.x, toy_data.labels)}

    def oracle(model, x, batch_size=128):
        return np.stack([10.0 * np.eye(2)[lookup[row.tobytes()]] for row in np.asarray(x)])

    monkeypatch.setattr(model_mod, "logits_of", oracle)
    res = evaluate(build_model(TINY, 0), toy_data)
    assert res.accuracy == 1.0
    assert len(res.losses) == len(toy_data)


def test_evaluate_random_labels_near_chance():
    m = build_model(TINY, 0)
    accs = []
    for seed in range(20):
        d = toy_set(n=40, seed=seed)
        d.labels = np.random.default_rng(100 + seed).integers(0, 2, size=len(d))
        accs.append(evaluate(m, d).accuracy)
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_evaluate_empty():
    with pytest.raises(ModelError):
        evaluate(build_model(TINY, 0), toy_set().subset([]))


# training ---------------------------------------------------------------------------

def test_zero_epochs_is_identity(tiny_model, toy_data):
    out, log = train(tiny_model, toy_data, None, Hyper(epochs=0))
    assert out.checksum() == tiny_model.checksum() and log.epochs == []


def test_train_errors(tiny_model, toy_data):
    with pytest.raises(ModelError):
        train(tiny_model, toy_data.subset([]), None, Hyper(epochs=1))
    bad = toy_set()
    bad.labels[0] = 2
    with pytest.raises(ModelError, match="label"):
        train(tiny_model, bad, None, Hyper(epochs=1))


def test_separable_set_is_learned():
    data = toy_set(n=48, seed=1, shift=1.0)
    # linear-probe oracle: least squares on flattened inputs separates the classes
    feats = np.c_[data.x.reshape(len(data), -1), np.ones(len(data))]
    coef, *_ = np.linalg.lstsq(feats, 2.0 * data.labels - 1, rcond=None)
    assert ((feats @ coef > 0) == data.labels.astype(bool)).all()
    _, log = train(build_model(TINY, 0), data, None, Hyper(lr=0.05, epochs=30, batch_size=8, seed=2))
    assert log.epochs[-1]["train_acc"] >= 0.95
    assert log.epochs[-1]["train_loss"] < log.epochs[0]["train_loss"]


def test_training_is_deterministic(tiny_model, toy_data):
    h = Hyper(epochs=2, batch_size=8, seed=5)
    a, _ = train(tiny_model, toy_data, None, h)
    b, _ = train(tiny_model, toy_data, None, h)
    assert a.checksum() == b.checksum()


def test_observer_sees_every_sample(tiny_model, toy_data):
    seen = []
    train(tiny_model, toy_data, None, Hyper(epochs=2, batch_size=5, seed=0), observer=seen.extend)
    assert sorted(seen) == sorted(toy_data.ids * 2)


def test_cosine_schedule():
    h = Hyper(lr=0.1, epochs=4)
    assert h.lr_at(0) == 0.1 and h.lr_at(2) == pytest.approx(0.05)
    assert Hyper(lr=0.1, epochs=4, lr_schedule="constant").lr_at(3) == 0.1


# fine-tuning ------------------------------------------------------------------------

def _patient(data: SegmentSet, pid="P00") -> SegmentSet:
    return data.of_patient(pid)


def test_finetune_freezes_all_but_head(tiny_model, toy_data):
    non_head = tuple(n for n in tiny_model.params if not n.startswith("head"))
    out = finetune_patient(tiny_model, _patient(toy_data), Hyper(epochs=3, freeze_spec=non_head))
    for name in tiny_model.params:
        same = np.array_equal(out.params[name].data, tiny_model.params[name].data)
        assert same == (name in non_head)
    for name, st in tiny_model.stats.items():
        np.testing.assert_array_equal(out.stats[name].mean, st.mean)


def test_finetune_default_freeze(tiny_model, toy_data):
    out = finetune_patient(tiny_model, _patient(toy_data), Hyper(epochs=2))
    frozen = tiny_model.default_freeze()
    for name in tiny_model.params:
        if model_mod.matches(name, frozen):
            np.testing.assert_array_equal(out.params[name].data, tiny_model.params[name].data)
    assert out.checksum() != tiny_model.checksum()


def test_finetune_lowers_patient_loss():
    data = toy_set(n=48, seed=4)
    base, _ = train(build_model(TINY, 0), data.without_patient("P01"), None,
                    Hyper(lr=0.05, epochs=3, batch_size=8))
    patient = data.of_patient("P01")
    patient.x = patient.x[:, ::-1].copy()   # this patient carries the class signal on lead 1
    before = evaluate(base, patient).mean_loss
    out = finetune_patient(base, patient, Hyper(lr=0.01, epochs=10, batch_size=8, seed=1))
    assert evaluate(out, patient).mean_loss <= before


def test_finetune_errors(tiny_model, toy_data, caplog):
    with pytest.raises(ModelError, match="empty"):
        finetune_patient(tiny_model, toy_data.subset([]), Hyper(epochs=1))
    with pytest.raises(ModelError, match="patients"):
        finetune_patient(tiny_model, toy_data, Hyper(epochs=1))
    with pytest.raises(ModelError, match="every parameter"):
        finetune_patient(tiny_model, _patient(toy_data), Hyper(epochs=1, freeze_spec=("stem", "stage1", "stage2", "head")))
    finetune_patient(tiny_model, _patient(toy_data), Hyper(epochs=1, freeze_spec=("nothing",)))
    assert "matches no parameter" in caplog.text


def test_finetune_with_replay_is_deterministic(tiny_model, toy_data):
    h = Hyper(epochs=2, seed=3)
    a = finetune_patient(tiny_model, _patient(toy_data), h, replay=toy_data.without_patient("P00"))
    b = finetune_patient(tiny_model, _patient(toy_data), h, replay=toy_data.without_patient("P00"))
    assert a.checksum() == b.checksum()


# checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, toy_data):
    m, _ = train(build_model(TINY, 2), toy_data, None, Hyper(epochs=1, batch_size=8))
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert back.config == m.config and back.checksum() == m.checksum()
    a, b = evaluate(m, toy_data), evaluate(back, toy_data)
    np.testing.assert_array_equal(a.losses, b.losses)
    np.testing.assert_array_equal(a.probs, b.probs)


def test_checkpoint_bad_magic():
    blob = bytearray(checkpoint_bytes(build_model(TINY, 0)))
    blob[0] ^= 0xFF
    with pytest.raises(CheckpointError, match="bad magic"):
        model_from_bytes(bytes(blob))


def test_checkpoint_truncated_names_tensor():
    m = build_model(TINY, 0)
    blob = checkpoint_bytes(m)
    last = sorted(list(m.params) + [f"{k}.running_{s}" for k in m.stats for s in ("mean", "var")])[-1]
    with pytest.raises(CheckpointError, match="truncated payload in tensor") as err:
        model_from_bytes(blob[:-8])
    assert last in str(err.value) or "'" in str(err.value)


def test_checkpoint_extra_bytes():
    with pytest.raises(CheckpointError, match="header/payload size disagreement"):
        model_from_bytes(checkpoint_bytes(build_model(TINY, 0)) + b"\0" * 8)


def test_checkpoint_version_mismatch():
    import json
    import struct
    blob = checkpoint_bytes(build_model(TINY, 0))
    n = struct.unpack("<Q", blob[6:14])[0]
    header = json.loads(blob[14:14 + n])
    header["version"] = 99
    new = json.dumps(header).encode()
    with pytest.raises(CheckpointError, match="version"):
        model_from_bytes(blob[:6] + struct.pack("<Q", len(new)) + new + blob[14 + n:])


def test_forward_frozen_keeps_running_stats(tiny_model, toy_data):
    m = tiny_model.copy()
    forward(m, toy_data.x[:4], train=True, frozen=("stem",))
    np.testing.assert_array_equal(m.stats["stem.bn"].mean, tiny_model.stats["stem.bn"].mean)
    assert not np.array_equal(m.stats["stage2.block0.bn1"].mean, tiny_model.stats["stage2.block0.bn1"].mean)
