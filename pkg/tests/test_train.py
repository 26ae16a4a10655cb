import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgtransformer import tensor as T
from lgtransformer import train as tr
from lgtransformer.errors import ConfigError, ContractError, DivergenceError
from lgtransformer.model import init_params, load_checkpoint, named_parameters, preset, save_checkpoint
from lgtransformer.pnm import read_image, read_pnm, to_gray8, write_pgm, write_ppm
from lgtransformer.tensor import Tensor


def test_adamw_zero_gradient_without_decay_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    tr.adamw_step(p, {"w": np.zeros(2)}, tr.AdamState(), 1, 0.1, tr.TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    # bias-corrected first step moves by exactly lr * sign(g)
    with T.precision("f64"):
        p = {"w": Tensor(np.array([1.0]))}
        tr.adamw_step(p, {"w": np.array([1.0])}, tr.AdamState(), 1, 0.1, tr.TrainConfig(weight_decay=0.0, eps=0.0))
    assert p["w"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_adamw_decoupled_decay():
    with T.precision("f64"):
        p = {"w": Tensor(np.array([2.0, -4.0]))}
        tr.adamw_step(p, {"w": np.zeros(2)}, tr.AdamState(), 1, 0.1, tr.TrainConfig(weight_decay=0.05))
    np.testing.assert_allclose(p["w"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_adamw_rejects_bad_gradients():
    p = {"blk.w": Tensor(np.ones(3))}
    with pytest.raises(DivergenceError, match="blk.w"):
        tr.adamw_step(p, {"blk.w": np.array([1.0, np.nan, 0.0])}, tr.AdamState(), 1, 0.1)
    with pytest.raises(ContractError):
        tr.adamw_step(p, {"blk.w": np.ones(4)}, tr.AdamState(), 1, 0.1)
    with pytest.raises(ContractError):
        tr.adamw_step(p, {}, tr.AdamState(), 0, 0.1)


def test_adamw_state_accumulates():
    with T.precision("f64"):
        p = [("w", Tensor(np.array([0.0])))]
        state = tr.AdamState()
        cfg = tr.TrainConfig(weight_decay=0.0, eps=0.0)
        for t in range(1, 4):
            tr.adamw_step(p, {"w": np.array([2.0])}, state, t, 0.01, cfg)
    # constant gradient: every bias-corrected step is exactly lr
    assert p[0][1].data[0] == pytest.approx(-0.03, abs=1e-15)
    assert state.t == 3 and state.m["w"][0] == pytest.approx(2.0 * (1 - 0.9**3))


def test_lr_schedule():
    cfg = tr.TrainConfig(lr=1e-3, total_steps=150)
    assert cfg.warmup_steps == 10
    assert tr.lr_schedule(0, cfg) == 0.0
    assert tr.lr_schedule(5, cfg) == pytest.approx(5e-4)
    assert tr.lr_schedule(10, cfg) == pytest.approx(1e-3)
    assert tr.lr_schedule(80, cfg) == pytest.approx(5e-4)
    assert tr.lr_schedule(150, cfg) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ContractError):
        tr.lr_schedule(151, cfg)
    lrs = [tr.lr_schedule(t, cfg) for t in range(10, 151)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    for kw in ({"lr": 0}, {"warmup_steps": 20, "total_steps": 10}, {"batch_size": 0}, {"precision": "f16"}):
        with pytest.raises(ConfigError):
            tr.TrainConfig(**kw)


def test_dataset_reproducible_and_balanced():
    a, b = tr.SyntheticDataset(seed=3), tr.SyntheticDataset(seed=3)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, tr.SyntheticDataset(seed=4).images)
    assert a.images.shape == (64, 32, 32, 3) and np.bincount(a.labels).tolist() == [16] * 4
    # the blob sits nearest its own class anchor
    bright = a.images.mean(-1)
    for img, k in zip(bright, a.labels):
        y, x = np.unravel_index(np.argmax(img), img.shape)
        q = (int(y >= 16), int(x >= 16))
        assert q == [(1, 1), (1, 0), (0, 0), (0, 1)][k] or img.max() < 0.6
    with pytest.raises(ConfigError):
        tr.SyntheticDataset(num_classes=1)


def test_dataset_batches():
    ds = tr.SyntheticDataset(num_samples=10)
    it = ds.batches(4, np.random.default_rng(0))
    first = [next(it) for _ in range(2)]
    assert all(len(b) == 4 for b in first) and len(set(np.concatenate(first))) == 8
    full = ds.batches(64, np.random.default_rng(0))
    assert next(full).tolist() == list(range(10)) == next(full).tolist()


def test_run_record_roundtrip_and_contract():
    rec = tr.RunRecord()
    rec.append({"step": 0, "loss": 1.5, "lr": 0.0})
    rec.append({"step": 1, "loss": 1.25, "lr": 1e-4, "train_acc": 0.5})
    rec.final = {"train_acc": 0.5}
    back = tr.RunRecord.from_jsonl(rec.to_jsonl())
    assert back == rec and back.losses().tolist() == [1.5, 1.25]
    with pytest.raises(ContractError):
        rec.append({"step": 1, "loss": 1.0})
    with pytest.raises(ContractError):
        rec.append({"step": 2, "loss": float("nan")})


def test_path_groups():
    names = [n for n, _ in named_parameters(init_params(preset("tiny-lg")))]
    groups = tr._path_groups(names)
    # 3 + 3 + 2 + 1 paths, one block per stage
    assert len(groups) == 9
    assert all(len(v) == 5 for v in groups.values())


def test_short_training_run_writes_artifacts(tmp_path):
    cfg = tr.TrainConfig(total_steps=4, batch_size=8, eval_every=2)
    logged = []
    rec, params = tr.train("tiny-lg", cfg, out_dir=tmp_path, log=logged.append)
    assert [s["step"] for s in rec.steps] == [0, 1, 2, 3] and len(logged) == 4
    assert "train_acc" in rec.steps[1] and "train_acc" not in rec.steps[0]
    assert all(s["min_path_grad_norm"] > 0 for s in rec.steps)
    lines = (tmp_path / "run.jsonl").read_text()
    assert tr.RunRecord.from_jsonl(lines) == rec
    loaded, cfg2 = load_checkpoint(tmp_path / "model.ckpt")
    assert cfg2.name == "tiny-lg"
    for (n, a), (_, b) in zip(named_parameters(params), named_parameters(loaded)):
        assert a.data.tobytes() == b.data.tobytes(), n


@pytest.mark.parametrize("model", ["tiny-lg", "tiny-swin"])
def test_loss_decreases(model):
    cfg = tr.TrainConfig(total_steps=30, batch_size=16, lr=2e-3, eval_every=0)
    data = tr.SyntheticDataset(num_samples=16)
    rec, _ = tr.train(model, cfg, data=data)
    losses = rec.losses()
    assert losses[-5:].mean() < losses[:5].mean() - 0.2
    assert abs(losses[0] - math.log(4)) < 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_saves_last_good_weights(tmp_path):
    cfg = tr.TrainConfig(total_steps=3, batch_size=4, lr=1e-3)
    data = tr.SyntheticDataset(num_samples=4)
    data.images = data.images.copy()
    data.images[2, 0, 0, 0] = np.inf
    config = preset("tiny-lg")
    params = init_params(config, seed=0)
    before = {n: t.data.copy() for n, t in named_parameters(params)}
    with pytest.raises(DivergenceError):
        tr.train(config, cfg, data=data, out_dir=tmp_path, params=params)
    saved, _ = load_checkpoint(tmp_path / "model.ckpt")
    for n, t in named_parameters(saved):
        assert t.data.tobytes() == before[n].tobytes()


def test_rel_error_floor():
    assert tr.rel_error(0.0, 1e-11) < 1e-6
    assert tr.rel_error(1.0, 1.0 + 1e-6) == pytest.approx(1e-6, rel=1e-3)
    assert tr.rel_error(2.0, 1.0) == 0.5


def test_check_gradients_quadratic_oracle_and_empty():
    with T.precision("f64"):
        w = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)
        rep = tr.check_gradients(lambda: T.sum(w * w * w), [("w", w)], coords=3)
        frozen = Tensor(np.array([1.0]))
        missing = tr.check_gradients(lambda: T.sum(frozen * w), [("frozen", frozen)])
    assert rep.passed and rep.checks[0].coords == 3 and rep.checks[0].max_rel_err < 1e-8
    # a tensor the tape never differentiates is reported, not skipped
    assert not missing.passed
    assert tr.check_gradients(lambda: T.sum(w), []).passed
    with pytest.raises(ContractError):
        tr.check_gradients(lambda: T.sum(w), [("w", Tensor(np.ones(2, dtype=np.float32)))])


def test_grad_check_catches_broken_backward_rule(monkeypatch):
    good = T.BACKWARD_RULES["resample"]

    def broken(node, g):
        return tuple(None if x is None else 1.01 * x for x in good(node, g))

    monkeypatch.setitem(T.BACKWARD_RULES, "resample", broken)
    picked = ("stages.0.blocks.0.path_attn.1.", "stages.3.")
    rep = tr.grad_check(names=lambda n: n.startswith(picked), coords=2)
    bad = {c.name for c in rep.failures()}
    assert not rep.passed
    # every parameter upstream of a resample is corrupted; the last stage
    # has a single path and sits downstream of all of them
    assert any(n.startswith(picked[0]) for n in bad)
    assert not any(n.startswith(picked[1]) for n in bad)


def test_grad_check_report_format():
    rep = tr.GradCheckReport(1e-5, [tr.TensorCheck("a", 3, 1e-7, (0,), True), tr.TensorCheck("b", 2, 1e-3, (1,), False)])
    assert not rep.passed and [c.name for c in rep.failures()] == ["b"]
    text = rep.format()
    assert "FAIL" in text and text.endswith("1/2 tensors within rel err 1e-05")
    assert json.loads(json.dumps(rep.to_dict()))["passed"] is False


def test_pnm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert read_pnm(tmp_path / "a.ppm").tobytes() == rgb.tobytes()
    np.testing.assert_allclose(read_image(tmp_path / "a.ppm"), rgb / 255.0)
    gray = rng.integers(0, 256, size=(4, 3), dtype=np.uint8)
    write_pgm(tmp_path / "g.pgm", gray)
    img = read_image(tmp_path / "g.pgm")
    assert img.shape == (4, 3, 3) and np.array_equal(img[..., 2] * 255, gray)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n65535\n\x01\x00\xff\xff")
    assert read_pnm(tmp_path / "c.pgm").tolist() == [[256, 65535]]


def test_pnm_errors(tmp_path):
    with pytest.raises(OSError):
        read_pnm(tmp_path / "missing.ppm")
    (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(OSError, match="truncated"):
        read_pnm(tmp_path / "t.ppm")
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(OSError):
        read_pnm(tmp_path / "x.ppm")
    (tmp_path / "h.ppm").write_bytes(b"P6\nfour 4\n255\n")
    with pytest.raises(OSError):
        read_pnm(tmp_path / "h.ppm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "f.pgm", np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_to_gray8_range(h, w, shift, scale):
    v = np.random.default_rng(h * 7 + w).standard_normal((h, w)) * scale + shift
    g = to_gray8(v)
    assert g.dtype == np.uint8 and g.shape == (h, w)
    if v.max() > v.min():
        assert g.min() == 0 and g.max() == 255
    assert not to_gray8(np.full((3, 3), shift)).any()


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    cfg = preset("tiny-lg")
    save_checkpoint(d / "m.ckpt", init_params(cfg, seed=5), cfg)
    img = tr.SyntheticDataset(num_samples=1).images[0]
    write_ppm(d / "img.ppm", np.clip(img, 0, 1))
    return d


def test_infer_matches_forward(ckpt):
    from lgtransformer.model import forward

    cls, logits = tr.infer(ckpt / "m.ckpt", ckpt / "img.ppm")
    params, cfg = load_checkpoint(ckpt / "m.ckpt")
    ref = forward(read_image(ckpt / "img.ppm").astype(np.float32), params, cfg).data
    assert logits.tobytes() == ref.tobytes() and cls == int(np.argmax(ref)) and logits.shape == (4,)


def test_dump_features(ckpt, tmp_path):
    paths = tr.dump_features(ckpt / "m.ckpt", ckpt / "img.ppm", 2, tmp_path)
    assert sorted(p.name for p in paths) == ["stage2_rate16.pgm", "stage2_rate4.pgm", "stage2_rate8.pgm"]
    sides = {p.name: read_pnm(p).shape for p in paths}
    assert sides["stage2_rate4.pgm"] == (8, 8) and sides["stage2_rate16.pgm"] == (2, 2)
    with pytest.raises(ConfigError):
        tr.dump_features(ckpt / "m.ckpt", ckpt / "img.ppm", 7, tmp_path)


def test_env_precision(monkeypatch):
    monkeypatch.setenv("LG_PRECISION", "f64")
    assert tr.env_precision() == "f64"
    monkeypatch.setenv("LG_PRECISION", "f8")
    with pytest.raises(ConfigError):
        tr.env_precision()
    monkeypatch.delenv("LG_PRECISION")
    assert tr.env_precision() == "f32"
