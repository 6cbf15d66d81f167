import os
import struct

import numpy as np
import pytest

import oracles
from stau import tensor as T
from stau.config import RunConfig, preset
from stau.model import (CheckpointError, PredictiveModel, StateBuffers, load_checkpoint,
                        parameter_count, read_checkpoint, save_checkpoint, window_ids)
from stau.tensor import Tensor


def tiny(**kw):
    base = dict(layers=2, hidden=4, encoder_depth=1, kernel=3, tau=2, theta=2, canvas=8,
                seq_len=5, cond_len=2, horizon=3, sprite="rect", sprite_size=2,
                velocity_max=2.0, train_sequences=4, eval_sequences=2, batch_size=2, steps=2)
    base.update(kw)
    return RunConfig(**base)


def frames(rng, b=2, t=5, size=8):
    return rng.uniform(size=(b, t, 1, size, size)).astype(np.float32)


def simulate_windows(layers, tau, theta, t_max):
    """Drive StateBuffers with symbolic state ids; yields ((t, k), view)."""
    buf = StateBuffers(layers, tau, theta, [("T", 0, k) for k in range(1, layers + 1)])
    for t in range(1, t_max + 1):
        buf.begin_step(("S", t, 0))
        for k in range(1, layers + 1):
            yield (t, k), buf.view(k)
            buf.push(k, ("T", t, k), ("S", t, k))


def test_buffer_windows_match_clamp_formulas():
    mismatches = 0
    for tau in range(1, 7):
        for theta in range(1, 7):
            for (t, k), view in simulate_windows(6, tau, theta, 12):
                if tuple(map(list, view)) != tuple(oracles.clamp_windows(t, k, tau, theta)):
                    mismatches += 1
    assert mismatches == 0


def test_window_ids_agree_with_oracle():
    for t in (1, 3, 12):
        for k in (1, 4):
            temporal, keys, layer_t, stack = window_ids(t, k, 3, 2)
            ref = oracles.clamp_windows(t, k, 3, 2)
            assert [("T",) + x for x in temporal] == ref[0]
            assert [("S",) + x for x in stack] == ref[3]


def test_documented_corner_windows():
    # t=1, k=1: temporal window holds only the initial state; stack holds S_t^0 only
    temporal, keys, layer_t, stack = oracles.clamp_windows(1, 1, 5, 5)
    (_, view), = [x for x in simulate_windows(1, 5, 5, 1)]
    assert view[0] == [("T", 0, 1)] == temporal
    assert view[3] == [("S", 1, 0)] == stack


def test_encode_decode_shapes():
    model = PredictiveModel(tiny(hidden=6, encoder_depth=2, canvas=16))
    x = Tensor(np.zeros((3, 1, 16, 16), np.float32))
    s = model.encode(x)
    assert s.shape == (3, 6, 4, 4)
    assert np.isfinite(s.data).all()
    y = model.decode(s)
    assert y.shape == x.shape


def test_mnist_encoder_geometry():
    model = PredictiveModel(preset("mnist"))
    s = model.encode(Tensor(np.zeros((1, 1, 64, 64), np.float32)))
    assert s.shape == (1, 64, 16, 16)


def test_encode_rejects_indivisible_frames():
    model = PredictiveModel(tiny())
    with pytest.raises(ValueError):
        model.encode(Tensor(np.zeros((1, 1, 7, 8), np.float32)))
    with pytest.raises(ValueError):
        model.decode(Tensor(np.zeros((1, 3, 4, 4), np.float32)))


def test_decode_output_in_unit_interval():
    model = PredictiveModel(tiny())
    rng = np.random.default_rng(0)
    y = model.decode(Tensor(50 * rng.standard_normal((2, 4, 4, 4)).astype(np.float32)))
    assert y.data.min() >= 0.0 and y.data.max() <= 1.0


def test_rollout_shapes_and_loss():
    model = PredictiveModel(tiny())
    f = frames(np.random.default_rng(1))
    res = model.rollout(f)
    assert len(res.predictions) == 4
    assert res.predictions[0].shape == (2, 1, 8, 8)
    total = sum(float(np.mean((p.data.astype(np.float64) - f[:, t + 1]) ** 2))
                for t, p in enumerate(res.predictions))
    assert res.loss.data.item() == pytest.approx(total, rel=1e-5)


def test_rollout_argument_errors():
    model = PredictiveModel(tiny())
    f = frames(np.random.default_rng(1))
    with pytest.raises(ValueError):
        model.rollout(f[:, :1])
    with pytest.raises(ValueError):
        model.rollout(f, "closed_loop", after_step=5)
    with pytest.raises(ValueError):
        model.rollout(f, "sideways")


def test_closed_loop_feeds_predictions():
    model = PredictiveModel(tiny())
    f = frames(np.random.default_rng(2))
    tf = model.rollout(f)
    cl = model.rollout(f, "closed_loop", after_step=2)
    for t in range(2):
        assert np.array_equal(tf.predictions[t].data, cl.predictions[t].data)
    g = f.copy()
    g[:, 2:] = 0.0  # frames after the conditioning window are never read
    cl2 = model.rollout(g, "closed_loop", after_step=2)
    for a, b in zip(cl.predictions, cl2.predictions):
        assert np.array_equal(a.data, b.data)


def test_attention_length_grows_during_warmup():
    model = PredictiveModel(tiny(layers=3, tau=3, theta=3, seq_len=6))
    res = model.rollout(frames(np.random.default_rng(3), t=6))
    for t, step in enumerate(res.traces, 1):
        for k, trace in enumerate(step, 1):
            assert len(trace.alphas) == min(t, 3)
            assert len(trace.betas) == min(k, 3)


def test_teacher_forced_loss_permutation_stable():
    model = PredictiveModel(tiny())
    f = frames(np.random.default_rng(4), b=4)
    perm = np.array([2, 0, 3, 1])
    base = model.rollout(f)
    shuf = model.rollout(f[perm])
    for t, (a, b) in enumerate(zip(base.predictions, shuf.predictions), 1):
        per_a = ((a.data - f[:, t]) ** 2).reshape(4, -1).mean(axis=1)
        per_b = ((b.data - f[perm, t]) ** 2).reshape(4, -1).mean(axis=1)
        np.testing.assert_allclose(per_a[perm], per_b, atol=1e-6)
    assert base.loss.data.item() == pytest.approx(shuf.loss.data.item(), abs=1e-6)


def test_identity_cascade_with_residual():
    model = PredictiveModel(tiny(gamma=1.0, layers=3))
    for cell in model.cells:
        for name in ("wtu", "wsu", "wtt", "wst", "wss", "wts"):
            c = cell.convs[name]
            for p in (c.weight, c.bias, c.gain, c.shift):
                p.data[...] = 0.0
    f = frames(np.random.default_rng(5))
    f[:, :] = f[:, :1]  # static scene
    res = model.rollout(f)
    direct = model.decode(model.encode(Tensor(f[:, 0]))).data
    for p in res.predictions:
        assert np.array_equal(p.data, direct)


def test_gradient_reaches_every_parameter():
    model = PredictiveModel(tiny())
    res = model.rollout(frames(np.random.default_rng(6)))
    res.loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name


def test_decode_gradient_finite_difference():
    model = PredictiveModel(tiny(), dtype=np.float64)
    rng = np.random.default_rng(7)
    state = rng.standard_normal((1, 4, 4, 4))
    target = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    x = T.Parameter(state)
    T.mse_loss(model.decode(x), target).backward()
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (0, 3, 2, 1), (0, 1, 3, 3)]:
        hi, lo = state.copy(), state.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num = (T.mse_loss(model.decode(Tensor(hi)), target).data.item()
               - T.mse_loss(model.decode(Tensor(lo)), target).data.item()) / (2 * eps)
        assert x.grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-10)


# ---------------------------------------------------------------------------
# checkpoints and parameter accounting


def test_parameter_count_closed_form_matches_oracle():
    for cfg in (preset("mnist"), preset("toy"), tiny()):
        expect = oracles.stau_param_count(cfg.layers, cfg.hidden, cfg.encoder_depth,
                                          cfg.frame_channels, cfg.kernel)
        assert parameter_count(cfg) == expect == PredictiveModel(cfg).num_parameters()


def test_supervision_variant_keeps_parameter_count():
    cfg = tiny()
    other = cfg.replace(temporal_supervision="self", spatial_supervision="self")
    assert PredictiveModel(cfg).num_parameters() == PredictiveModel(other).num_parameters()


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = tiny(use_sam=False)
    model = PredictiveModel(cfg)
    opt = T.Adam(model.parameters())
    res = model.rollout(frames(np.random.default_rng(8)))
    res.loss.backward()
    opt.step()
    path = tmp_path / "m.stau"
    save_checkpoint(path, model, step=1, extra={"note": "x"}, optimizer=opt)
    loaded, meta = load_checkpoint(path)
    assert loaded.config == cfg and loaded.config.use_sam is False
    assert meta["step"] == 1 and meta["extra"] == {"note": "x"}
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data) and np.array_equal(a.m, b.m) and a.step == b.step
    f = frames(np.random.default_rng(9))
    pa, _ = model.predict(f, 2)
    pb, _ = loaded.predict(f, 2)
    assert np.array_equal(pa, pb)


def test_checkpoint_tensor_layout(tmp_path):
    model = PredictiveModel(tiny())
    path = tmp_path / "m.stau"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    assert raw[:8] == b"STAUCKPT"
    assert struct.unpack("<I", raw[8:12])[0] == 1
    meta, tensors = read_checkpoint(path)
    assert sum(a.size for a in tensors.values()) == parameter_count(model.config)


def test_checkpoint_errors(tmp_path):
    model = PredictiveModel(tiny())
    path = tmp_path / "m.stau"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(raw[:8] + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "ver")
    (tmp_path / "tail").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "tail")
    assert not os.path.exists(f"{path}.tmp")


def test_macs_increase_with_windows():
    grid = {}
    for tau in (1, 2, 5):
        for theta in (1, 2, 5):
            grid[tau, theta] = PredictiveModel(preset("toy").replace(tau=tau, theta=theta)).macs_per_step()
    for tau, theta in grid:
        if tau < 5:
            nxt = 2 if tau == 1 else 5
            assert grid[nxt, theta] > grid[tau, theta]
        if theta < 5:
            nxt = 2 if theta == 1 else 5
            assert grid[tau, nxt] >= grid[tau, theta]
