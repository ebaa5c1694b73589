from __future__ import annotations

import numpy as np
import pytest
import torch

from specstat import refine as rf
from specstat.core import BScan, ClassId, FormatError, LabelMap, ParameterMap
from specstat.refine import (CHANNEL_PLAN, Divergence, InputConfig, MissingSource, ModelSpec, Normalization,
                             TrainSpec, assemble_input, binarize, build, infer, load_model, save_model,
                             soft_dice_loss, target_array, tile_origins, train)


def gamma_maps(rows, cols, rng):
    return [ParameterMap("gamma", "k", rng.uniform(1, 40, (rows, cols))),
            ParameterMap("gamma", "theta", rng.uniform(1, 50, (rows, cols)))]


def toy_item(rng, h=32, w=32):
    """Two-channel input whose first channel marks a horizontal band; targets follow it."""
    ilm = np.zeros((h, w), bool)
    ilm[8:12] = True
    rpe = np.zeros((h, w), bool)
    rpe[20:26] = True
    tool = np.zeros((h, w), bool)
    tool[2:4, 5:20] = True
    x = np.stack([ilm * 1.0 + rpe * 2.0 + tool * 3.0 + rng.normal(0, 0.1, (h, w)), rng.normal(0, 1, (h, w))])
    return x, [LabelMap(ClassId.ILM, ilm), LabelMap(ClassId.RPE, rpe), LabelMap(ClassId.TOOL, tool)]


# ------------------------------------------------------------------ inputs


def test_channel_plan():
    assert [len(c.channels) for c in InputConfig] == [1, 3, 3, 2]
    assert CHANNEL_PLAN[InputConfig.D] == ("gamma.k", "gamma.theta")
    assert InputConfig.parse("d") is InputConfig.D
    with pytest.raises(ValueError):
        InputConfig.parse("E")


def test_assemble_a_is_scan(rng):
    scan = BScan(rng.uniform(0, 255, (14, 21)))
    x = assemble_input("A", scan)
    np.testing.assert_array_equal(x[0], scan.pixels)
    norm = Normalization.fit([x])
    xn = assemble_input("A", scan, norm=norm)
    assert abs(float(xn.mean())) < 1e-5 and abs(float(xn.std()) - 1) < 1e-4


def test_assemble_d_ignores_scan(rng):
    maps = gamma_maps(2, 3, rng)
    a = assemble_input("D", BScan(rng.uniform(0, 255, (14, 21))), maps)
    b = assemble_input("D", BScan(rng.uniform(0, 255, (14, 21))), maps)
    c = assemble_input("D", None, maps, shape=(14, 21))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    assert a.shape == (2, 14, 21)
    assert a[0, 6, 13] == np.log(maps[0].values[0, 1])


def test_gamma_channels_scale_invariant(rng):
    k, th = gamma_maps(3, 4, rng)
    th_nan = ParameterMap("gamma", "theta", np.where(np.eye(3, 4, dtype=bool), np.nan, th.values))
    base = assemble_input("D", None, [k, th_nan], shape=(21, 28))
    for lam in (0.5, 2.0, 7.3):
        scaled = ParameterMap("gamma", "theta", th_nan.values * lam)
        np.testing.assert_allclose(assemble_input("D", None, [k, scaled], shape=(21, 28)), base, atol=1e-12)
    assert base[1, 0, 0] == 0.0  # invalid cell
    assert np.median(rf.gamma_channel(th_nan).values[th_nan.valid]) == pytest.approx(0.0, abs=1e-12)


def test_strips():
    x = np.arange(2 * 8 * 20, dtype=float).reshape(2, 8, 20)
    parts = rf._strips(x, 8, 4)
    assert [p.shape for p in parts] == [(2, 8, 8)] * 3
    np.testing.assert_array_equal(parts[-1], x[..., 12:])
    assert rf._strips(x, None, 4)[0] is x
    with pytest.raises(ValueError):
        rf._strips(x, 6, 4)


def test_assemble_b_empty_weak_is_zero():
    weak = [LabelMap(c, np.zeros((7, 7), bool)) for c in (ClassId.ILM, ClassId.RPE, ClassId.TOOL)]
    x = assemble_input("B", weak_maps=weak)
    assert x.shape == (3, 7, 7) and not x.any()
    assert np.all(np.isfinite(Normalization.fit([x]).apply(x)))


def test_missing_sources(rng):
    scan = BScan(rng.uniform(0, 255, (14, 14)))
    with pytest.raises(MissingSource):
        assemble_input("B", scan)
    with pytest.raises(MissingSource):
        assemble_input("C", scan)
    with pytest.raises(MissingSource):
        assemble_input("A", None, gamma_maps(2, 2, rng), shape=(14, 14))
    with pytest.raises(MissingSource):
        target_array([LabelMap(ClassId.ILM, np.zeros((2, 2), bool))])


def test_normalization_validation():
    with pytest.raises(ValueError):
        Normalization((0.0,), (0.0,))
    with pytest.raises(ValueError):
        Normalization((float("nan"),), (1.0,))
    n = Normalization.fit([np.ones((1, 3, 3))])
    assert n.std == (1.0,)


# -------------------------------------------------------------------- loss


def test_soft_dice_examples():
    t = torch.zeros(3, 100, 200)
    t[:, :, :100] = 1.0  # 10^4 positive pixels per channel
    assert float(soft_dice_loss(t, t)) <= 3e-3
    assert float(soft_dice_loss(t, t)) / 3 <= 1e-3
    per = float(soft_dice_loss(1 - t, t)) / 3
    assert per == pytest.approx(1 - 1 / 20001)
    with pytest.raises(ValueError):
        soft_dice_loss(t, t[:, :, :10])


def test_soft_dice_matches_formula(rng):
    p = rng.random((3, 5, 6))
    t = (rng.random((3, 5, 6)) < 0.4).astype(float)
    expected = sum(1 - (2 * (p[c] * t[c]).sum() + 1) / (p[c].sum() + t[c].sum() + 1) for c in range(3))
    got = float(soft_dice_loss(torch.from_numpy(p), torch.from_numpy(t)))
    assert got == pytest.approx(expected, rel=1e-12)
    pooled = soft_dice_loss(torch.from_numpy(np.stack([p, p])), torch.from_numpy(np.stack([t, t])), pooled=True)
    expected_pooled = sum(1 - (4 * (p[c] * t[c]).sum() + 1) / (2 * p[c].sum() + 2 * t[c].sum() + 1)
                          for c in range(3))
    assert float(pooled) == pytest.approx(expected_pooled, rel=1e-12)


def test_soft_dice_gradient_finite_differences(rng):
    p = torch.tensor(rng.random((3, 4, 4)), dtype=torch.float64, requires_grad=True)
    t = torch.tensor((rng.random((3, 4, 4)) < 0.5).astype(float))
    soft_dice_loss(p, t).backward()
    h = 1e-6
    fd = np.zeros(p.shape)
    base = p.detach().numpy()
    for idx in np.ndindex(*p.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (float(soft_dice_loss(torch.from_numpy(plus), t))
                   - float(soft_dice_loss(torch.from_numpy(minus), t))) / (2 * h)
    assert np.max(np.abs(fd - p.grad.numpy())) <= 1e-5


def test_network_gradient_finite_differences():
    torch.manual_seed(0)
    net = rf.ResUNet(ModelSpec(2)).double()
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(1, 2, 8, 8, generator=gen, dtype=torch.float64)
    t = (torch.rand(1, 3, 8, 8, generator=gen) < 0.5).double()
    params = dict(net.named_parameters())

    def loss():
        return soft_dice_loss(net(x), t)

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(5)
    names = sorted(params)
    checked = 0
    while checked < 50:
        name = names[rng.integers(len(names))]
        w = params[name]
        i = int(rng.integers(w.numel()))
        g = float(w.grad.view(-1)[i])
        if abs(g) < 1e-6:
            continue
        h = 1e-6
        with torch.no_grad():
            orig = float(w.view(-1)[i])
            w.view(-1)[i] = orig + h
            lp = float(loss())
            w.view(-1)[i] = orig - h
            lm = float(loss())
            w.view(-1)[i] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g) <= 1e-4 * abs(g), (name, i, fd, g)
        checked += 1


# ------------------------------------------------------------------- model


def test_build_shapes_and_count():
    net = build(ModelSpec(2), seed=0)
    conv = lambda i, o, k=3: i * o * k * k + o  # noqa: E731
    expected = (conv(2, 16) + sum(2 * conv(c, c) for c in (16, 32, 64)) + conv(16, 32) + conv(32, 64)
                + conv(48, 16) + conv(96, 32) + conv(16, 3, 1))
    assert rf.parameter_count(net) == expected == 155_091
    for hw in ((8, 8), (36, 44)):
        out = net(torch.zeros(1, 2, *hw))
        assert out.shape == (1, 3, *hw)


def test_infer_probabilities_and_channel_mismatch(rng):
    model = rf.Model(InputConfig.D, ModelSpec(2), Normalization((0.0, 0.0), (1.0, 1.0)), build(ModelSpec(2), 3))
    p = infer(model, rng.normal(0, 5, (2, 30, 22)))
    assert p.shape == (3, 30, 22)
    assert p.min() >= 0.0 and p.max() <= 1.0
    with pytest.raises(ValueError):
        infer(model, rng.normal(size=(3, 8, 8)))


def test_binarize_thresholds(rng):
    p = rng.random((3, 5, 5))
    assert all(m.mask.all() for m in binarize(p, 0.0))
    assert not any(m.mask.any() for m in binarize(p, 1.01))
    masks = binarize(p, 0.5)
    np.testing.assert_array_equal(masks[1].mask, p[1] >= 0.5)
    assert [m.class_id for m in masks] == [ClassId.ILM, ClassId.RPE, ClassId.TOOL]


def test_tile_origins():
    assert tile_origins(512, 128) == [0, 128, 256, 384]
    assert tile_origins(300, 128) == [0, 128, 172]
    assert tile_origins(100, 128) == [0]


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def toy_data():
    rng = np.random.default_rng(11)
    return [toy_item(rng) for _ in range(6)]


def test_zero_epochs_is_initialization(toy_data):
    res = train("D", TrainSpec(epochs=0, seed=4), toy_data)
    assert res.history == []
    ref = build(ModelSpec(2), 4)
    for (k, a), (_, b) in zip(res.model.net.state_dict().items(), ref.state_dict().items()):
        assert torch.equal(a, b), k


def test_training_deterministic_and_decreasing(toy_data):
    spec = TrainSpec(epochs=15, seed=2, strip_width=None)
    a = train("D", spec, toy_data)
    b = train("D", spec, toy_data)
    assert a.history == b.history
    for x, y in zip(a.model.state_arrays().values(), b.model.state_arrays().values()):
        assert x.tobytes() == y.tobytes()
    assert a.history[-1] < a.initial_loss
    assert all(0.0 <= v <= 3.0 for v in a.history)


def test_model_roundtrip_bitwise(toy_data, tmp_path):
    res = train("D", TrainSpec(epochs=1, seed=0, strip_width=None), toy_data)
    res.model.meta = {"note": "x"}
    path = tmp_path / "m.bin"
    save_model(res.model, path)
    back = load_model(path)
    assert back.config is InputConfig.D and back.norm == res.model.norm and back.meta == {"note": "x"}
    for (k, a), (_, b) in zip(res.model.state_arrays().items(), back.state_arrays().items()):
        assert a.tobytes() == b.tobytes(), k
    save_model(back, tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()
    x = res.model.norm.apply(toy_data[0][0])
    np.testing.assert_array_equal(infer(res.model, x), infer(back, x))


def test_load_model_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a model at all")
    with pytest.raises(FormatError):
        load_model(p)


def test_divergence_reports_epoch(toy_data, monkeypatch):
    real = rf.soft_dice_loss
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        out = real(*a, **k)
        # initial pass and first epoch are fine, then the loss turns NaN
        return out * float("nan") if calls["n"] > 4 else out

    monkeypatch.setattr(rf, "soft_dice_loss", flaky)
    with pytest.raises(Divergence) as info:
        train("D", TrainSpec(epochs=3, batch_size=4, strip_width=None), toy_data)
    assert info.value.epoch == 2


def test_schedule_and_clip_options(toy_data):
    const = train("D", TrainSpec(epochs=2, schedule="constant", clip_norm=None, strip_width=16), toy_data)
    assert len(const.history) == 2
    with pytest.raises(ValueError):
        train("D", TrainSpec(epochs=1, schedule="step"), toy_data)


def test_train_rejects_bad_shapes(toy_data):
    with pytest.raises(ValueError):
        train("A", TrainSpec(epochs=1), toy_data)
    with pytest.raises(ValueError):
        train("D", TrainSpec(epochs=1), [])
