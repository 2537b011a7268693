import numpy as np
import pytest

from mstar import autodiff as ad
from mstar.autodiff import Tensor
from mstar.checkpoint import CheckpointError, load_params, save_params
from mstar.optim import Adam, AdamW, ConstantLr, OneCycle, schedule_lr


def _param(values):
    t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    t.zero_grad()
    return t


def test_adam_first_step_magnitude_is_about_lr():
    p = _param([1.0, -2.0, 0.5])
    p.grad = np.array([0.3, -4.0, 100.0])
    opt = Adam({"p": p}, lr=1e-3)
    before = p.data.copy()
    opt.step()
    delta = p.data - before
    # first Adam step moves ~lr in the direction opposite the gradient
    assert np.allclose(np.abs(delta), 1e-3, rtol=1e-4)
    assert np.all(np.sign(delta) == -np.sign(p.grad))
    assert opt.step_count == 1


def test_zero_gradient_leaves_params_unchanged():
    p = _param([1.0, 2.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adamw_decoupled_decay_shrinks_params():
    p = _param([2.0, -2.0])
    lam = 0.1
    opt = AdamW({"p": p}, lr=0.5, weight_decay=lam)
    opt.step()
    assert np.allclose(p.data, np.array([2.0, -2.0]) * (1 - 0.5 * lam))


def test_coupled_weight_decay_differs_from_decoupled():
    p1 = _param([2.0]); p2 = _param([2.0])
    p1.grad = np.array([1.0]); p2.grad = np.array([1.0])
    Adam({"p": p1}, lr=0.1, weight_decay=0.1).step()
    Adam({"p": p2}, lr=0.1, weight_decay=0.1, decoupled=True).step()
    assert not np.allclose(p1.data, p2.data)


def test_one_cycle_endpoints():
    sched = OneCycle(max_lr=0.4, total_steps=1000, warmup_frac=0.3,
                     start_div=25, final_div=1e4)
    assert schedule_lr(sched, 0) == pytest.approx(0.4 / 25)
    assert schedule_lr(sched, 300) == pytest.approx(0.4)
    assert schedule_lr(sched, 1000) == pytest.approx(0.4 / 1e4, abs=1e-12)
    # out of range clamps to the final value
    assert schedule_lr(sched, 5000) == schedule_lr(sched, 1000)
    assert all(schedule_lr(sched, s) > 0 for s in range(0, 1001, 7))


def test_one_cycle_monotone_up_then_down():
    sched = OneCycle(max_lr=1.0, total_steps=100)
    ramp = [sched.lr(s) for s in range(0, 31)]
    fall = [sched.lr(s) for s in range(30, 101)]
    assert all(a < b for a, b in zip(ramp, ramp[1:]))
    assert all(a >= b for a, b in zip(fall, fall[1:]))


def test_constant_schedule():
    assert schedule_lr(ConstantLr(0.01), 123) == 0.01


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a/w": rng.normal(size=(3, 4)), "b": rng.normal(size=7),
              "scalar": np.array(2.5)}
    path = tmp_path / "ckpt.bin"
    save_params(path, params)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"JUNK1" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_params(path)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "trunc.bin"
    save_params(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError):
        load_params(path)


def test_adam_descends_quadratic():
    p = _param(np.array([5.0, -3.0]))
    opt = Adam({"p": p}, lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        loss = ad.tsum(ad.mul(Tensor(p.data) * 0 + p, p))  # p dot p
        loss = ad.tsum(ad.mul(p, p))
        p.zero_grad()
        ad.backward(loss)
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)
