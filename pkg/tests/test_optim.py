import numpy as np
import pytest

from sketchdiff.errors import NonFiniteError
from sketchdiff.optim import Adam, warmup_lr


def make_scalar(value=0.0):
    p = np.array([value])
    g = np.zeros(1)
    return p, g


def test_zero_gradient_is_a_noop_on_params():
    p, g = make_scalar(3.14)
    opt = Adam([(p, g)], lr=0.1)
    opt.step()
    assert p[0] == 3.14
    assert opt.step_count == 1


def test_first_step_on_unit_gradient():
    # bias correction makes m_hat = v_hat = g, so the update is lr*g/(|g|+eps)
    p, g = make_scalar(0.0)
    opt = Adam([(p, g)], lr=0.001)
    g[0] = 1.0
    opt.step()
    assert p[0] == pytest.approx(-0.001, rel=1e-6)
    assert g[0] == 0.0  # gradients zeroed after the update


def scripted_adam(grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8, w0=0.0):
    """Independent scalar recurrence used as the oracle trace."""
    m = v = 0.0
    w = w0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        w -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return w


def test_two_identical_gradient_steps_match_oracle():
    p, g = make_scalar(0.0)
    opt = Adam([(p, g)], lr=0.001)
    for _ in range(2):
        g[0] = 1.0
        opt.step()
    assert p[0] == pytest.approx(scripted_adam([1.0, 1.0]), abs=1e-15)


def test_longer_varied_trace_matches_oracle():
    trace = [0.5, -1.0, 2.0, 0.1, -0.3]
    p, g = make_scalar(0.7)
    opt = Adam([(p, g)], lr=0.01)
    for gv in trace:
        g[0] = gv
        opt.step()
    assert p[0] == pytest.approx(scripted_adam(trace, lr=0.01, w0=0.7), abs=1e-14)


def test_nonfinite_gradient_rejected():
    p, g = make_scalar()
    opt = Adam([(p, g)])
    g[0] = np.nan
    with pytest.raises(NonFiniteError):
        opt.step()


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Adam([(np.zeros(2), np.zeros(3))])


def test_lr_must_be_positive():
    p, g = make_scalar()
    with pytest.raises(ValueError):
        Adam([(p, g)], lr=0.0)


def test_warmup_schedule_exact():
    # effective lr at step s <= warmup is lr*s/warmup, constant afterwards
    for s in range(1, 101):
        assert warmup_lr(s, 0.001, 100) == 0.001 * s / 100
    assert warmup_lr(101, 0.001, 100) == 0.001
    assert warmup_lr(5000, 0.001, 100) == 0.001
    assert warmup_lr(1, 0.001, 0) == 0.001
