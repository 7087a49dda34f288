import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal.errors import ContractError, DimensionError
from trimodal.optim import NesterovSGD, OptimizerState, lr_at_epoch, sgd_nesterov_step
from trimodal.tensor import Tensor


def _scalar_unroll(p, grads, lr, mu, wd):
    """Independent scalar reference: plain Python floats, no arrays."""
    v = 0.0
    for g in grads:
        g = g + wd * p
        v = mu * v + g
        p = p - lr * (g + mu * v)
    return p, v


@pytest.mark.parametrize("lr,mu,wd", [(0.1, 0.9, 0.0), (0.01, 0.5, 5e-4), (1.0, 0.0, 0.1)])
def test_matches_scalar_unroll(lr, mu, wd):
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    p = Tensor(np.array([1.5]), requires_grad=True)
    state = OptimizerState.for_params({"p": p}, lr=lr, momentum=mu, weight_decay=wd)
    for g in grads:
        sgd_nesterov_step({"p": p}, state, {"p": np.array([g])})
    want_p, want_v = _scalar_unroll(1.5, grads, lr, mu, wd)
    assert p.values[0] == pytest.approx(want_p, rel=1e-12)
    assert state.velocities["p"][0] == pytest.approx(want_v, rel=1e-12)


def test_first_step_frozen_value():
    # v = 0.5 + 0.01*2 = 0.52; p = 2 - 0.1*(0.52 + 0.9*0.52) = 1.9012
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([0.5])
    opt = NesterovSGD({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.01)
    opt.step()
    assert p.values[0] == pytest.approx(1.9012, abs=1e-15)


def test_missing_gradient_raises():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        NesterovSGD({"p": p}).step()


def test_velocity_shape_checked():
    p = Tensor(np.ones(2), requires_grad=True)
    state = OptimizerState(velocities={"p": np.zeros(3)})
    with pytest.raises(DimensionError):
        sgd_nesterov_step({"p": p}, state, {"p": np.ones(2)})


def test_zero_grad_and_set_lr():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = NesterovSGD({"p": p})
    p.grad = np.ones(2)
    opt.zero_grad()
    assert p.grad is None
    opt.set_lr(0.5)
    assert opt.state.lr == 0.5


@given(st.floats(1e-6, 1.0), st.floats(0.5, 1.0), st.integers(0, 40))
@settings(max_examples=50)
def test_schedule_is_geometric(eta0, gamma, epoch):
    assert lr_at_epoch(eta0, gamma, epoch) == pytest.approx(eta0 * gamma ** epoch)
    if epoch:
        assert lr_at_epoch(eta0, gamma, epoch) <= lr_at_epoch(eta0, gamma, epoch - 1)


def test_descends_a_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = NesterovSGD({"p": p}, lr=0.05, momentum=0.9, weight_decay=0.0)
    for _ in range(200):
        p.grad = 2 * p.values
        opt.step()
    assert np.abs(p.values).max() < 1e-6
