import numpy as np
import pytest

from convbert.errors import ContractError, EvaluationError
from convbert.gradcheck import grad_check
from convbert.tensor import Tensor, mul, parameter, tsum
from convbert.verify import grad_suite, grad_tolerance


def test_quadratic_passes():
    x = parameter(np.array([1.0, -2.0, 3.0]))
    assert grad_check(lambda: tsum(mul(x, x)), [x]) < 1e-8


def _half_gradient_square(x):
    """sum(x^2) whose backward reports x instead of 2x."""
    y = tsum(mul(x, x))
    node = Tensor(y.data, requires_grad=True)
    node._parents = (x,)
    node._backward = lambda g: (g * x.data,)
    return node


def test_wrong_gradient_is_detected():
    x = parameter(np.array([1.0, 2.0]))
    assert grad_check(lambda: _half_gradient_square(x), [x]) > 0.4


def test_eps_out_of_range():
    x = parameter(np.ones(2))
    with pytest.raises(ContractError):
        grad_check(lambda: tsum(x), [x], eps=1e-2)


def test_non_finite_loss_names_parameter():
    x = parameter(np.array([1.0]), name="scale")

    def f():
        return tsum(mul(x, x)) if x.data[0] <= 1.0 else tsum(mul(x, np.inf))

    with pytest.raises(EvaluationError, match="scale"):
        grad_check(f, [x])


@pytest.mark.parametrize("scope", ["op", "block"])
def test_suites_pass(scope):
    tol = grad_tolerance(scope)
    for name, err in grad_suite(scope, seed=3).items():
        assert err < tol, name
