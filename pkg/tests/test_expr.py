import math

import numpy as np
import pytest

from narxhybrid.expr import EvaluationError, ExpressionError, lag_symbol, parse


def test_arithmetic_and_caret_power():
    e = parse("2*x1^2 + sin(pi/2) - u1")
    assert e.evaluate({"x1": 3.0, "u1": 1.0}) == pytest.approx(18.0)
    assert e.names == {"x1", "u1"}


def test_lag_symbols():
    e = parse("x1(-2)^3 + x2(-1)", lags=True)
    assert e.max_lag == 2
    assert e.symbols == {lag_symbol("x1", 2), lag_symbol("x2", 1)}
    env = {lag_symbol("x1", 2): 2.0, lag_symbol("x2", 1): 1.0}
    assert e.evaluate(env) == 9.0


def test_lag_syntax_requires_flag():
    with pytest.raises(ExpressionError):
        parse("x1(-1)")


def test_condition_margin_sign():
    g = parse("x1 >= 1 and x2 < 3", condition=True)
    assert g.evaluate({"x1": 2.0, "x2": 1.0}) > 0
    assert g.evaluate({"x1": 0.0, "x2": 1.0}) < 0
    with pytest.raises(ExpressionError):
        parse("x1 + 1", condition=True)
    with pytest.raises(ExpressionError):
        parse("x1 > 1")


@pytest.mark.parametrize("src", ["__import__('os')", "x1.real", "[1, 2]", "lambda: 1", "", "x1 +"])
def test_rejects_unsafe_or_malformed(src):
    with pytest.raises(ExpressionError):
        parse(src)


def test_backends_agree_and_domain_errors():
    e = parse("exp(x1) + log(x2)")
    xs = np.linspace(0.1, 2.0, 7)
    vec = e.evaluate({"x1": xs, "x2": xs})
    scal = [e.evaluate({"x1": v, "x2": v}, backend="math") for v in xs]
    np.testing.assert_allclose(vec, scal, rtol=1e-15)
    with pytest.raises(EvaluationError):
        parse("log(x1)").evaluate({"x1": -1.0}, backend="math")
    assert math.isnan(parse("log(x1)").evaluate({"x1": np.array([-1.0])})[0])
