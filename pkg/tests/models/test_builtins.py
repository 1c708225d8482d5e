import numpy as np
import pytest

from app.errors.errors import ConfigError
from app.models.builtins import BUILTINS, BuiltinKind, build, list_builtins, lookup, tabulated_functional


def test_list_builtins_prints_formulas():
    text = list_builtins()
    for name in ("x2", "min_x2_c", "linear", "identity_diffusion"):
        assert name in text
    assert "min(|x|^2, c)" in text
    assert len([b for b in BUILTINS if b.kind in (BuiltinKind.FUNCTIONAL, BuiltinKind.FLOW)]) >= 6


def test_unknown_builtin_is_config_error():
    with pytest.raises(ConfigError, match="unknown functional builtin 'x3'"):
        lookup(BuiltinKind.FUNCTIONAL, "x3")


def test_bad_builtin_parameter_is_config_error():
    with pytest.raises(ConfigError):
        build(BuiltinKind.FUNCTIONAL, "x2", {"c": 2.0}, horizon=1.0, dim=1)


def test_min_x2_is_bounded_with_parameter():
    functional = build(BuiltinKind.FUNCTIONAL, "min_x2_c", {"c": 2.0}, horizon=1.0, dim=1)
    values = functional(np.array([[[0.5]], [[3.0]]]))
    np.testing.assert_allclose(values, [0.25, 2.0])
    assert functional.bounded and functional.bound == 2.0


def test_increment_functional_uses_two_times():
    functional = build(BuiltinKind.FUNCTIONAL, "increment_min_sq", horizon=1.0, dim=1)
    assert functional.times == (0.5, 1.0)
    np.testing.assert_allclose(functional(np.array([[[0.2], [0.7]], [[0.0], [3.0]]])), [0.25, 1.0])


def test_tabulated_functional_interpolates():
    functional = tabulated_functional(1.0, [-1.0, 0.0, 1.0], [1.0, 0.0, 2.0])
    np.testing.assert_allclose(functional(np.array([[[0.5]], [[-2.0]], [[4.0]]])), [1.0, 1.0, 2.0])
    assert functional.lipschitz == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        tabulated_functional(1.0, [0.0, 0.0], [1.0, 2.0])


def test_flow_builtins_have_matching_shapes():
    flow_spec = build(BuiltinKind.FLOW, "ou_qv_drift", dim=2)
    x = np.ones((5, 2))
    coefficients = flow_spec.with_eps(0.1).at_eps()
    assert coefficients.b(x).shape == (5, 2)
    assert coefficients.sigma(x).shape == (5, 2, 2)
    assert coefficients.h(x).shape == (5, 2, 3)
    np.testing.assert_allclose(coefficients.b(x), -x + 0.1 * np.sin(x))


def test_exit_event():
    event = build(BuiltinKind.EVENT, "exit", {"a": 1.0})
    paths = np.array([[[0.0], [0.5], [0.2]], [[0.0], [-1.2], [0.0]]])
    np.testing.assert_array_equal(event(paths), [False, True])
