import numpy as np
import pytest

from rqen import autodiff as ad
from rqen.autodiff import ParamStore, Tensor
from rqen.gradcheck import gradient_check, relative_error


def quadratic(store):
    w = store["w"]
    return ad.sum_(ad.mul(w, w))


def test_quadratic_errors_tiny(rng):
    store = ParamStore({"w": rng.normal(size=(4, 3))})
    report = gradient_check(quadratic, store, tolerance=1e-8)
    assert report.passed is True
    assert report.max_rel_error < 1e-8
    assert report.n_checked == 12


def test_step_must_be_positive(rng):
    store = ParamStore({"w": rng.normal(size=3)})
    for step in (0.0, -1e-4):
        with pytest.raises(ValueError, match="step"):
            gradient_check(quadratic, store, step=step)


def test_parameters_restored_exactly(rng):
    w = rng.normal(size=(3, 3))
    store = ParamStore({"w": w.copy()})
    gradient_check(quadratic, store)
    assert store.params["w"].tobytes() == w.tobytes()


def test_nondeterministic_closure_gets_no_verdict(rng):
    noise = np.random.default_rng(0)
    store = ParamStore({"w": rng.normal(size=2)})

    def closure(s):
        return ad.add(quadratic(s), Tensor(noise.normal()))

    report = gradient_check(closure, store)
    assert report.deterministic is False
    assert report.passed is None
    assert "no verdict" in report.format()


def test_wrong_gradient_fails_and_lists_worst(rng):
    def bad_square(x):
        x = ad.as_tensor(x)
        return ad._node(x.value**2, (x,), "bad", lambda g: (g * 3 * x.value,))

    store = ParamStore({"a": rng.normal(size=3) + 2.0, "b": rng.normal(size=2)})

    def closure(s):
        return ad.add(ad.sum_(bad_square(s["a"])), ad.sum_(ad.mul(s["b"], s["b"])))

    report = gradient_check(closure, store, n_worst=2)
    assert report.passed is False
    assert len(report.worst) == 2
    assert all(o.name == "a" for o in report.worst)
    assert report.per_param["b"] < 1e-6
    assert "FAIL" in report.format()


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5
