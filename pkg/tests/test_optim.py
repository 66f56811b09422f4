"""ParamStore registration rules and the Adam update recurrence."""

import numpy as np
import pytest

from artimesh import tape
from artimesh.optim import Adam, ParamStore, adam_step
from artimesh.tape import Tensor, backward


def make_store(theta=0.0):
    store = ParamStore()
    p = store.register("w", Tensor(np.array(theta)), group="other")
    return store, p


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store, _ = make_store()
        with pytest.raises(ValueError, match="duplicate"):
            store.register("w", Tensor(np.zeros(2)))

    def test_register_after_step_rejected(self):
        store, p = make_store()
        opt = Adam(store)
        p.grad = np.array(1.0)
        opt.step()
        with pytest.raises(RuntimeError):
            store.register("late", Tensor(np.zeros(1)))

    def test_unreached_parameters_report_zero_grads(self):
        store = ParamStore()
        a = store.register("a", Tensor(np.array(2.0)))
        store.register("b", Tensor(np.zeros(3)))
        backward(a * a)
        grads = store.gradients()
        assert grads["a"] == pytest.approx(4.0)
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_lr_groups(self):
        store = ParamStore()
        store.register("sdf.w", Tensor(np.zeros(1)), group="prior")
        store.register("enc.w", Tensor(np.zeros(1)), group="other")
        assert store.group_of("sdf.w") == "prior"
        assert store.group_of("enc.w") == "other"


class TestAdam:
    def test_zero_grad_leaves_params_unchanged(self):
        store, p = make_store(1.5)
        opt = Adam(store)
        p.grad = np.array(0.0)
        opt.step()
        assert p.data == pytest.approx(1.5)

    def test_hand_computed_first_step(self):
        # theta=0, g=1, lr=0.1: m_hat=1, v_hat=1 -> theta = -0.1/(1+eps)
        store = ParamStore()
        p = store.register("w", Tensor(np.array(0.0)))
        opt = Adam(store, group_lr={"other": 0.1, "prior": 0.1})
        p.grad = np.array(1.0)
        opt.step()
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        assert p.data == pytest.approx(expected, abs=1e-12)
        assert p.data == pytest.approx(-0.1, abs=1e-6)

    def test_constant_gradient_moves_monotonically(self):
        store, p = make_store(0.0)
        opt = Adam(store)
        prev = 0.0
        for _ in range(5):
            p.grad = np.array(2.0)
            opt.step()
            assert p.data < prev
            prev = float(p.data)

    def test_nan_gradient_skipped_and_counted(self):
        store = ParamStore()
        a = store.register("a", Tensor(np.array(1.0)))
        b = store.register("b", Tensor(np.array(1.0)))
        opt = Adam(store)
        a.grad = np.array(np.nan)
        b.grad = np.array(1.0)
        opt.step()
        assert a.data == pytest.approx(1.0)
        assert b.data != pytest.approx(1.0)
        assert opt.skipped == 1

    def test_prior_group_learning_rate_10x(self):
        store = ParamStore()
        a = store.register("prior.w", Tensor(np.array(0.0)), group="prior")
        b = store.register("head.w", Tensor(np.array(0.0)), group="other")
        opt = Adam(store)
        a.grad = np.array(1.0)
        b.grad = np.array(1.0)
        opt.step()
        assert float(a.data) / float(b.data) == pytest.approx(10.0, rel=1e-9)

    def test_deterministic_given_same_inputs(self):
        results = []
        for _ in range(2):
            store = ParamStore()
            p = store.register("w", Tensor(np.linspace(-1, 1, 5)))
            opt = Adam(store)
            rng = np.random.default_rng(3)
            for _ in range(10):
                p.grad = rng.normal(size=5)
                adam_step(store, opt)
            results.append(p.data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_subset_update_only(self):
        store = ParamStore()
        a = store.register("albedo.w", Tensor(np.array(1.0)))
        b = store.register("sdf.w", Tensor(np.array(1.0)))
        opt = Adam(store)
        a.grad = np.array(1.0)
        b.grad = np.array(1.0)
        opt.step(only={"albedo.w"})
        assert a.data != pytest.approx(1.0)
        assert b.data == pytest.approx(1.0)
