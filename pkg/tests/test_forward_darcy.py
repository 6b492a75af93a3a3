import numpy as np
import pytest

from anchorgrf.forward.darcy import DarcyModel, DarcyPlan, head_at
from anchorgrf.grids import FieldRealization, Grid


class TestHeadProfile:
    def test_uniform_conductivity_linear_head(self):
        logK = np.zeros(100)
        x = np.array([0.0, 25.0, 50.0, 75.0, 100.0])
        h = head_at(logK, 1.0, x)
        assert np.allclose(h, [1.0, 0.75, 0.5, 0.25, 0.0], atol=1e-12)

    def test_two_layer_series_resistance(self):
        # K=1 on [0, 0.5], K=2 on [0.5, 1]: h(0.5) = 1 - (0.5/1)/(0.5/1 + 0.5/2) = 1/3
        n = 10
        logK = np.log(np.where(np.arange(n) < n // 2, 1.0, 2.0))
        h_mid = head_at(logK, 1.0 / n, np.array([0.5]))[0]
        assert h_mid == pytest.approx(1.0 / 3.0, abs=1e-10)

    def test_scaling_invariance(self):
        rng = np.random.default_rng(0)
        logK = rng.normal(size=50)
        x = np.linspace(0.0, 50.0, 23)
        base = head_at(logK, 1.0, x)
        for shift in (-3.0, 0.7, 10.0):
            assert np.array_equal(head_at(logK + shift, 1.0, x), base) or \
                np.allclose(head_at(logK + shift, 1.0, x), base, atol=1e-12)

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            logK = rng.normal(scale=2.0, size=80)
            h = head_at(logK, 1.0, np.linspace(0, 80, 161))
            assert np.all(np.diff(h) <= 1e-14)
            assert h.min() >= -1e-12 and h.max() <= 1 + 1e-12


class TestDarcyModel:
    def test_plan_and_dimension(self):
        grid = Grid(dims=(100,), spacing=(1.0,))
        plan = DarcyPlan.evenly_spaced(grid, 30)
        model = DarcyModel(plan=plan)
        assert model.data_dim == 30
        assert plan.obs_cells[0] == 0 and plan.obs_cells[-1] == 99

    def test_pure_function(self):
        grid = Grid(dims=(100,), spacing=(1.0,))
        model = DarcyModel(plan=DarcyPlan.evenly_spaced(grid, 30))
        field = FieldRealization(grid, np.random.default_rng(2).normal(size=100))
        z1 = model.evaluate(field)
        z2 = model.evaluate(field)
        assert np.array_equal(z1, z2)
        assert z1.shape == (30,)
