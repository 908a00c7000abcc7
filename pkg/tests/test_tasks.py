"""Tests for the inner-task implementations and the generalization suite."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from helpers import BENCH_HESSIAN, fd_gradient
from starlab.nqm import QuadraticTask
from starlab.tasks import (
    DatasetSpec,
    InnerTask,
    QuadraticInnerTask,
    SuiteEntry,
    ToyMlpTask,
    default_meta_task,
    generalization_suite,
    make_dataset,
    quadratic_task_adapter,
    toy_mlp_task,
)


class TestQuadraticInnerTask:
    def test_protocol_and_shapes(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        assert isinstance(task, InnerTask)
        assert task.shapes() == (("phi", (2,)),)

    def test_init_params_distribution(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        draws = np.array([task.init_params(i)["phi"] for i in range(2000)])
        se_mean = np.sqrt(10.0 / 2000)
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se_mean)
        var = draws.var(axis=0, ddof=1)
        assert np.all(np.abs(var - 10.0) < 4 * 10.0 * np.sqrt(2.0 / 2000))

    def test_init_params_deterministic(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        assert_array_equal(task.init_params(5)["phi"], task.init_params(5)["phi"])
        assert not np.array_equal(task.init_params(5)["phi"], task.init_params(6)["phi"])

    def test_noiseless_loss_and_grad_exact(self):
        base = QuadraticTask(
            dim=2,
            hessian=BENCH_HESSIAN,
            noise_cov=np.zeros((2, 2)),
            init_mean=np.zeros(2),
            init_cov=np.eye(2),
        )
        task = quadratic_task_adapter(base)
        phi = np.array([1.0, -2.0])
        loss, grads = task.loss_and_grad({"phi": phi}, batch_seed=0)
        assert_allclose(grads["phi"], BENCH_HESSIAN @ phi, rtol=1e-15)
        assert_allclose(loss, 0.5 * phi @ BENCH_HESSIAN @ phi, rtol=1e-15)

    def test_gradient_consistent_with_loss(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        phi = np.array([0.5, 1.5])
        loss, grads = task.loss_and_grad({"phi": phi}, batch_seed=77)
        g = grads["phi"]
        h_inv_g = np.linalg.solve(bench_task.hessian, g)
        assert_allclose(loss, 0.5 * g @ h_inv_g, rtol=1e-12)

    def test_batch_noise_mean_matches_closed_form(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        phi = np.array([1.0, 0.5])
        n = 20000
        losses = np.array(
            [task.loss_and_grad({"phi": phi}, batch_seed=i)[0] for i in range(n)]
        )
        expected = 0.5 * phi @ bench_task.hessian @ phi + 0.5 * np.trace(
            bench_task.hessian @ bench_task.noise_cov
        )
        se = losses.std(ddof=1) / np.sqrt(n)
        assert abs(losses.mean() - expected) < 3 * se

    def test_batch_seed_deterministic(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        phi = {"phi": np.array([1.0, 2.0])}
        a = task.loss_and_grad(phi, 9)
        b = task.loss_and_grad(phi, 9)
        assert a[0] == b[0]
        assert_array_equal(a[1]["phi"], b[1]["phi"])
        c = task.loss_and_grad(phi, 10)
        assert a[0] != c[0]

    def test_fingerprint_sensitivity(self, bench_task):
        task = quadratic_task_adapter(bench_task)
        other = QuadraticInnerTask(
            task=QuadraticTask(
                dim=2,
                hessian=2.0 * bench_task.hessian,
                noise_cov=bench_task.noise_cov,
                init_mean=bench_task.init_mean,
                init_cov=bench_task.init_cov,
            )
        )
        assert task.fingerprint() == quadratic_task_adapter(bench_task).fingerprint()
        assert task.fingerprint() != other.fingerprint()


class TestDatasets:
    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "moons"},
            {"n_points": 0},
            {"n_points": 5000},
            {"n_classes": 1},
            {"input_dim": 1},
        ],
    )
    def test_spec_validation(self, kw):
        base = dict(kind="blobs", n_points=64, n_classes=2)
        base.update(kw)
        with pytest.raises(ValueError):
            DatasetSpec(**base)

    def test_deterministic(self):
        spec = DatasetSpec(kind="blobs", n_points=64, n_classes=3, seed=5)
        x1, y1 = make_dataset(spec)
        x2, y2 = make_dataset(spec)
        assert_array_equal(x1, x2)
        assert_array_equal(y1, y2)

    def test_labels_round_robin(self):
        spec = DatasetSpec(kind="blobs", n_points=10, n_classes=3, seed=5)
        _, y = make_dataset(spec)
        assert_array_equal(y, np.arange(10) % 3)

    def test_blob_geometry(self):
        spec = DatasetSpec(kind="blobs", n_points=300, n_classes=3, noise=0.01, seed=2)
        x, y = make_dataset(spec)
        for k in range(3):
            center = 2.5 * np.array([np.cos(2 * np.pi * k / 3), np.sin(2 * np.pi * k / 3)])
            assert_allclose(x[y == k].mean(axis=0), center, atol=0.01)

    def test_ring_geometry(self):
        spec = DatasetSpec(kind="rings", n_points=200, n_classes=2, noise=0.01, seed=2)
        x, y = make_dataset(spec)
        radii = np.linalg.norm(x, axis=1)
        assert np.all(np.abs(radii - (1.0 + y)) < 0.08)

    def test_extra_input_dims_are_noise(self):
        spec = DatasetSpec(kind="blobs", n_points=400, n_classes=2, noise=0.3, input_dim=4, seed=2)
        x, _ = make_dataset(spec)
        assert x.shape == (400, 4)
        assert np.all(np.abs(x[:, 2:]) < 0.3 * 6)


class TestToyMlpTask:
    @pytest.mark.parametrize(
        "kw",
        [
            {"layout": (2,)},
            {"nonlinearity": "gelu"},
            {"layout": (3, 8, 2)},
            {"layout": (2, 8, 3)},
        ],
    )
    def test_validation(self, kw):
        base = dict(
            layout=(2, 8, 2),
            dataset=DatasetSpec(kind="blobs", n_points=64, n_classes=2),
            nonlinearity="relu",
        )
        base.update(kw)
        with pytest.raises(ValueError):
            toy_mlp_task(**base)

    def test_shapes_layout(self):
        task = default_meta_task()
        assert task.shapes() == (
            ("w0", (2, 8)),
            ("b0", (8,)),
            ("w1", (8, 8)),
            ("b1", (8,)),
            ("w2", (8, 2)),
            ("b2", (2,)),
        )

    def test_init_params(self):
        task = default_meta_task()
        params = task.init_params(3)
        again = task.init_params(3)
        for name in params:
            assert_array_equal(params[name], again[name])
        assert_array_equal(params["b0"], np.zeros(8))
        assert_array_equal(params["b2"], np.zeros(2))
        # fan-in scaled gaussians: loose bound on the empirical std
        w1 = task.init_params(0)["w1"]
        assert 0.15 < w1.std() * np.sqrt(8) < 2.5

    def test_zero_weights_give_log_n_classes(self):
        task = default_meta_task()
        params = {name: np.zeros(shape) for name, shape in task.shapes()}
        loss, _ = task.loss_and_grad(params, batch_seed=4)
        assert_allclose(loss, np.log(2.0), rtol=1e-14)

    @pytest.mark.parametrize("entry_name", ["mlp-base", "mlp-tanh", "mlp-wide-deep"])
    def test_gradients_match_finite_differences(self, entry_name):
        entry = {e.name: e for e in generalization_suite()}[entry_name]
        task = entry.task
        init = task.init_params(13)
        names = [name for name, _ in task.shapes()]
        flat = np.concatenate([init[name].reshape(-1) for name in names])

        def unflatten(vec):
            out = {}
            offset = 0
            for name, shape in task.shapes():
                size = int(np.prod(shape))
                out[name] = vec[offset:offset + size].reshape(shape)
                offset += size
            return out

        def loss_at(vec):
            return task.loss_and_grad(unflatten(vec), batch_seed=99)[0]

        _, grads = task.loss_and_grad(unflatten(flat), batch_seed=99)
        analytic = np.concatenate([grads[name].reshape(-1) for name in names])
        numeric = fd_gradient(loss_at, flat, h=1e-6)
        rel = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12)
        assert rel < 1e-4

    def test_batch_seed_determinism(self):
        task = default_meta_task()
        params = task.init_params(0)
        a, _ = task.loss_and_grad(params, 5)
        b, _ = task.loss_and_grad(params, 5)
        c, _ = task.loss_and_grad(params, 6)
        assert a == b
        assert a != c

    def test_fingerprint_sensitivity(self):
        base = default_meta_task()
        spec = base.dataset
        assert base.fingerprint() == default_meta_task().fingerprint()
        assert toy_mlp_task(base.layout, spec, "tanh").fingerprint() != base.fingerprint()
        assert toy_mlp_task((2, 4, 2), spec).fingerprint() != base.fingerprint()
        assert (
            toy_mlp_task(base.layout, spec, batch_size=32).fingerprint()
            != base.fingerprint()
        )


class TestSuite:
    def test_entry_names_and_horizons(self):
        suite = generalization_suite()
        assert [e.name for e in suite] == [
            "mlp-base",
            "mlp-wide-deep",
            "mlp-tanh",
            "mlp-rings",
            "mlp-long-horizon",
        ]
        assert [e.horizon for e in suite] == [2000, 2000, 2000, 2000, 10000]

    def test_meta_horizon_parameter(self):
        suite = generalization_suite(100)
        assert [e.horizon for e in suite] == [100, 100, 100, 100, 500]

    def test_long_horizon_shares_base_task(self):
        suite = generalization_suite()
        assert suite[4].task.fingerprint() == suite[0].task.fingerprint()
        assert suite[4].fingerprint() != suite[0].fingerprint()

    def test_task_diversity(self):
        suite = generalization_suite()
        prints = {e.task.fingerprint() for e in suite}
        assert len(prints) == 4  # base repeats at long horizon
        entry_prints = {e.fingerprint() for e in suite}
        assert len(entry_prints) == 5

    def test_variant_structure(self):
        by_name = {e.name: e for e in generalization_suite()}
        assert by_name["mlp-wide-deep"].task.layout == (2, 16, 16, 16, 2)
        assert by_name["mlp-tanh"].task.nonlinearity == "tanh"
        rings = by_name["mlp-rings"].task.dataset
        assert rings.kind == "rings"
        assert rings.noise == 0.15
        assert rings.seed == 11
        base = by_name["mlp-base"].task
        assert base.layout == (2, 8, 8, 2)
        assert base.dataset.kind == "blobs"
        assert base.dataset.n_points == 512
