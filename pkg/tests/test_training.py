import numpy as np
import pytest

from featfnn import fnn, training
from featfnn.dataset import FeaturedBatch, build_featured_batches
from featfnn.fnn import FnnArch
from featfnn.training import GdtConfig, SgdConfig

from conftest import GDT, SGD


def toy_batch(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.uniform(-1, 1, size=(n, 4))
    x[:, 0] = np.where(y == 1, 1, -1) * rng.uniform(0.2, 1.0, size=n)
    return FeaturedBatch(1, 1, 1, x, y, [f"t{t}" for t in range(n)])


def perceptron_separates(x, y, epochs=1000):
    """Independent separability oracle: the perceptron converges iff separable."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(xa.shape[1])
    for _ in range(epochs):
        mistakes = 0
        for xi, si in zip(xa, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


ARCH = FnnArch((4, 8, 2))


class TestSgd:
    def test_separable_reaches_full_accuracy(self):
        fb = toy_batch()
        assert perceptron_separates(fb.inputs, fb.labels)
        p, trace = training.sgd_train(ARCH, fb, SgdConfig(threshold=1.0, max_epochs=500, learning_rate=0.1))
        assert trace[-1] == 1.0
        assert fnn.accuracy(p, fb.inputs, fb.labels) == 1.0

    def test_zero_threshold_one_epoch(self):
        _, trace = training.sgd_train(ARCH, toy_batch(), SgdConfig(threshold=0.0))
        assert len(trace) == 1

    def test_deterministic(self):
        cfg = SgdConfig(threshold=1.0, max_epochs=30, seed=9)
        p1, t1 = training.sgd_train(ARCH, toy_batch(), cfg)
        p2, t2 = training.sgd_train(ARCH, toy_batch(), cfg)
        assert t1 == t2 and p1.equals(p2)

    def test_divergence(self):
        fb = toy_batch()
        fb.inputs = fb.inputs * 1e200
        with pytest.raises(training.DivergenceError):
            training.sgd_train(ARCH, fb, SgdConfig(learning_rate=1e3, threshold=1.0, max_epochs=5))

    def test_empty_batch(self):
        empty = FeaturedBatch(1, 1, 1, np.zeros((0, 4)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            training.sgd_train(ARCH, empty, SgdConfig())


class TestSgdContinue:
    def test_zero_epochs_identity(self):
        fb = toy_batch()
        p, _ = training.sgd_train(ARCH, fb, SgdConfig(threshold=0.0))
        assert training.sgd_continue(p, fb, SgdConfig(), epochs=0).equals(p)

    def test_never_worse(self):
        fb = toy_batch(seed=3)
        p, trace = training.sgd_train(ARCH, fb, SgdConfig(threshold=0.98, learning_rate=0.02))
        q = training.sgd_continue(p, fb, SgdConfig(max_epochs=20, learning_rate=0.02))
        assert fnn.accuracy(q, fb.inputs, fb.labels) >= trace[-1]

    def test_deterministic(self):
        fb = toy_batch()
        p, _ = training.sgd_train(ARCH, fb, SgdConfig(threshold=0.5))
        a = training.sgd_continue(p, fb, SgdConfig(max_epochs=5, seed=2))
        b = training.sgd_continue(p, fb, SgdConfig(max_epochs=5, seed=2))
        assert a.equals(b)


class TestGdt:
    def test_error_free_fixed_point(self):
        fb = toy_batch()
        p, _ = training.sgd_train(ARCH, fb, SgdConfig(threshold=1.0, max_epochs=500, learning_rate=0.1))
        res = training.gdt_tunnel(p, fb, GdtConfig())
        assert res.status == training.ERROR_FREE and res.blocks == 0
        assert res.params.equals(p) and res.trace == [0]

    def test_inconsistent_duplicate(self):
        fb = toy_batch()
        fb.inputs = np.vstack([fb.inputs, fb.inputs[4]])
        fb.labels = np.append(fb.labels, 1 - fb.labels[4])
        fb.ids = fb.ids + ["clone"]
        p = fnn.init_params(ARCH, 0)
        res = training.gdt_tunnel(p, fb, GdtConfig())
        assert res.status == training.INCONSISTENT and res.blocks == 0
        assert res.conflicts.pairs() == {frozenset({"t4", "clone"})}
        assert res.params.equals(p)

    def test_reaches_zero_from_partial_sgd(self, desk_dataset, desk_features):
        # 4 classes in one module, 200 samples; SGD stopped well short of 100%
        fb = build_featured_batches(desk_dataset, desk_features[:1], 1, 1)[(1, 1, 1)]
        arch = FnnArch((900, 256, 4))
        p, trace = training.sgd_train(arch, fb, SgdConfig(threshold=0.9, seed=1))
        start = int(np.sum(fnn.predict(p, fb.inputs) != fb.labels))
        res = training.gdt_tunnel(p, fb, GdtConfig())
        assert res.status == training.ERROR_FREE
        assert res.trace[0] == start and res.trace[-1] == 0
        assert all(a >= b for a, b in zip(res.trace, res.trace[1:]))
        assert fnn.accuracy(res.params, fb.inputs, fb.labels) == 1.0

    def test_stalls_within_budget(self):
        # random labels on a 1-unit bottleneck: unattainable for this tiny net
        rng = np.random.default_rng(0)
        fb = FeaturedBatch(1, 1, 1, rng.normal(size=(40, 3)), rng.integers(0, 3, 40), [str(t) for t in range(40)])
        arch = FnnArch((3, 1, 3))
        p = fnn.init_params(arch, 0)
        res = training.gdt_tunnel(p, fb, GdtConfig(max_blocks=60, patience=3, max_tunnels=2))
        assert res.status == training.STALLED
        assert res.errors > 0 and res.trace[-1] == res.errors
        assert all(a >= b for a, b in zip(res.trace, res.trace[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(fnn.DimensionError):
            training.gdt_tunnel(fnn.init_params(FnnArch((5, 3, 2)), 0), toy_batch(), GdtConfig())


class TestProtoModel:
    def test_degenerate_single_cell(self, desk_dataset, desk_features):
        pm = training.train_proto_model(desk_dataset, (16,), desk_features[:1], 1, 1, "S", SGD, GDT)
        assert list(pm.catalog) == [(1, 1, 1)]
        assert pm.arch.sizes == (900, 16, 4)

    def test_cell_count_and_isolation(self, desk_dataset, desk_features):
        pm = training.train_proto_model(desk_dataset, (16,), desk_features, 2, 2, "S", SGD, GDT, split_seed=0)
        assert len(pm.catalog) == 12 and not pm.partial
        assert pm.tag == "S_h1"
        # retraining one cell alone reproduces the same parameters
        batches = build_featured_batches(desk_dataset, desk_features, 2, 2, split_seed=0)
        again = training.train_cells({(2, 1, 2): batches[(2, 1, 2)]}, pm.arch, "S", SGD, GDT, seed=0)
        assert again[(2, 1, 2)].params.equals(pm.catalog[(2, 1, 2)])

    def test_mode_t_all_error_free(self, desk_model):
        assert {res.status for res in desk_model.cells.values()} == {training.ERROR_FREE}
        for res in desk_model.cells.values():
            assert res.accuracy == 1.0 and res.accuracy >= res.sgd_accuracy

    def test_mode_s_prime_never_worse(self, desk_dataset, desk_features):
        cfg = SgdConfig(max_epochs=40, threshold=0.6)
        s = training.train_proto_model(desk_dataset, (32,), desk_features[:1], 2, 1, "S", cfg, GDT)
        sp = training.train_proto_model(desk_dataset, (32,), desk_features[:1], 2, 1, "S'", cfg, GDT)
        for cell in s.cells:
            assert sp.cells[cell].accuracy >= s.cells[cell].accuracy

    def test_failed_cell_marks_partial(self, desk_dataset, desk_features):
        cfg = SgdConfig(learning_rate=1e300, max_epochs=3, threshold=1.0)
        pm = training.train_proto_model(desk_dataset, (8,), desk_features[:1], 2, 1, "S", cfg, GDT)
        failed = [c for c, res in pm.cells.items() if not res.completed]
        assert failed and pm.partial
        assert all(pm.cells[c].message for c in failed)

    def test_save_load_round_trip(self, desk_model, tmp_path):
        training.save_proto_model(desk_model, tmp_path)
        back = training.load_proto_model(tmp_path)
        assert back.mode == "T" and back.arch == desk_model.arch and back.k == 2
        for cell, params in desk_model.catalog.items():
            assert back.catalog[cell].equals(fnn.quantize_params(params, 4))
        assert back.cells[(1, 1, 1)].status == training.ERROR_FREE

    def test_parallel_matches_serial(self, desk_dataset, desk_features):
        batches = build_featured_batches(desk_dataset, desk_features[:2], 2, 1)
        arch = FnnArch((900, 8, 2))
        serial = training.train_cells(batches, arch, "S", SGD, GDT, seed=3, workers=1)
        parallel = training.train_cells(batches, arch, "S", SGD, GDT, seed=3, workers=2)
        assert list(serial) == list(parallel)
        assert all(serial[c].params.equals(parallel[c].params) for c in serial)
