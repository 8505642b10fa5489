import json

import numpy as np
import pytest
from scipy import stats

from casperlab.data import DatasetConfig, Task, TaskStream, generate
from casperlab.learner import ModelConfig, ModelParams, init_params
from casperlab.replay import (
    AnalysisConfig,
    Method,
    ReplayBuffer,
    TrainConfig,
    _casper_grads,
    evaluate,
    reservoir_update,
    run_experiment,
    train_task,
)
from casperlab.errors import InvalidParameterError
from casperlab.spectral import CasperConfig


def reservoir_counts(m, n, trials, seed):
    rng = np.random.default_rng(seed)
    counts = np.zeros(n, dtype=np.int64)
    for _ in range(trials):
        buf = ReplayBuffer(m)
        for i in range(n):
            reservoir_update(buf, (np.array([float(i)]), i), rng)
        counts[buf.stored()[1]] += 1
    return counts


class TestReservoir:
    def test_fill_phase(self):
        buf = ReplayBuffer(5)
        rng = np.random.default_rng(0)
        for i in range(5):
            reservoir_update(buf, (np.array([i, -i], float), i), rng)
        x, y = buf.stored()
        assert y.tolist() == [0, 1, 2, 3, 4]
        np.testing.assert_array_equal(x[:, 0], np.arange(5))
        assert buf.seen_count == 5

    def test_single_slot_trace(self):
        for seed in range(20):
            # the draw for the second offer is the generator's first integer in [0, 2)
            keep_second = np.random.default_rng(seed).integers(0, 2) < 1
            buf = ReplayBuffer(1)
            rng = np.random.default_rng(seed)
            reservoir_update(buf, (np.array([1.0]), 1), rng)
            reservoir_update(buf, (np.array([2.0]), 2), rng)
            assert buf.stored()[1].tolist() == ([2] if keep_second else [1])

    def test_size_bound_and_verbatim(self):
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(7)
        items = rng.normal(size=(50, 3))
        for i, x in enumerate(items):
            reservoir_update(buf, (x, i), rng)
            assert len(buf) <= 7
        x, y = buf.stored()
        np.testing.assert_array_equal(x, items[y])

    def test_uniform_inclusion(self):
        m, n, trials = 10, 200, 2000
        counts = reservoir_counts(m, n, trials, seed=3)
        expected = trials * m / n
        _, p = stats.chisquare(counts, np.full(n, expected))
        assert p > 0.01


def two_blob_tasks(seed=0, per=40):
    cfg = DatasetConfig(n_classes=4, n_tasks=2, classes_per_task=2, input_dim=6,
                        train_per_class=per, test_per_class=per, separation=6.0, noise=0.5)
    return generate(cfg, seed=seed)


def small_cfg(**kw):
    base = dict(lr=0.1, batch_size=16, epochs=5, buffer_size=40, hidden=(16,),
                casper=CasperConfig(rho=0.5, p=2, t=4, mc_samples=1, k=3), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainTask:
    def test_loss_decomposition(self):
        train, _ = two_blob_tasks()
        cfg = small_cfg(method=Method.ER_CASPER)
        params = init_params(ModelConfig(6, 4, cfg.hidden), np.random.default_rng(0))
        buf = ReplayBuffer(cfg.buffer_size)
        params, buf, logs = train_task(params, train[0], buf, cfg, 0)
        _, _, logs2 = train_task(params, train[1], buf, cfg, 1)
        for s in logs + logs2:
            assert s.total == s.stream + s.buffer + cfg.casper.rho * s.casper
        assert any(s.casper != 0 for s in logs2)

    def test_empty_buffer_first_step_is_stream_only(self):
        train, _ = two_blob_tasks()
        cfg = small_cfg(method=Method.ER_CASPER)
        params = init_params(ModelConfig(6, 4, cfg.hidden), np.random.default_rng(0))
        _, _, logs = train_task(params, train[0], ReplayBuffer(cfg.buffer_size), cfg, 0)
        first = logs[0]
        assert first.buffer == 0 and first.casper == 0 and first.total == first.stream

    def test_each_item_offered_once(self):
        train, _ = two_blob_tasks()
        cfg = small_cfg(method=Method.ER)
        params = init_params(ModelConfig(6, 4, cfg.hidden), np.random.default_rng(0))
        _, buf, _ = train_task(params, train[0], ReplayBuffer(500), cfg, 0)
        assert buf.seen_count == len(train[0]) == len(buf)

    def test_rho_zero_matches_er(self):
        train, test = two_blob_tasks()
        a = run_experiment(train, test, small_cfg(method=Method.ER))
        b = run_experiment(train, test, small_cfg(method=Method.ER_CASPER,
                                                  casper=CasperConfig(rho=0.0, p=2, t=4, k=3)))
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())
        assert a.metrics == b.metrics


class TestGradClip:
    def feats(self):
        rng = np.random.default_rng(3)
        f = np.abs(rng.normal(size=(16, 5)))
        f[0] = 0.0  # a dead-ReLU row sits on the edge-weight floor
        return f, np.repeat([0, 1], 8)

    def test_rows_capped_direction_kept(self):
        f, y = self.feats()
        cfg = dict(p=2, t=4, mc_samples=2, k=3)
        _, raw = _casper_grads(f, y, CasperConfig(grad_clip=None, **cfg), np.random.default_rng(0))
        _, cut = _casper_grads(f, y, CasperConfig(grad_clip=1e-4, **cfg), np.random.default_rng(0))
        norms = np.linalg.norm(cut, axis=1)
        assert norms.max() <= 1e-4 * (1 + 1e-12)
        moved = np.linalg.norm(raw, axis=1) > 0
        cos = np.sum(raw[moved] * cut[moved], axis=1) / (np.linalg.norm(raw[moved], axis=1) * norms[moved])
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)

    def test_loose_clip_is_identity(self):
        f, y = self.feats()
        cfg = dict(p=2, t=4, mc_samples=2, k=3)
        la, a = _casper_grads(f, y, CasperConfig(grad_clip=None, **cfg), np.random.default_rng(0))
        lb, b = _casper_grads(f, y, CasperConfig(grad_clip=1e9, **cfg), np.random.default_rng(0))
        assert la == lb
        np.testing.assert_array_equal(a, b)

    def test_bad_clip(self):
        with pytest.raises(InvalidParameterError):
            CasperConfig(grad_clip=0.0)


class TestEvaluate:
    def test_perfect_model(self):
        # identity extractor with a head that reads off the one-hot input
        x = np.eye(4)
        stream = TaskStream([Task(x[:2], np.array([0, 1])), Task(x[2:], np.array([2, 3]))])
        params = ModelParams(ModelConfig(4, 4, ()), [np.eye(4)], [np.zeros(4)])
        assert evaluate(params, stream, 1) == [100.0, 100.0]

    def test_random_head_near_chance(self):
        train, test = generate(DatasetConfig(n_classes=10, input_dim=8, test_per_class=200), seed=0)
        accs = []
        for s in range(20):
            params = init_params(ModelConfig(8, 10, (16,)), np.random.default_rng(s))
            accs.append(np.mean(evaluate(params, test, 4)))
        assert abs(np.mean(accs) - 10) < 5


class TestExperiment:
    def test_finetune_forgets(self):
        cfg = DatasetConfig(n_classes=4, n_tasks=2, classes_per_task=2, input_dim=16,
                            train_per_class=40, test_per_class=40, separation=4.0, noise=1.0)
        drops, kept = [], []
        for seed in range(3):
            train, test = generate(cfg, seed=seed)
            common = dict(epochs=20, hidden=(32, 16), lr=0.3, seed=seed)
            ft = run_experiment(train, test, small_cfg(method=Method.FINETUNE, **common))
            er = run_experiment(train, test, small_cfg(method=Method.ER, **common))
            drops.append(ft.accuracy[0, 0] - ft.accuracy[0, 1])
            kept.append(er.accuracy[0, 1])
        assert np.mean(drops) >= 60
        assert np.mean(kept) >= 85

    def test_large_buffer_near_joint(self):
        train, test = two_blob_tasks()
        er = run_experiment(train, test, small_cfg(method=Method.ER, buffer_size=1000, epochs=10))
        joint = run_experiment(train, test, small_cfg(method=Method.JOINT, epochs=10))
        assert abs(er.metrics["final_average_accuracy"] - joint.metrics["final_average_accuracy"]) <= 5

    def test_joint_forgetting_undefined(self):
        train, test = two_blob_tasks()
        rep = run_experiment(train, test, small_cfg(method=Method.JOINT))
        assert rep.accuracy.n_tasks == 1
        assert rep.metrics["adjusted_forgetting"] is None
        assert rep.metrics["final_average_accuracy"] == rep.accuracy[0, 0]

    def test_single_task_stream(self):
        train, test = two_blob_tasks()
        one = TaskStream([train[0]])
        rep = run_experiment(one, TaskStream([test[0]]), small_cfg(method=Method.ER))
        assert rep.metrics["adjusted_forgetting"] is None
        assert len(rep.metrics["sigma_per_task"]) == 1

    def test_deterministic_report_files(self, tmp_path):
        train, test = two_blob_tasks()
        cfg = small_cfg(method=Method.ER_CASPER)
        run_experiment(train, test, cfg, AnalysisConfig(snapshot_per_class=5), out_dir=tmp_path / "a")
        run_experiment(train, test, cfg, AnalysisConfig(snapshot_per_class=5), out_dir=tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert {str(f) for f in files} >= {
            "config.json", "accuracy_matrix.csv", "metrics.json", "loss_log.csv",
            "buffer_snapshots/task_0.csv", "buffer_snapshots/task_1.csv", "test_snapshots/task_1.csv",
        }
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        conf = json.loads((tmp_path / "a" / "config.json").read_text())
        assert conf["train"]["seed"] == 0

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(method="SGD")
