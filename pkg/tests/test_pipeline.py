import dataclasses
import json

import numpy as np
import pytest

from conftest import small_config
from featforge import pipeline as P
from featforge.models import clone_student
from featforge.tensor import ContractError


@pytest.fixture(scope="module")
def prep():
    return P.prepare(small_config(), 0)


def param_copy(model):
    return {k: p.data.copy() for k, p in model.params.items()}


class TestSyntheticData:
    def spec(self, **kw):
        return P.SyntheticTaskSpec.from_config(dataclasses.replace(small_config().task, **kw))

    def test_deterministic(self):
        a = P.make_synthetic_data(self.spec(), "base", 7)
        b = P.make_synthetic_data(self.spec(), "base", 7)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_streams_differ(self):
        spec = self.spec()
        a = P.make_synthetic_data(spec, "base", 7, "train")
        b = P.make_synthetic_data(spec, "base", 7, "test")
        assert not np.array_equal(a.features, b.features)

    def test_seed_changes_task(self):
        assert self.spec(seed=1).mixtures[0].means.tolist() != self.spec(seed=2).mixtures[0].means.tolist()

    def test_disjoint_labels(self):
        spec = self.spec()
        base = P.make_synthetic_data(spec, "base", 3)
        novel = P.make_synthetic_data(spec, "novel", 3)
        assert set(base.labels) == {0, 1, 2} and set(novel.labels) == {3, 4}
        assert base.features.shape == (9, 6, 3, 3) and novel.targets.shape == (6, 4)

    def test_class_mean(self):
        spec = self.spec()
        mix = spec.mixtures[1]
        data = P.make_synthetic_data(spec, "base", 20000)
        emp = data.features[data.labels == 1].mean(axis=0)
        expected = np.tensordot(mix.weights, mix.means, axes=1)
        assert np.abs(emp - expected).max() < 0.1

    def test_bad_split(self):
        with pytest.raises(ValueError):
            self.spec().class_range("other")

    def test_batch_round_trip(self, tmp_path):
        data = P.make_synthetic_data(self.spec(), "novel", 4)
        P.save_batch(tmp_path / "b.npz", data)
        back = P.load_batch(tmp_path / "b.npz")
        assert all(np.array_equal(x, y) for x, y in zip(data, back))
        assert P.READ_LOG[-1] == str(tmp_path / "b.npz")


class TestBaseStage:
    def test_teacher_quality(self, prep):
        assert prep.base.heldout_acc >= 0.9

    def test_watchers_saw_final_epoch(self, prep):
        cfg = small_config()
        for site in prep.base.snapshot.sites:
            assert site.count.tolist() == [cfg.base.train_per_class] * cfg.task.num_base

    def test_fisher_nonnegative(self, prep):
        f = prep.base.fisher
        assert f.mode == "full" and all(np.all(v >= 0) for v in f.values.values())
        assert any(np.any(v > 0) for v in f.values.values())

    def test_accuracy_bar(self):
        cfg = small_config()
        cfg = cfg.replace(base=dataclasses.replace(cfg.base, epochs=1, accuracy_bar=1.01))
        with pytest.raises(P.BaseTrainingError):
            P.prepare(cfg, 0, train_gen=False)


class TestGeneratorStage:
    def test_curves(self, prep):
        n = small_config().gen_train.iterations
        assert all(len(v) == n for v in prep.gen.curves.values())
        assert prep.gen.curves["kl"][-1] < prep.gen.curves["kl"][0]

    def test_needs_frozen_teacher(self, prep):
        teacher = clone_student(prep.base.teacher, 0, np.random.default_rng(0))
        with pytest.raises(ContractError):
            P.train_generator(prep.base.snapshot, teacher, small_config(), np.random.default_rng(0))

    def test_teacher_untouched(self, prep):
        before = param_copy(prep.base.teacher)
        cfg = small_config()
        cfg = cfg.replace(gen_train=dataclasses.replace(cfg.gen_train, iterations=3))
        P.train_generator(prep.base.snapshot, prep.base.teacher, cfg, np.random.default_rng(5))
        P.run_variant(small_config(), prep, P.FULL, 0)
        after = param_copy(prep.base.teacher)
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_forge_batch(self, prep):
        g = prep.gen.generator
        rng = np.random.default_rng(0)
        x1, y1 = P.forge_batch(g, 4, rng)
        x2, _ = P.forge_batch(g, 4, rng)
        assert np.bincount(y1).tolist() == [4, 4, 4] and x1.shape == (12, 6, 3, 3)
        assert not np.array_equal(x1, x2)
        with pytest.raises(ContractError):
            P.forge_batch(g, 0, rng)

    def test_divergence_reported(self, prep):
        cfg = small_config()
        cfg = cfg.replace(gen_train=dataclasses.replace(
            cfg.gen_train, iterations=50, grad_clip=0.0, sgd=dataclasses.replace(cfg.gen_train.sgd, learning_rate=1e6)))
        with np.errstate(all="ignore"), pytest.raises(P.GeneratorDivergedError) as err:
            P.train_generator(prep.base.snapshot, prep.base.teacher, cfg, np.random.default_rng(0))
        assert err.value.last_good == err.value.iteration - 1


class TestFinetune:
    def finetune(self, prep, seed=0, **overrides):
        cfg = small_config()
        fc = dataclasses.replace(cfg.finetune, **overrides)
        student = clone_student(prep.base.teacher, cfg.task.num_novel, np.random.default_rng(seed))
        return P.novel_finetune(student, prep.base.teacher, prep.gen.generator, prep.novel_train,
                                prep.base.fisher, fc, np.random.default_rng(seed), cfg.task.shots)

    def test_forged_counts(self, prep):
        res = self.finetune(prep)
        assert res.forged_counts.tolist() == [25 * 5] * 3

    def test_forged_per_class_override(self, prep):
        res = self.finetune(prep, forged_per_class=2, iterations=3)
        assert res.forged_counts.tolist() == [6] * 3

    def test_no_generator_no_forging(self, prep):
        res = self.finetune(prep, use_generator=False, iterations=3)
        assert res.forged_counts.sum() == 0
        assert all(h["conf_term"] == 0.0 for h in res.history)

    def test_history_keys(self, prep):
        h = self.finetune(prep, iterations=2).history[0]
        assert {"total", "ewc", "cls_novel_term", "reg_novel_term", "cls_feat_term", "conf_term"} <= set(h)

    def test_strong_ewc_limits_drift(self, prep):
        base = param_copy(prep.base.teacher)

        def drift(lam):
            s = self.finetune(prep, lambda_ewc=lam, use_generator=False, fisher_mode="mean").student
            return sum(float(np.sum((s.params[k].data[:len(v)] - v) ** 2)) for k, v in base.items())

        assert drift(1e3) < drift(0.0)

    def test_combiner_hook(self, prep):
        calls = []

        def spy(a, b):
            calls.append((set(a), set(b)))
            return P.sum_combiner(a, b)

        cfg = small_config()
        fc = dataclasses.replace(cfg.finetune, iterations=2)
        student = clone_student(prep.base.teacher, 2, np.random.default_rng(0))
        P.novel_finetune(student, prep.base.teacher, prep.gen.generator, prep.novel_train, None, fc,
                         np.random.default_rng(0), 5, combiner=spy)
        assert len(calls) == 2 and calls[0][0] and calls[0][1]

    def test_sum_combiner(self):
        out = P.sum_combiner({"a": np.ones(2)}, {"a": np.ones(2), "b": np.zeros(1)})
        assert out["a"].tolist() == [2.0, 2.0] and "b" in out


class TestEvaluate:
    @pytest.mark.parametrize("b, n, expected", [(36.6, 19.1, 32.2), (34.6, 18.6, 30.6)])
    def test_weighting(self, b, n, expected):
        assert round(P.weighted_overall(60, 20, b, n), 1) == expected

    def test_equal_scores(self):
        assert P.weighted_overall(60, 20, 0.4, 0.4) == pytest.approx(0.4, abs=1e-15)

    def test_report(self, prep):
        r = P.run_variant(small_config(), prep, P.FULL, 0)
        assert r.check_overall() and set(r.per_class_acc) == set(range(5))
        assert set(r.reg_mae) == {"base", "novel"} and r.loss_curves["total"]

    def test_report_round_trip(self, prep):
        r = P.run_variant(small_config(), prep, P.PLAIN, 0)
        assert P.EvalReport.from_dict(json.loads(r.to_json())) == r

    def test_empty_split(self, prep):
        empty = prep.novel_test.subset(np.zeros(0, dtype=int))
        with pytest.raises(ContractError):
            P.evaluate(prep.base.teacher, prep.base_test, empty)

    def test_overlapping_splits(self, prep):
        with pytest.raises(ContractError):
            P.evaluate(prep.base.teacher, prep.base_test, prep.base_test)

    def test_curves_csv(self, prep, tmp_path):
        r = P.run_variant(small_config(), prep, P.PLAIN, 0)
        r.write_curves_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0].startswith("iteration,") and len(lines) == 26


def test_run_seed_deterministic():
    cfg = small_config()
    a = P.run_seed(cfg, 3, [P.PLAIN, P.FULL])
    b = P.run_seed(cfg, 3, [P.PLAIN, P.FULL])
    assert a == b


def test_dump_features(prep, tmp_path):
    x, y = P.forge_batch(prep.gen.generator, 2, np.random.default_rng(0))
    P.dump_features(tmp_path / "f.csv", prep.base.teacher, prep.novel_train, (x, y))
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["source", "label", "f0"]
    assert len(rows) == 1 + len(prep.novel_train) + 6
