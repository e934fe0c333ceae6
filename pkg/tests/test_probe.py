import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ekd import tensor as T
from ekd.errors import ConfigError, ContractError, DimensionError
from ekd.models import EncoderConfig, build_student
from ekd.probe import (
    CONDITIONS,
    ConcatenatedStudents,
    MetricsReport,
    ProbeConfig,
    evaluate,
    fit_probe,
    train_probe,
    weighted_sum_features,
)
from ekd.synth import SplitConfig, labels_of, make_split, spectral_statistics
from ekd.tensor import Tensor

FAST = ProbeConfig(steps=300, lr=0.1)


class Source:
    """Feature source backed by a fixed function of the waveforms."""

    def __init__(self, fn, params=0):
        self.fn = fn
        self.params = params
        self.calls = 0

    def hidden_states(self, waves):
        self.calls += 1
        return [Tensor(f) for f in self.fn(np.asarray(waves))]

    def backbone_hash(self):
        return "stub"

    def backbone_params(self):
        return self.params


def zeros_source():
    return Source(lambda w: [np.zeros((len(w), 3, 4))] * 2)


def spectral_source():
    return Source(lambda w: [spectral_statistics(w)[:, None, :]])


def oracle_source(split):
    table = {}
    for samples in [split.train] + list(split.conditions().values()):
        for s in samples:
            table[s.samples.tobytes()] = s.label
    n_classes = split.config.n_classes
    return Source(lambda w: [np.eye(n_classes)[[table[x.tobytes()] for x in w]][:, None, :]])


@pytest.fixture(scope="module")
def split():
    return make_split(SplitConfig(n_train=64, n_eval=48, length=128))


class TestWeightedSum:
    def states(self, n=3, seed=0):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.normal(size=(2, 5, 4))) for _ in range(n)]

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_one_hot_selects_layer(self, k):
        states = self.states()
        logits = np.full(3, -30.0)
        logits[k] = 30.0
        out = weighted_sum_features(states, Tensor(logits))
        np.testing.assert_allclose(out.data, states[k].data, atol=1e-12)

    def test_equal_logits_give_mean(self):
        states = self.states()
        out = weighted_sum_features(states, Tensor(np.full(3, 0.7)))
        np.testing.assert_allclose(out.data, np.mean([s.data for s in states], axis=0), atol=1e-14)

    def test_no_gradient_into_states(self):
        states = [Tensor(s.data, requires_grad=True) for s in self.states()]
        logits = Tensor(np.array([0.1, -0.2, 0.3]), requires_grad=True)
        T.backward(T.tsum(weighted_sum_features(states, logits)))
        assert all(s.grad is None for s in states)
        assert logits.grad is not None and np.abs(logits.grad).sum() > 0

    def test_shape_mismatch(self):
        states = self.states()
        states[1] = Tensor(np.zeros((2, 5, 3)))
        with pytest.raises(DimensionError):
            weighted_sum_features(states, Tensor(np.zeros(3)))

    def test_logit_count_mismatch(self):
        with pytest.raises(DimensionError):
            weighted_sum_features(self.states(), Tensor(np.zeros(4)))

    @settings(max_examples=100)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
    def test_weights_sum_to_one(self, logits):
        with T.no_grad():
            w = T.softmax(Tensor(np.array(logits))).data
        assert abs(w.sum() - 1.0) <= 1e-12 and (w >= 0).all()


class TestProbeTraining:
    def test_zero_features_give_chance(self, split):
        source = zeros_source()
        probe = train_probe(source, split.train, FAST)
        report = evaluate(source, probe, split)
        assert abs(report.metrics["clean"] - 0.25) <= 0.1

    def test_single_class_rejected(self, split):
        one = [s for s in split.train if s.label == 0]
        with pytest.raises(ConfigError):
            train_probe(zeros_source(), one, FAST)

    def test_empty_train_set(self):
        with pytest.raises(ConfigError):
            train_probe(zeros_source(), [], FAST)

    def test_backbone_unchanged(self, split):
        student = build_student(EncoderConfig(d_model=8, n_layers=2, n_heads=2), "single", 8, 2)
        before = student.backbone_hash()
        train_probe(student, split.train[:16], ProbeConfig(steps=20))
        assert student.backbone_hash() == before

    def test_backbone_mutation_detected(self, split):
        class Drifting(Source):
            def backbone_hash(self):
                return str(self.calls)

        with pytest.raises(ContractError):
            train_probe(Drifting(lambda w: [np.zeros((len(w), 1, 2))]), split.train, FAST)

    def test_layer_weights_normalised(self, split):
        probe = train_probe(zeros_source(), split.train, FAST)
        w = probe.layer_weights()
        assert w.shape == (2,) and abs(w.sum() - 1.0) <= 1e-12

    def test_probe_prefers_informative_layer(self):
        rng = np.random.default_rng(0)
        labels = np.arange(200) % 4
        pooled = np.stack([rng.normal(size=(200, 4)), 3.0 * np.eye(4)[labels]], axis=1)
        probe = fit_probe(pooled, labels, 4, ProbeConfig(steps=300, lr=0.05))
        assert probe.layer_weights()[1] > 0.5
        assert np.mean(probe.predict(pooled) == labels) == 1.0

    def test_deterministic(self, split):
        a = train_probe(spectral_source(), split.train, FAST)
        b = train_probe(spectral_source(), split.train, FAST)
        assert a.weight.data.tobytes() == b.weight.data.tobytes()


class TestEvaluation:
    def test_perfect_source(self, split):
        source = oracle_source(split)
        report = evaluate(source, train_probe(source, split.train, FAST), split)
        assert report.metrics == {c: 1.0 for c in CONDITIONS}

    def test_label_shuffle_gives_chance(self):
        # one permutation of a finite set keeps some label agreement, so average a few
        sp = make_split(SplitConfig(n_train=256, n_eval=128))
        source = spectral_source()
        accs = []
        for seed in range(4):
            labels = np.random.default_rng(seed).permutation(labels_of(sp.train))
            shuffled = [type(s)(s.samples, int(l), s.generator_seed, s.index) for s, l in zip(sp.train, labels)]
            accs.append(evaluate(source, train_probe(source, shuffled, FAST), sp).metrics["clean"])
        assert abs(np.mean(accs) - 0.25) <= 0.1

    def test_conditions_and_counts(self, split):
        source = zeros_source()
        report = evaluate(source, train_probe(source, split.train, FAST), split)
        assert sorted(report.metrics) == sorted(CONDITIONS)
        assert report.counts == {c: 48 for c in CONDITIONS}

    def test_empty_eval_set(self, split):
        source = zeros_source()
        probe = train_probe(source, split.train, FAST)
        empty = type(split)(split.train, [], [], [], split.seen_families, split.unseen_families)
        with pytest.raises(ConfigError):
            evaluate(source, probe, empty)

    def test_monotone_degradation(self):
        source = spectral_source()
        acc = {}
        for snr in (0.0, 20.0):
            sp = make_split(SplitConfig(n_train=128, n_eval=96, seen_families=("gaussian",), eval_snr_db=snr))
            acc[snr] = evaluate(source, train_probe(source, sp.train, FAST), sp).metrics["seen_noise"]
        assert acc[0.0] < acc[20.0]

    def test_report_round_trip(self, split):
        source = zeros_source()
        report = evaluate(source, train_probe(source, split.train, FAST), split, mode="avg",
                          seeds={"probe": 0}, config={"a": 1})
        back = MetricsReport.from_dict(json.loads(report.to_json()))
        assert back.to_json() == report.to_json()


class TestHeadDiscard:
    def test_heads_do_not_affect_metrics(self, split):
        cfg = EncoderConfig(d_model=8, n_layers=2, n_heads=2)
        student = build_student(cfg, "multi_pred", 8, 2, n_teachers=2, seed=3)
        small = type(split)(split.train[:24], split.eval_clean[:12], split.eval_seen_noise[:12],
                            split.eval_unseen_noise[:12], split.seen_families, split.unseen_families)
        config = ProbeConfig(steps=50)
        with_heads = evaluate(student, train_probe(student, small.train, config), small)
        headless = student.without_heads()
        without = evaluate(headless, train_probe(headless, small.train, config), small)
        assert with_heads.metrics == without.metrics
        assert with_heads.params == without.params

    def test_concatenated_students(self):
        cfg = EncoderConfig(d_model=8, n_layers=2, n_heads=2)
        members = [build_student(cfg, "single", 8, 2, seed=s) for s in (0, 1)]
        joint = ConcatenatedStudents(members)
        waves = np.random.default_rng(0).normal(size=(2, 64))
        with T.no_grad():
            states = joint.hidden_states(waves)
        assert len(states) == 3 and states[-1].shape[-1] == 16
        assert joint.backbone_params() == 2 * members[0].backbone_params()

    def test_concatenated_requires_members(self):
        with pytest.raises(ConfigError):
            ConcatenatedStudents([])
