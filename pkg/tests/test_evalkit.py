"""Unit and property tests for metrics, reports and experiment configs."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advcheck.attacks import AttackConfig, AttackResult
from advcheck.dataio import synth_dataset
from advcheck.evalkit import (AttackReport, EvalReport, ExperimentConfig,
                              asr, auc, detection_rate, export_distributions,
                              mann_whitney_p, perturbation_l2)
from advcheck.netcore import Dense, Flatten, Network


def fake_result(success):
    x = np.zeros((1, 2, 2), dtype=np.float32)
    return AttackResult(x_adv=x, success=success, perturbation_l2=0.0,
                        iterations_used=1)


class TestScalarMetrics:
    def test_asr_counting_oracle(self):
        flags = [True, False, True, True, False]
        results = [fake_result(f) for f in flags]
        assert asr(results) == sum(flags) / len(flags)

    def test_asr_empty_raises(self):
        with pytest.raises(ValueError):
            asr([])

    def test_detection_rate(self):
        assert detection_rate([1, 1, 0, 1]) == 0.75
        assert detection_rate([]) == 0.0
        assert detection_rate(np.ones(5, dtype=int)) == 1.0

    def test_perturbation_l2_oracle(self):
        x = np.zeros((1, 2, 2), dtype=np.float32)
        xa = x.copy()
        xa[0, 0, 0] = 3.0
        xa[0, 1, 1] = 4.0
        assert perturbation_l2(x, xa) == pytest.approx(5.0)
        assert perturbation_l2(x, x) == 0.0


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.1, 0.2, 0.3], [0.4, 0.5]) == 1.0
        assert auc([0.4, 0.5], [0.1, 0.2, 0.3]) == 0.0

    def test_all_ties_is_half(self):
        assert auc([0.5] * 4, [0.5] * 3) == 0.5

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            auc([], [0.5])

    @staticmethod
    def pairwise_oracle(sb, sm):
        """Independent O(n^2) reimplementation: P(m > b) with ties at 1/2."""
        total = 0.0
        for m in sm:
            for b in sb:
                if m > b:
                    total += 1.0
                elif m == b:
                    total += 0.5
        return total / (len(sb) * len(sm))

    @settings(max_examples=100, deadline=None)
    @given(sb=st.lists(st.integers(0, 9), min_size=1, max_size=8),
           sm=st.lists(st.integers(0, 9), min_size=1, max_size=8))
    def test_equals_pairwise_oracle_exactly(self, sb, sm):
        # integer-valued scores scaled to [0,1]: exact float comparisons
        b = [v / 10.0 for v in sb]
        m = [v / 10.0 for v in sm]
        assert auc(b, m) == self.pairwise_oracle(b, m)

    @settings(max_examples=50, deadline=None)
    @given(sb=st.lists(st.integers(0, 9), min_size=1, max_size=8),
           sm=st.lists(st.integers(0, 9), min_size=1, max_size=8))
    def test_complement_invariant(self, sb, sm):
        assert auc(sb, sm) + auc(sm, sb) == pytest.approx(1.0)


class TestMannWhitney:
    def test_extreme_separation_is_tiny(self):
        low = np.full(50, 1e-6)
        high = np.full(50, 1.0)
        assert mann_whitney_p(low, high) < 1e-10

    def test_identical_samples_not_significant(self):
        s = np.arange(20, dtype=float)
        assert mann_whitney_p(s, s) >= 0.4

    def test_wrong_direction_not_significant(self):
        assert mann_whitney_p(np.full(30, 1.0), np.full(30, 0.0)) > 0.99


class TestConfig:
    def test_json_round_trip(self, desk_config):
        d = desk_config.to_json_dict()
        back = ExperimentConfig.from_json_dict(json.loads(json.dumps(d)))
        assert back.to_json_dict() == d
        assert back.detector.structure == desk_config.detector.structure
        assert back.attacks == desk_config.attacks

    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        back = ExperimentConfig.from_json_dict(cfg.to_json_dict())
        assert back.to_json_dict() == cfg.to_json_dict()


class TestReports:
    def make_report(self):
        att = AttackReport(kind="fgsm", n_attempted=120, n_success=100,
                           asr=100 / 120, dr=0.97, auc=0.999,
                           mean_perturbation_l2=1.23,
                           detection_seconds_per_image=0.002)
        return EvalReport(seed=42, benign_accuracy=0.99, n_benign=200,
                          clean_test_accuracy=0.98, attacks=[att],
                          fp_detection_rate=0.5,
                          config=ExperimentConfig().to_json_dict())

    def test_json_round_trip_without_timing(self):
        rep = self.make_report()
        back = EvalReport.from_json(rep.to_json())
        assert back.seed == rep.seed
        assert back.attacks[0].dr == rep.attacks[0].dr
        # timing is measured, not part of the deterministic report
        assert back.attacks[0].detection_seconds_per_image is None
        assert "detection_seconds" not in rep.to_json()

    def test_timing_opt_in(self):
        rep = self.make_report()
        back = EvalReport.from_json(rep.to_json(include_timing=True))
        assert back.attacks[0].detection_seconds_per_image == 0.002

    def test_serialization_is_stable(self):
        rep = self.make_report()
        assert rep.to_json() == rep.to_json()
        assert rep.to_json().endswith("\n")


@pytest.fixture(scope="module")
def small_net():
    ds = synth_dataset("gaussian_blobs", n=40, classes=4, image_side=8, seed=0)
    net = Network.build([Flatten(), Dense(units=4)], (1, 8, 8), 4, seed=0)
    return net, ds


class TestExportDistributions:
    def test_header_only_when_empty(self, small_net, tmp_path):
        net, _ = small_net
        p = export_distributions(net, [], 0, tmp_path / "d.csv")
        assert p.read_text().strip() == "source,example_index,min,max,median"

    def test_row_counts_and_sources(self, small_net, tmp_path):
        net, ds = small_net
        p = export_distributions(
            net, [("benign", ds.images[:5]), ("fgsm", ds.images[5:8]),
                  ("empty", ds.images[:0])],
            0, tmp_path / "d.csv")
        lines = p.read_text().strip().splitlines()
        assert len(lines) == 1 + 5 + 3
        sources = [ln.split(",")[0] for ln in lines[1:]]
        assert sources == ["benign"] * 5 + ["fgsm"] * 3
        # stats columns parse back to floats (repr round-trip)
        mn, mx, md = lines[1].split(",")[2:]
        assert float(mn) <= float(md) <= float(mx)
