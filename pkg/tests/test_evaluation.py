import numpy as np
import pytest
from scipy import integrate, special, stats

from agd import rng as rng_mod
from agd.adapters import AdapterConfig, GuidedModel
from agd.diffusion import NoiseSchedule, SamplerKind, sample_batch
from agd.errors import InputError
from agd.evaluation import (
    EvalReport,
    endpoint_mse,
    energy_distance,
    guidance_sweep,
    knn_precision_recall,
    scheduler_transfer,
)
from agd.evaluation.reports import REPORT_COLUMNS


def gauss_points(n, mean=0.0, seed=0, dim=1):
    st = rng_mod.stream(seed, "ed-test", mean)
    return mean + st.standard_normal((n, dim))


def quadrature_energy_distance(mu_a, mu_b):
    """1-D oracle: each pairwise gap of two unit normals is N(dmu, 2)."""

    def mean_abs(dmu):
        s = np.sqrt(2.0)
        val, _ = integrate.quad(
            lambda d: abs(d) * np.exp(-((d - dmu) ** 2) / (2 * s * s))
            / (s * np.sqrt(2 * np.pi)),
            -np.inf,
            np.inf,
        )
        return val

    return 2.0 * mean_abs(mu_a - mu_b) - mean_abs(0.0) - mean_abs(0.0)


class TestEnergyDistance:
    def test_identical_sets_exact_zero(self):
        a = gauss_points(500, dim=2)
        assert energy_distance(a, a.copy()) == 0.0

    def test_symmetric_and_nonnegative(self):
        for seed in range(5):
            a = gauss_points(300, 0.0, seed, dim=2)
            b = gauss_points(400, 0.7, seed + 50, dim=2)
            ab, ba = energy_distance(a, b), energy_distance(b, a)
            assert ab == pytest.approx(ba, abs=1e-12)
            assert ab > 0.0

    def test_matched_distributions_read_near_zero(self):
        a = gauss_points(10_000, 0.0, 1)
        b = gauss_points(10_000, 0.0, 2)
        assert energy_distance(a, b) < 0.01

    def test_quadrature_oracle_separated_normals(self):
        oracle = quadrature_energy_distance(0.0, 3.0)
        # independent closed form for the same quantity
        closed = 4.0 / np.sqrt(np.pi) * (np.exp(-9.0 / 4.0) - 1.0) + 6.0 * special.erf(1.5)
        assert oracle == pytest.approx(closed, abs=1e-9)
        a = gauss_points(10_000, 0.0, 3)
        b = gauss_points(10_000, 3.0, 4)
        assert energy_distance(a, b) == pytest.approx(oracle, rel=0.05)

    def test_grows_with_separation(self):
        a = gauss_points(2000, 0.0, 5)
        near = energy_distance(a, gauss_points(2000, 0.5, 6))
        far = energy_distance(a, gauss_points(2000, 2.0, 7))
        assert far > near


class TestKnnPrecisionRecall:
    def test_identical_sets_are_perfect(self):
        a = gauss_points(200, dim=2)
        assert knn_precision_recall(a, a.copy()) == (1.0, 1.0)

    def test_distant_generation_scores_zero(self):
        real = gauss_points(300, 0.0, 8, dim=2)
        gen = gauss_points(300, 100.0, 9, dim=2)
        precision, recall = knn_precision_recall(gen, real)
        assert precision < 0.02 and recall < 0.02

    def test_mode_drop_shows_up_in_recall(self, ring_ds):
        st = rng_mod.stream(10, "mode-drop")
        real_ids = st.integers(0, ring_ds.num_classes, 4096)
        real = ring_ds.sample_batch(real_ids, st)
        gen_ids = st.integers(0, ring_ds.num_classes // 2, 2048)
        gen = ring_ds.sample_batch(gen_ids, st)
        precision, recall = knn_precision_recall(gen, real)
        assert precision > 0.6
        assert recall < precision - 0.15

    def test_k_bounds(self):
        a = gauss_points(10, dim=2)
        with pytest.raises(InputError):
            knn_precision_recall(a, a, k=0)
        with pytest.raises(InputError):
            knn_precision_recall(a, a, k=10)


class TestEndpointMse:
    def test_same_model_is_zero(self, tiny_base, small_schedule):
        val = endpoint_mse(tiny_base, tiny_base, small_schedule, 8, num_seeds=32)
        assert val == 0.0

    def test_zero_init_student_matches_base(self, tiny_base, small_schedule):
        student = GuidedModel(
            tiny_base, AdapterConfig(embed_dim=8, init="zero"), seed=4
        ).bind(4.0)
        assert endpoint_mse(student, tiny_base, small_schedule, 8, num_seeds=32) == 0.0

    def test_deterministic(self, tiny_base, small_schedule):
        student = GuidedModel(
            tiny_base, AdapterConfig(embed_dim=8), seed=4
        ).bind(3.0)
        a = endpoint_mse(student, tiny_base, small_schedule, 8, num_seeds=24, seed=5)
        b = endpoint_mse(student, tiny_base, small_schedule, 8, num_seeds=24, seed=5)
        assert a == b


class TestEvalReport:
    def row(self, **over):
        row = {
            "omega": 0.1 + 0.2,
            "method": "agd",
            "endpoint_mse_vs_teacher": 1.0 / 3.0,
            "energy_distance_to_data": 1e-17,
            "knn_precision": 0.9871234567,
            "knn_recall": np.nextafter(0.5, 1.0),
            "nfe_total": 131072,
            "trainable_param_ratio": 0.0321,
        }
        row.update(over)
        return row

    def test_csv_round_trip_is_lossless(self):
        report = EvalReport(
            [self.row(), self.row(method="cfg_teacher", omega=4.0)],
            metadata={"seed": 7, "config": "abc123"},
        )
        again = EvalReport.from_csv(report.to_csv())
        assert again == report
        assert again.rows[0]["omega"] == 0.1 + 0.2

    def test_file_round_trip(self, tmp_path):
        report = EvalReport([self.row()], metadata={"n": 3})
        path = report.save(tmp_path / "sweep.csv")
        assert EvalReport.load(path) == report

    def test_missing_column_rejected(self):
        with pytest.raises(InputError):
            EvalReport().add_row(omega=1.0, method="agd")

    def test_foreign_header_rejected(self):
        with pytest.raises(InputError):
            EvalReport.from_csv("# \na,b,c\n1,2,3\n")

    def test_summary_uses_six_significant_digits(self):
        report = EvalReport([self.row(endpoint_mse_vs_teacher=0.123456789)])
        text = report.summary_text()
        assert "0.123457" in text
        assert all(c in text for c in REPORT_COLUMNS)


class TestGuidanceSweep:
    def test_structure_and_nfe_ratio(self, tiny_base, small_schedule, ring_ds):
        student = GuidedModel(tiny_base, AdapterConfig(embed_dim=8, init="zero"), seed=1)
        report = guidance_sweep(
            tiny_base,
            {"agd": (student.bind, 0.03)},
            ring_ds,
            small_schedule,
            omegas=[1.0, 4.0],
            num_gen=128,
            num_real=256,
            num_pair_seeds=16,
        )
        assert len(report.rows) == 4
        assert [set(r) == set(REPORT_COLUMNS) for r in report.rows]
        by_method = {(r["method"], r["omega"]): r for r in report.rows}
        for omega in (1.0, 4.0):
            teacher = by_method[("cfg_teacher", omega)]
            agd = by_method[("agd", omega)]
            assert teacher["endpoint_mse_vs_teacher"] == 0.0
            assert teacher["nfe_total"] == 2 * agd["nfe_total"]
            assert agd["trainable_param_ratio"] == 0.03

    def test_omega_one_is_the_identity_region(self, tiny_base, small_schedule, ring_ds):
        # at omega 1 the teacher collapses to the conditional model, which is
        # exactly what a zero stack computes, so the gap vanishes
        student = GuidedModel(tiny_base, AdapterConfig(embed_dim=8, init="zero"), seed=1)
        report = guidance_sweep(
            tiny_base, {"agd": (student.bind, 0.03)}, ring_ds, small_schedule,
            omegas=[1.0], num_gen=64, num_real=128, num_pair_seeds=8,
        )
        agd = [r for r in report.rows if r["method"] == "agd"][0]
        assert agd["endpoint_mse_vs_teacher"] == 0.0

    def test_deterministic(self, tiny_base, small_schedule, ring_ds):
        student = GuidedModel(tiny_base, AdapterConfig(embed_dim=8), seed=2)
        kw = dict(num_gen=64, num_real=128, num_pair_seeds=8, seed=9)
        a = guidance_sweep(tiny_base, {"agd": (student.bind, 0.03)}, ring_ds,
                           small_schedule, [2.0], **kw)
        b = guidance_sweep(tiny_base, {"agd": (student.bind, 0.03)}, ring_ds,
                           small_schedule, [2.0], **kw)
        assert a.rows == b.rows


class TestSchedulerTransfer:
    def test_fields_and_nfe_ratio(self, tiny_base, small_schedule, ring_ds):
        student = GuidedModel(
            tiny_base, AdapterConfig(embed_dim=8, init="zero"), seed=3
        ).bind(2.0)
        out = scheduler_transfer(student, tiny_base, ring_ds, small_schedule,
                                 omega=2.0, num_gen=128)
        assert out["teacher_nfe"] == 2 * out["student_nfe"]
        assert np.isfinite(out["student_energy_distance"])
        assert np.isfinite(out["teacher_energy_distance"])
        assert out["ratio"] == pytest.approx(
            out["student_energy_distance"] / out["teacher_energy_distance"]
        )


class TestSamplerQualityScaling:
    def test_more_steps_lands_closer_to_data(self, oracle_teacher, ring_ds):
        ids = rng_mod.stream(11, "steps-ids").integers(0, 8, 1024)
        real = ring_ds.sample_batch(
            rng_mod.stream(12, "steps-real").integers(0, 8, 2048),
            rng_mod.stream(13, "steps-real-draw"),
        )
        gaps = []
        for n in (8, 64):
            x = sample_batch(oracle_teacher, NoiseSchedule(num_steps=n), ids, seed=14)
            gaps.append(energy_distance(x, real))
        assert gaps[1] < gaps[0]
