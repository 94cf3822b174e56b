"""Store tests: binary round-trip, checksum integrity, generation semantics,
bit-exact target audits, minibatch uniformity, divergence curves."""

import numpy as np
import pytest
from scipy import stats

from agd import rng as rng_mod
from agd import trajectories as tr
from agd.diffusion.denoiser import cfg_combine
from agd.diffusion.sampling import CfgTeacher, OracleDenoiser, SamplerKind, sample_batch
from agd.diffusion.schedule import NoiseSchedule
from agd.errors import CompatibilityError, PreconditionError


@pytest.fixture(scope="module")
def guided_store(oracle_teacher, small_schedule):
    return tr.generate_guided_trajectories(
        oracle_teacher, small_schedule, count=64, omega_range=(1.0, 6.0), seed=42
    )


@pytest.fixture(scope="module")
def pairs_store(oracle_teacher, ring_ds, small_schedule):
    return tr.generate_diffusion_pairs(
        oracle_teacher, ring_ds, small_schedule, count=64, omega_range=(1.0, 6.0), seed=42
    )


class TestFormat:
    def test_record_width(self):
        assert tr.RECORD_DTYPE.itemsize == 72

    def test_round_trip_bit_exact(self, guided_store, tmp_path):
        p = tmp_path / "s.agdt"
        guided_store.save(p)
        back = tr.TrajectoryStore.load(p)
        assert back.records.tobytes() == guided_store.records.tobytes()
        assert back.schedule_hash == guided_store.schedule_hash
        assert back.teacher_hash == guided_store.teacher_hash
        assert back.num_trajectories == guided_store.num_trajectories

    def test_corruption_detected(self, guided_store, tmp_path):
        p = tmp_path / "s.agdt"
        guided_store.save(p)
        raw = bytearray(p.read_bytes())
        raw[100] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CompatibilityError, match="checksum"):
            tr.TrajectoryStore.load(p)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.agdt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CompatibilityError, match="not a trajectory store"):
            tr.TrajectoryStore.load(p)

    def test_truncation_rejected(self, guided_store, tmp_path):
        p = tmp_path / "s.agdt"
        guided_store.save(p)
        p.write_bytes(p.read_bytes()[:30])
        with pytest.raises(CompatibilityError):
            tr.TrajectoryStore.load(p)

    def test_schedule_guard(self, guided_store, small_schedule):
        guided_store.check_schedule(small_schedule)
        with pytest.raises(CompatibilityError):
            guided_store.check_schedule(NoiseSchedule(num_steps=8))

    def test_teacher_guard(self, guided_store, oracle_teacher, ring_ds):
        guided_store.check_teacher(oracle_teacher)
        other = OracleDenoiser(
            __import__("agd.diffusion.data", fromlist=["d"]).single_gaussian_dataset()
        )
        with pytest.raises(CompatibilityError):
            guided_store.check_teacher(other)


class TestGuidedGeneration:
    def test_counts_and_grid_sigmas(self, guided_store, small_schedule):
        assert len(guided_store) == 64 * 16
        assert guided_store.num_trajectories == 64
        steps = guided_store.records["step_index"]
        assert np.array_equal(
            guided_store.records["sigma"], small_schedule.sigmas[steps]
        )

    def test_conditions_constant_per_trajectory(self, guided_store):
        for tid in guided_store.trajectory_ids()[:10]:
            rows = guided_store.records[guided_store.records["trajectory_id"] == tid]
            assert len(set(rows["omega"])) == 1
            assert len(set(rows["class_id"])) == 1

    def test_omega_range_respected(self, guided_store):
        lo, hi = guided_store.omega_range()
        assert lo >= 1.0 and hi <= 6.0

    def test_requires_frozen_teacher(self, ring_ds, small_schedule):
        from agd.diffusion.denoiser import BaseTrainConfig, Denoiser

        live = Denoiser(8, BaseTrainConfig(hidden=(8,), steps=1, batch=2), 0)
        with pytest.raises(PreconditionError, match="frozen"):
            tr.generate_guided_trajectories(live, small_schedule, 4, (1.0, 2.0))

    def test_nfe_is_two_per_step_per_trajectory(self, oracle_teacher, small_schedule):
        oracle_teacher.nfe = 0
        tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, count=10, omega_range=(2.0, 4.0), seed=3
        )
        assert oracle_teacher.nfe == 2 * 16 * 10

    def test_pinned_class_ids_respected(self, oracle_teacher, small_schedule):
        ids = np.arange(24) % 8
        store = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, 24, (1.0, 3.0), seed=5, class_ids=ids
        )
        per_traj = {
            tid: store.records[store.records["trajectory_id"] == tid]["class_id"][0]
            for tid in store.trajectory_ids()
        }
        assert [per_traj[t] for t in sorted(per_traj)] == list(ids)

    def test_pinned_class_ids_keep_omega_draws(self, oracle_teacher, small_schedule):
        # pinning classes changes labels only, not the omega assignment
        a = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, 12, (1.0, 6.0), seed=9
        )
        b = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, 12, (1.0, 6.0), seed=9,
            class_ids=np.zeros(12, dtype=np.int64),
        )
        omega_of = lambda s: [
            s.records[s.records["trajectory_id"] == t]["omega"][0]
            for t in sorted(s.trajectory_ids())
        ]
        assert omega_of(a) == omega_of(b)

    def test_bad_class_ids_rejected(self, oracle_teacher, small_schedule):
        from agd.errors import DimensionError, InputError

        with pytest.raises(DimensionError, match="shape"):
            tr.generate_guided_trajectories(
                oracle_teacher, small_schedule, 6, (1.0, 2.0),
                class_ids=np.zeros(4, dtype=np.int64),
            )
        with pytest.raises(InputError, match="range"):
            tr.generate_guided_trajectories(
                oracle_teacher, small_schedule, 6, (1.0, 2.0),
                class_ids=np.full(6, 99, dtype=np.int64),
            )

    def test_omega_one_targets_are_conditional(self, oracle_teacher, small_schedule):
        store = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, count=8, omega_range=(1.0, 1.0), seed=5
        )
        # recompute the conditional branch alone in the same batch layout
        for step in [0, 7, 15]:
            rows = store.step_slice(step)
            sig = float(rows["sigma"][0])
            cond = oracle_teacher.eps(rows["x_t"], sig, rows["class_id"])
            assert np.array_equal(cond, rows["eps_target"])

    def test_matches_plain_guided_sampler_trajectory(self, oracle_teacher, small_schedule):
        """A store generated at fixed omega must contain exactly the states the
        batched guided sampler visits from the same noise."""
        store = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, count=6, omega_range=(3.0, 3.0), seed=11
        )
        noise = rng_mod.stream(11, "traj-noise", 0)
        x0 = small_schedule.sigmas[0] * noise.standard_normal((6, 2))
        classes = store.records["class_id"][:: small_schedule.num_steps].astype(np.int64)
        teacher = CfgTeacher(oracle_teacher, 3.0)
        _, xs, es = sample_batch(
            teacher, small_schedule, classes, seed=999, x_init=x0, record=True
        )
        for i in range(16):
            rows = store.step_slice(i)
            order = np.argsort(rows["trajectory_id"])
            assert np.array_equal(rows["x_t"][order], xs[i])
            assert np.array_equal(rows["eps_target"][order], es[i])

    def test_audit_replay_bit_exact(self, oracle_teacher, small_schedule, guided_store):
        dev = tr.audit_targets(
            guided_store,
            lambda: tr.generate_guided_trajectories(
                oracle_teacher, small_schedule, count=64, omega_range=(1.0, 6.0), seed=42
            ),
            sample=100,
        )
        assert dev == 0.0

    def test_diverged_rows_dropped(self, small_schedule):
        class FlakyTeacher:
            """Blows up two specific rows at one step, stays finite otherwise."""

            num_classes = 8
            frozen = True
            nfe = 0

            def params_hash(self):
                return 1

            def null_ids(self, n):
                return np.full(n, 8, dtype=np.int64)

            def eps(self, x, sigma, ids):
                x = np.asarray(x)
                self.nfe += x.shape[0]
                out = 0.1 * np.ones_like(x)
                if abs(sigma - small_schedule.sigmas[4]) < 1e-12:
                    out[1] = np.inf
                    out[3] = np.inf
                return out

        store = tr.generate_guided_trajectories(
            FlakyTeacher(), small_schedule, count=6, omega_range=(2.0, 2.0), seed=1
        )
        assert store.num_trajectories == 4
        assert set(store.trajectory_ids()) == {0, 2, 4, 5}


class TestDiffusionPairs:
    def test_counts_match_guided_contract(self, pairs_store, guided_store):
        assert len(pairs_store) == len(guided_store)
        assert pairs_store.num_trajectories == guided_store.num_trajectories

    def test_top_grid_moments(self, oracle_teacher, ring_ds):
        sch = NoiseSchedule(num_steps=4)
        store = tr.generate_diffusion_pairs(
            oracle_teacher, ring_ds, sch, count=4000, omega_range=(1.0, 1.0), seed=9,
            chunk_size=4000,
        )
        top = store.step_slice(0)["x_t"]
        # x_t = data + sigma_max * eps; variance adds
        data_var = np.var(ring_ds.sample_batch(
            rng_mod.stream(1, "v").integers(0, 8, 4000), rng_mod.stream(1, "v2")
        ), axis=0)
        want = data_var + sch.sigma_max**2
        assert np.all(np.abs(np.var(top, axis=0) / want - 1.0) < 0.1)

    def test_targets_recompute_with_stored_conditions(self, pairs_store, oracle_teacher):
        for step in [0, 9]:
            rows = pairs_store.step_slice(step)
            sig = float(rows["sigma"][0])
            e_c = oracle_teacher.eps(rows["x_t"], sig, rows["class_id"])
            e_u = oracle_teacher.eps(
                rows["x_t"], sig, oracle_teacher.null_ids(len(rows))
            )
            want = cfg_combine(e_c, e_u, rows["omega"])
            assert np.array_equal(want, rows["eps_target"])

    def test_audit_replay_bit_exact(self, oracle_teacher, ring_ds, small_schedule, pairs_store):
        dev = tr.audit_targets(
            pairs_store,
            lambda: tr.generate_diffusion_pairs(
                oracle_teacher, ring_ds, small_schedule, count=64,
                omega_range=(1.0, 6.0), seed=42,
            ),
        )
        assert dev == 0.0


class TestMinibatch:
    def test_single_record_store(self, guided_store):
        one = tr.TrajectoryStore(
            guided_store.records[:1].copy(), 1,
            guided_store.schedule_hash, guided_store.teacher_hash,
        )
        batch = tr.sample_minibatch(one, 1, seed=0)
        assert batch[0] == one.records[0]

    def test_deterministic(self, guided_store):
        a = tr.sample_minibatch(guided_store, 32, seed=7)
        b = tr.sample_minibatch(guided_store, 32, seed=7)
        assert np.array_equal(a, b)
        c = tr.sample_minibatch(guided_store, 32, seed=8)
        assert not np.array_equal(a, c)

    def test_empty_store_rejected(self, guided_store):
        empty = tr.TrajectoryStore(
            guided_store.records[:0].copy(), 16,
            guided_store.schedule_hash, guided_store.teacher_hash,
        )
        with pytest.raises(PreconditionError):
            tr.sample_minibatch(empty, 4, seed=0)

    def test_step_index_uniformity_chi2(self, guided_store):
        draws = tr.sample_minibatch(guided_store, 100_000, seed=13)
        counts = np.bincount(draws["step_index"].astype(int), minlength=16)
        _, p = stats.chisquare(counts)
        assert p > 0.01


class TestDivergence:
    def test_self_comparison_is_zero(self, guided_store):
        curve = tr.trajectory_divergence(guided_store, guided_store)
        assert all(abs(v) < 1e-12 for _, v in curve)

    def test_schedule_mismatch_rejected(self, guided_store, oracle_teacher):
        other_sched = NoiseSchedule(num_steps=8)
        other = tr.generate_guided_trajectories(
            oracle_teacher, other_sched, count=8, omega_range=(1.0, 2.0), seed=2
        )
        with pytest.raises(CompatibilityError):
            tr.trajectory_divergence(guided_store, other)

    def test_guided_gap_grows_from_noise_to_data(self, oracle_teacher, small_schedule):
        # the V-statistic's small-sample bias scales with E|x-x'| / n, which
        # at sigma_max ~ 10 is ~35/n; counts are sized to keep it below the
        # final-step signal
        hot = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, count=2048, omega_range=(4.0, 6.0), seed=31
        )
        cold = tr.generate_guided_trajectories(
            oracle_teacher, small_schedule, count=2048, omega_range=(1.0, 1.0), seed=32
        )
        curve = dict(tr.trajectory_divergence(hot, cold, steps=[0, 15]))
        assert curve[15] > curve[0]
        assert curve[0] < 0.03  # same prior, different draws
