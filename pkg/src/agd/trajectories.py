"""Guided-trajectory cache: generation, binary store, minibatch serving.

Distillation never talks to the teacher directly; it reads (x_t, sigma, c,
omega, eps-target) tuples from a store generated once up front.  The store is
bit-exact on disk so cached targets stay byte-identical to what the teacher
produced, and generation is chunk-deterministic so any record can be audited
by replaying its chunk and comparing bitwise.

Records keep the batched row layout of generation.  That matters: BLAS gives
bitwise-different results for the same row evaluated at different batch
sizes, so audits must recompute targets in the exact generation layout.
"""

import logging
import struct

import numpy as np

from agd import hashing
from agd import rng as rng_mod
from agd.errors import CompatibilityError, DimensionError, InputError, PreconditionError
from agd.diffusion.sampling import CfgTeacher, SamplerKind
from agd.evaluation.distances import energy_distance

log = logging.getLogger(__name__)

MAGIC = b"AGDT"
VERSION = 1
NULL_CLASS = -1  # class_id tag for the unconditional row

RECORD_DTYPE = np.dtype(
    [
        ("x_t", "<f8", (2,)),
        ("sigma", "<f8"),
        ("class_id", "<i8"),
        ("omega", "<f8"),
        ("eps_target", "<f8", (2,)),
        ("trajectory_id", "<u8"),
        ("step_index", "<u8"),
    ]
)

_HEADER = struct.Struct("<4sHIIQQQ")


class TrajectoryStore:
    """Fixed-schema record array plus provenance hashes."""

    def __init__(self, records, num_steps, schedule_hash, teacher_hash, data_dim=2):
        records = np.asarray(records, dtype=RECORD_DTYPE)
        self.records = records
        self.data_dim = int(data_dim)
        self.num_steps = int(num_steps)
        self.schedule_hash = int(schedule_hash)
        self.teacher_hash = int(teacher_hash)
        if len(records) % num_steps != 0:
            raise InputError("record count must be trajectories x num_steps")
        self.num_trajectories = len(records) // num_steps

    def __len__(self):
        return len(self.records)

    def omega_range(self):
        return float(self.records["omega"].min()), float(self.records["omega"].max())

    def trajectory_ids(self):
        return np.unique(self.records["trajectory_id"])

    def step_slice(self, step_index):
        return self.records[self.records["step_index"] == step_index]

    def check_schedule(self, schedule):
        if schedule.schedule_hash() != self.schedule_hash:
            raise CompatibilityError(
                "store was generated under a different noise schedule"
            )

    def check_teacher(self, teacher):
        if teacher.params_hash() != self.teacher_hash:
            raise CompatibilityError("store was generated by a different teacher")

    def save(self, path):
        payload = self.records.tobytes()
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    MAGIC,
                    VERSION,
                    self.data_dim,
                    self.num_steps,
                    self.num_trajectories,
                    self.schedule_hash,
                    self.teacher_hash,
                )
            )
            fh.write(payload)
            fh.write(struct.pack("<Q", hashing.fnv1a64(payload)))
        return path

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _HEADER.size + 8:
            raise CompatibilityError(f"{path}: truncated store file")
        magic, version, data_dim, num_steps, num_traj, sched_h, teach_h = _HEADER.unpack(
            raw[: _HEADER.size]
        )
        if magic != MAGIC:
            raise CompatibilityError(f"{path}: not a trajectory store")
        if version != VERSION:
            raise CompatibilityError(f"{path}: unsupported store version {version}")
        body = raw[_HEADER.size : -8]
        (checksum,) = struct.unpack("<Q", raw[-8:])
        if hashing.fnv1a64(body) != checksum:
            raise CompatibilityError(f"{path}: checksum mismatch, store corrupt")
        want = num_traj * num_steps * RECORD_DTYPE.itemsize
        if len(body) != want:
            raise CompatibilityError(f"{path}: payload size does not match header")
        records = np.frombuffer(body, dtype=RECORD_DTYPE).copy()
        return cls(records, num_steps, sched_h, teach_h, data_dim)


def _draw_conditions(num_classes, n, omega_range, stream, fixed_classes=None):
    lo, hi = float(omega_range[0]), float(omega_range[1])
    if lo < 1.0 or hi < lo:
        raise PreconditionError("omega range must satisfy 1 <= lo <= hi")
    if fixed_classes is None:
        classes = stream.integers(0, num_classes, n)
    else:
        classes = np.asarray(fixed_classes, dtype=np.int64)
        if classes.shape != (n,):
            raise DimensionError(f"class_ids must have shape ({n},)")
        if classes.min() < 0 or classes.max() >= num_classes:
            raise InputError("class_ids out of range")
        # keep the stream cursor where the uniform path would leave it
        stream.integers(0, num_classes, n)
    omegas = stream.uniform(lo, hi, n) if hi > lo else np.full(n, lo)
    return classes, omegas


def _pack_chunk(xs, es, sigmas, classes, omegas, traj_ids, alive):
    """Flatten per-step state into records, trajectory-major, dropping dead rows."""
    num_steps = len(xs)
    out = np.empty(int(alive.sum()) * num_steps, dtype=RECORD_DTYPE)
    pos = 0
    for row in np.flatnonzero(alive):
        block = out[pos : pos + num_steps]
        block["x_t"] = [x[row] for x in xs]
        block["sigma"] = sigmas
        block["class_id"] = classes[row]
        block["omega"] = omegas[row]
        block["eps_target"] = [e[row] for e in es]
        block["trajectory_id"] = traj_ids[row]
        block["step_index"] = np.arange(num_steps)
        pos += num_steps
    return out


def generate_guided_trajectories(
    teacher, schedule, count, omega_range, kind=SamplerKind.DETERMINISTIC,
    seed=0, chunk_size=512, class_ids=None,
):
    """Run CFG-guided sampling and cache every step's combined target.

    Per trajectory: omega ~ Unif(omega_range), class uniform unless
    `class_ids` pins one label per trajectory (stratified counts), start
    from pure noise, integrate with the requested sampler while recording
    (x_t, sigma, class, omega, eps-target) at every step.  Needs no dataset.
    Rows that go non-finite are dropped from the store and logged.
    """
    if not teacher.frozen:
        raise PreconditionError("teacher must be frozen before generation")
    kind = SamplerKind(kind)
    sig = schedule.sigmas
    chunks = []
    for chunk_index, start in enumerate(range(0, count, chunk_size)):
        n = min(chunk_size, count - start)
        cond = rng_mod.stream(seed, "traj-cond", chunk_index)
        fixed = None if class_ids is None else class_ids[start : start + n]
        classes, omegas = _draw_conditions(
            teacher.num_classes, n, omega_range, cond, fixed)
        noise = rng_mod.stream(seed, "traj-noise", chunk_index)
        x = sig[0] * noise.standard_normal((n, 2))
        guided = CfgTeacher(teacher, omegas)
        alive = np.ones(n, dtype=bool)
        xs, es = [], []
        for i in range(schedule.num_steps):
            # divergence is survivable here (bad rows get dropped), so let
            # inf/nan flow through the arithmetic without warnings
            with np.errstate(invalid="ignore", over="ignore"):
                e = guided.eps(x, sig[i], classes)
                xs.append(x.copy())
                es.append(e)
                if kind is SamplerKind.DETERMINISTIC:
                    x = x + (sig[i + 1] - sig[i]) * e
                else:
                    var = sig[i] ** 2 - sig[i + 1] ** 2
                    z = noise.standard_normal((n, 2))
                    x = x - (var / sig[i]) * e + np.sqrt(var) * z
            bad = ~np.all(np.isfinite(x), axis=1)
            newly = bad & alive
            if np.any(newly):
                log.warning(
                    "dropping %d diverged trajectories at step %d", newly.sum(), i
                )
                alive &= ~newly
                x[~alive] = 0.0  # park dead rows; they stay in the batch layout
        chunks.append(
            _pack_chunk(
                xs, es, sig[: schedule.num_steps], classes, omegas,
                np.arange(start, start + n), alive,
            )
        )
    records = np.concatenate(chunks)
    return TrajectoryStore(
        records, schedule.num_steps, schedule.schedule_hash(), teacher.params_hash()
    )


def generate_diffusion_pairs(
    teacher, dataset, schedule, count, omega_range, seed=0, chunk_size=512,
    class_ids=None,
):
    """Baseline store: same schema, but x_t comes from noising real data.

    For each trajectory slot and grid level, draw a fresh clean point of the
    trajectory's class and perturb it to that level; the cached target is
    still the teacher's combined guided prediction at (x_t, sigma).
    """
    if not teacher.frozen:
        raise PreconditionError("teacher must be frozen before generation")
    sig = schedule.sigmas
    chunks = []
    for chunk_index, start in enumerate(range(0, count, chunk_size)):
        n = min(chunk_size, count - start)
        cond = rng_mod.stream(seed, "pairs-cond", chunk_index)
        fixed = None if class_ids is None else class_ids[start : start + n]
        classes, omegas = _draw_conditions(
            teacher.num_classes, n, omega_range, cond, fixed)
        noise = rng_mod.stream(seed, "pairs-noise", chunk_index)
        guided = CfgTeacher(teacher, omegas)
        xs, es = [], []
        for i in range(schedule.num_steps):
            clean = dataset.sample_batch(classes, noise)
            x_t = clean + sig[i] * noise.standard_normal((n, 2))
            xs.append(x_t)
            es.append(guided.eps(x_t, sig[i], classes))
        chunks.append(
            _pack_chunk(
                xs, es, sig[: schedule.num_steps], classes, omegas,
                np.arange(start, start + n), np.ones(n, dtype=bool),
            )
        )
    records = np.concatenate(chunks)
    return TrajectoryStore(
        records, schedule.num_steps, schedule.schedule_hash(), teacher.params_hash()
    )


def sample_minibatch(store, batch, seed):
    """Uniform-with-replacement record draws, deterministic per seed."""
    if len(store) == 0:
        raise PreconditionError("cannot sample from an empty store")
    idx = rng_mod.stream(seed, "minibatch").integers(0, len(store), batch)
    return store.records[idx]


def audit_targets(store, regenerate, sample=100, audit_seed=0):
    """Spot-check cached targets by replaying generation bit-for-bit.

    `regenerate` is a zero-argument callable re-running the generation that
    produced `store` (same teacher, schedule, and seed).  Returns the max
    absolute deviation of eps_target over `sample` random records; raises if
    the replayed states disagree, since then the store is not reproducible.
    """
    replay = regenerate()
    if len(replay) != len(store):
        raise CompatibilityError("replay produced a different record count")
    idx = rng_mod.stream(audit_seed, "audit").integers(0, len(store), sample)
    a, b = store.records[idx], replay.records[idx]
    if not np.array_equal(a["x_t"], b["x_t"]):
        raise CompatibilityError("replayed states diverge from stored states")
    return float(np.max(np.abs(a["eps_target"] - b["eps_target"])))


def trajectory_divergence(store_a, store_b, steps=None):
    """Per-step energy distance between the two stores' state marginals."""
    if store_a.schedule_hash != store_b.schedule_hash:
        raise CompatibilityError("stores use different schedules")
    if steps is None:
        steps = range(store_a.num_steps)
    out = []
    for i in steps:
        xa = store_a.step_slice(i)["x_t"]
        xb = store_b.step_slice(i)["x_t"]
        out.append((int(i), energy_distance(xa, xb)))
    return out
