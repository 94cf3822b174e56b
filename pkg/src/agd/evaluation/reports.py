"""Cross-model comparisons and the tabular evaluation report.

Everything here works against the sampler protocol (`eps` + `nfe`), so the
same code evaluates the two-pass teacher, the adapter student, a finetuned
baseline, or the raw conditional model.
"""

import io

import numpy as np

from agd import rng as rng_mod
from agd.errors import InputError
from agd.diffusion.sampling import CfgTeacher, SamplerKind, sample_batch
from agd.evaluation.distances import energy_distance, knn_precision_recall

REPORT_COLUMNS = [
    "omega",
    "method",
    "endpoint_mse_vs_teacher",
    "energy_distance_to_data",
    "knn_precision",
    "knn_recall",
    "nfe_total",
    "trainable_param_ratio",
]


def endpoint_mse(model_a, model_b, schedule, num_classes, num_seeds=512, seed=0):
    """Mean squared endpoint gap under shared per-seed starting noise.

    Both models integrate deterministically from identical initial points
    with identical class labels, so the only difference is the model.
    """
    st = rng_mod.stream(seed, "endpoint")
    ids = st.integers(0, num_classes, num_seeds)
    x_init = schedule.sigmas[0] * st.standard_normal((num_seeds, 2))
    xa = sample_batch(model_a, schedule, ids, x_init=x_init)
    xb = sample_batch(model_b, schedule, ids, x_init=x_init)
    return float(np.mean(np.sum((xa - xb) ** 2, axis=1)))


def _metrics_against_data(x_gen, x_real):
    ed = energy_distance(x_gen, x_real)
    precision, recall = knn_precision_recall(x_gen, x_real, k=5)
    return ed, precision, recall


class EvalReport:
    """Row-per-(omega, method) table with lossless CSV round-trip."""

    def __init__(self, rows=None, metadata=None):
        self.rows = list(rows or [])
        self.metadata = dict(metadata or {})

    def add_row(self, **kv):
        missing = set(REPORT_COLUMNS) - set(kv)
        if missing:
            raise InputError(f"report row missing columns: {sorted(missing)}")
        self.rows.append({c: kv[c] for c in REPORT_COLUMNS})

    def _cell(self, value):
        # repr of a builtin float round-trips exactly in CSV
        return repr(float(value)) if isinstance(value, float) else str(value)

    def to_csv(self):
        buf = io.StringIO()
        meta = ";".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        buf.write(f"# {meta}\n")
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(self._cell(row[c]) for c in REPORT_COLUMNS) + "\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = {}
        if lines and lines[0].startswith("#"):
            body = lines.pop(0)[1:].strip()
            if body:
                meta = dict(kv.split("=", 1) for kv in body.split(";"))
        header = lines.pop(0).split(",")
        if header != REPORT_COLUMNS:
            raise InputError("unrecognized report columns")
        rows = []
        for ln in lines:
            cells = ln.split(",")
            row = {}
            for col, cell in zip(REPORT_COLUMNS, cells):
                if col == "method":
                    row[col] = cell
                elif col == "nfe_total":
                    row[col] = int(cell)
                else:
                    row[col] = float(cell)
            rows.append(row)
        return cls(rows, meta)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_csv(fh.read())

    def __eq__(self, other):
        return (
            isinstance(other, EvalReport)
            and self.rows == other.rows
            and {k: str(v) for k, v in self.metadata.items()}
            == {k: str(v) for k, v in other.metadata.items()}
        )

    def summary_text(self, digits=6):
        """Fixed-format text table; all floats at `digits` significant digits."""

        def fmt(v):
            if isinstance(v, float):
                return f"{v:.{digits}g}"
            return str(v)

        widths = {c: len(c) for c in REPORT_COLUMNS}
        for row in self.rows:
            for c in REPORT_COLUMNS:
                widths[c] = max(widths[c], len(fmt(row[c])))
        lines = []
        for k, v in sorted(self.metadata.items()):
            lines.append(f"{k}: {v}")
        lines.append("")
        lines.append("  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS))
        for row in self.rows:
            lines.append("  ".join(fmt(row[c]).ljust(widths[c]) for c in REPORT_COLUMNS))
        return "\n".join(lines) + "\n"


def evaluate_method(
    model, teacher, dataset, schedule, omega, method_name, param_ratio,
    num_gen=2048, num_real=4096, num_pair_seeds=512, seed=0,
    kind=SamplerKind.DETERMINISTIC,
):
    """One report row: endpoint gap to the teacher plus data-space metrics."""
    st = rng_mod.stream(seed, "eval-ids", method_name, float(omega))
    ids = st.integers(0, dataset.num_classes, num_gen)
    model.nfe = 0
    x_gen = sample_batch(model, schedule, ids, kind=kind, seed=rng_mod.spawn_seed(seed, "gen", method_name, float(omega)))
    nfe = int(model.nfe)
    real_ids = rng_mod.stream(seed, "eval-real").integers(0, dataset.num_classes, num_real)
    x_real = dataset.sample_batch(real_ids, rng_mod.stream(seed, "eval-real-draw"))
    ed, precision, recall = _metrics_against_data(x_gen, x_real)
    mse = endpoint_mse(
        model, teacher, schedule, dataset.num_classes, num_pair_seeds,
        seed=rng_mod.spawn_seed(seed, "pair", float(omega)),
    )
    return {
        "omega": float(omega),
        "method": method_name,
        "endpoint_mse_vs_teacher": mse,
        "energy_distance_to_data": ed,
        "knn_precision": precision,
        "knn_recall": recall,
        "nfe_total": nfe,
        "trainable_param_ratio": float(param_ratio),
    }


def guidance_sweep(
    base, students, dataset, schedule, omegas, seed=0,
    num_gen=2048, num_real=4096, num_pair_seeds=512,
):
    """Sweep guidance scales for every method.

    `students` maps method name to (factory, param_ratio) where factory(omega)
    returns a model following the sampler protocol.  The two-pass teacher is
    always included as method "cfg_teacher".
    """
    report = EvalReport(metadata={"omegas": "/".join(str(w) for w in omegas)})
    for omega in omegas:
        teacher = CfgTeacher(base, float(omega))
        entries = [("cfg_teacher", teacher, 0.0)]
        for name, (factory, ratio) in students.items():
            entries.append((name, factory(float(omega)), ratio))
        for name, model, ratio in entries:
            report.rows.append(
                evaluate_method(
                    model, teacher, dataset, schedule, omega, name, ratio,
                    num_gen=num_gen, num_real=num_real,
                    num_pair_seeds=num_pair_seeds, seed=seed,
                )
            )
    return report


def scheduler_transfer(student, base, dataset, schedule, omega, seed=0, num_gen=2048):
    """Sample the student and teacher with the stochastic integrator.

    The student saw only deterministic trajectories in training; this checks
    its predictions still steer the reverse SDE.  Returns energy distances to
    data for both models plus their ratio and NFE counts.
    """
    teacher = CfgTeacher(base, float(omega))
    ids = rng_mod.stream(seed, "transfer-ids").integers(0, dataset.num_classes, num_gen)
    real = dataset.sample_batch(
        rng_mod.stream(seed, "transfer-real").integers(0, dataset.num_classes, 2 * num_gen),
        rng_mod.stream(seed, "transfer-real-draw"),
    )
    out = {}
    for name, model in (("student", student), ("teacher", teacher)):
        model.nfe = 0
        x = sample_batch(
            model, schedule, ids, kind=SamplerKind.STOCHASTIC,
            seed=rng_mod.spawn_seed(seed, "transfer", name),
        )
        out[f"{name}_energy_distance"] = energy_distance(x, real)
        out[f"{name}_nfe"] = int(model.nfe)
    out["ratio"] = out["student_energy_distance"] / max(
        out["teacher_energy_distance"], 1e-12
    )
    return out
