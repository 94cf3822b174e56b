"""Training students against cached guided targets.

Two students share one loop: adapter training, which updates only the psi
parameters riding on a frozen base, and full fine-tuning, which clones the
base, bolts on a guidance-scale pathway, and updates everything.  Both read
(x_t, sigma, class, omega) -> eps_target records straight from a trajectory
store, so the teacher is never evaluated during training; its work was spent
once when the store was built.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from agd import rng as rng_mod
from agd.adapters import BoundStudent
from agd.errors import CompatibilityError, InputError, NumericError, PreconditionError
from agd.nn import layers as L
from agd.nn import optim
from agd.nn import tensor as T
from agd.trajectories import TrajectoryStore, sample_minibatch

LOSSES = ("l2", "l1", "weighted_l2")
MODES = ("agd_adapters", "gd_full_finetune")


@dataclass
class DistillConfig:
    steps: int = 5000
    batch: int = 64
    peak_lr: float = 2e-3
    loss: str = "l2"
    # weighted_l2 uses lambda(sigma) = sigma ** weight_power; 0 recovers l2
    weight_power: float = -2.0
    trajectory_source: str = "guided"
    mode: str = "agd_adapters"
    holdout_fraction: float = 0.1
    clip_norm: float = 10.0
    log_every: int = 100
    seed: int = 0

    def validate(self):
        if self.loss not in LOSSES:
            raise InputError(f"unknown loss {self.loss!r}")
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}")
        if self.trajectory_source not in ("guided", "diffusion"):
            raise InputError(f"unknown trajectory source {self.trajectory_source!r}")
        if self.steps < 0 or self.batch < 1:
            raise InputError("steps must be >= 0 and batch >= 1")
        if self.peak_lr <= 0.0:
            raise InputError("peak_lr must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise InputError("holdout fraction must lie in [0, 1)")
        return self


@dataclass
class DistillRun:
    mode: str
    curve: list = field(default_factory=list)
    holdout_initial: float = float("nan")
    holdout_final: float = float("nan")
    mean_step_ms: float = 0.0
    total_seconds: float = 0.0
    param_ratio: float = 0.0
    params_hash: int = 0
    base_hash_before: int = 0
    base_hash_after: int = 0
    steps: int = 0


def _row_losses(diff: np.ndarray, loss: str, sigma: np.ndarray, weight_power: float):
    if loss == "l1":
        return np.abs(diff).sum(axis=1)
    per_row = (diff * diff).sum(axis=1)
    if loss == "weighted_l2":
        per_row = per_row * sigma ** weight_power
    return per_row


def loss_eval(loss: str, pred, target, sigma, weight_power: float = -2.0) -> float:
    """Mean per-row loss over matching (n, d) arrays (or a single point)."""
    if loss not in LOSSES:
        raise InputError(f"unknown loss {loss!r}")
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {target.shape}")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (pred.shape[0],))
    return float(_row_losses(pred - target, loss, sigma, weight_power).mean())


def _loss_tensor(out, target, loss, sigma, weight_power, batch):
    diff = T.sub(out, T.Tensor(target))
    if loss == "l1":
        per_row = T.sum_cols(T.abs_(diff))
    else:
        per_row = T.sum_cols(T.square(diff))
        if loss == "weighted_l2":
            per_row = T.mul(per_row, T.Tensor(sigma[:, None] ** weight_power))
    return T.scale(T.sum_all(per_row), 1.0 / batch)


def split_holdout(store: TrajectoryStore, fraction: float, seed):
    """Split by trajectory id so no trajectory leaks across the boundary."""
    ids = store.trajectory_ids()
    if fraction <= 0.0:
        return store, None
    k = max(1, int(round(fraction * len(ids))))
    if k >= len(ids):
        raise PreconditionError("holdout would consume every trajectory")
    order = rng_mod.stream(seed, "holdout-split").permutation(len(ids))
    held = set(ids[order[:k]])
    mask = np.isin(store.records["trajectory_id"], sorted(held))
    train = TrajectoryStore(
        store.records[~mask], store.num_steps, store.schedule_hash,
        store.teacher_hash, store.data_dim,
    )
    holdout = TrajectoryStore(
        store.records[mask], store.num_steps, store.schedule_hash,
        store.teacher_hash, store.data_dim,
    )
    return train, holdout


def evaluate_on_store(model, store: TrajectoryStore, loss: str = "l2",
                      weight_power: float = -2.0, batch: int = 4096) -> float:
    """Mean loss of model predictions against a store's cached targets.

    The model's eps may or may not accept a guidance scale; plain conditional
    models are evaluated as-is, which is what makes them a fair baseline.
    """
    rec = store.records
    total = 0.0
    for lo in range(0, len(rec), batch):
        part = rec[lo : lo + batch]
        try:
            pred = model.eps(part["x_t"], part["sigma"], part["class_id"],
                             omega=part["omega"])
        except TypeError:
            pred = model.eps(part["x_t"], part["sigma"], part["class_id"])
        rows = _row_losses(pred - part["eps_target"], loss, part["sigma"], weight_power)
        total += float(rows.sum())
    return total / len(rec)


def _train(model, params, store, cfg: DistillConfig):
    """Shared minibatch loop; assumes model.forward(x, sigma, ids, omega)."""
    state = optim.AdamState(params)
    curve = []
    step_times = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        t_step = time.perf_counter()
        batch = sample_minibatch(
            store, cfg.batch, rng_mod.spawn_seed(cfg.seed, "distill-batch", step)
        )
        out = model.forward(batch["x_t"], batch["sigma"], batch["class_id"],
                            batch["omega"])
        loss = _loss_tensor(out, batch["eps_target"], cfg.loss, batch["sigma"],
                            cfg.weight_power, cfg.batch)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(
                f"distillation loss went non-finite at step {step} "
                f"(loss={cfg.loss}, lr={optim.lr_schedule(step, cfg.steps, cfg.peak_lr):.3g})"
            )
        for p in params:
            p.zero_grad()
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
        if cfg.clip_norm > 0.0:
            optim.clip_grads(grads, cfg.clip_norm)
        optim.adam_step(state, params, grads,
                        optim.lr_schedule(step, cfg.steps, cfg.peak_lr))
        step_times.append(time.perf_counter() - t_step)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, val))
    total = time.perf_counter() - t0
    mean_ms = 1000.0 * float(np.mean(step_times)) if step_times else 0.0
    return curve, mean_ms, total


def distill(store: TrajectoryStore, student, schedule, cfg: DistillConfig | None = None):
    """Train a guided student's adapters against cached teacher targets."""
    cfg = (cfg or DistillConfig()).validate()
    if cfg.mode != "agd_adapters":
        raise InputError("distill() trains adapters; use gd_finetune() for full tuning")
    store.check_schedule(schedule)
    store.check_teacher(student.base)
    train_store, holdout = split_holdout(store, cfg.holdout_fraction, cfg.seed)

    run = DistillRun(mode=cfg.mode, steps=cfg.steps)
    run.base_hash_before = student.base.params_hash()
    run.param_ratio = student.param_ratio()
    if holdout is not None:
        run.holdout_initial = evaluate_on_store(student, holdout, cfg.loss,
                                                cfg.weight_power)
    run.curve, run.mean_step_ms, run.total_seconds = _train(
        student, student.params(), train_store, cfg
    )
    if holdout is not None:
        run.holdout_final = evaluate_on_store(student, holdout, cfg.loss,
                                              cfg.weight_power)
    run.base_hash_after = student.base.params_hash()
    if run.base_hash_after != run.base_hash_before:
        raise CompatibilityError("frozen base parameters changed during adapter training")
    run.params_hash = student.params_hash()
    return run


class FinetunedModel:
    """Fully trainable clone of a base plus a guidance-scale pathway.

    The scale is encoded by Fourier features and an MLP whose output is added
    into the noise-level embedding.  With the pathway's output layer zeroed
    the clone predicts exactly what the base does.
    """

    def __init__(self, base, seed=0, omega_freqs: int = 6, omega_scale: float = 0.25,
                 zero_init: bool = False):
        init = rng_mod.stream(seed, "gd-omega-path")
        self.pathway_seed = seed
        self.net = base.clone(unfreeze=True)
        d_t = self.net.sigma_mlp.widths[-1]
        self.omega_fourier = L.FourierEncoder(omega_freqs, init, in_dim=1,
                                              scale=omega_scale)
        self.omega_mlp = L.Mlp([self.omega_fourier.output_dim, 16, d_t],
                               base.cfg.activation, rng=init, zero_output=zero_init)
        self.num_classes = base.num_classes
        self.data_dim = base.data_dim
        self.omega = None
        self.nfe = 0

    def params(self):
        return self.net.params() + self.omega_mlp.params()

    def n_params(self):
        return sum(p.value.size for p in self.params())

    def params_hash(self):
        from agd import hashing

        return hashing.params_hash(self.params())

    def null_ids(self, n):
        return self.net.null_ids(n)

    def _omega_col(self, omega, n):
        w = np.asarray(omega, dtype=np.float64)
        if w.ndim == 0:
            w = np.full((n, 1), float(w))
        elif w.shape == (n,):
            w = w[:, None]
        elif w.shape != (n, 1):
            raise InputError(f"omega must be scalar or ({n},), got {w.shape}")
        return w

    def forward(self, x, sigma, ids, omega):
        ids = np.asarray(ids)
        if np.any(ids == self.num_classes):
            raise InputError("guided prediction needs a concrete class, not the null id")
        feats = self.omega_fourier.encode(self._omega_col(omega, len(ids)))
        extra = self.omega_mlp.forward(T.Tensor(feats))
        out = self.net.forward(x, sigma, ids, t_emb_extra=extra)
        self.net.nfe -= len(ids)
        self.nfe += len(ids)
        return out

    def eps(self, x, sigma, ids, omega=None):
        if omega is None:
            omega = self.omega
        if omega is None:
            raise PreconditionError("no guidance scale bound; pass omega or use bind()")
        with T.no_grad():
            return self.forward(x, sigma, ids, omega).value

    def bind(self, omega):
        return BoundStudent(self, float(omega))


def gd_finetune(store: TrajectoryStore, base, schedule,
                cfg: DistillConfig | None = None, seed_model=None):
    """Full fine-tuning baseline: clone the base and train every parameter."""
    cfg = (cfg or DistillConfig(mode="gd_full_finetune")).validate()
    if cfg.mode != "gd_full_finetune":
        raise InputError("gd_finetune() is the full-tuning mode")
    store.check_schedule(schedule)
    store.check_teacher(base)
    train_store, holdout = split_holdout(store, cfg.holdout_fraction, cfg.seed)

    model = FinetunedModel(base, seed=cfg.seed if seed_model is None else seed_model)
    run = DistillRun(mode=cfg.mode, steps=cfg.steps)
    run.base_hash_before = base.params_hash()
    run.param_ratio = model.n_params() / base.n_params()
    if holdout is not None:
        run.holdout_initial = evaluate_on_store(model, holdout, cfg.loss,
                                                cfg.weight_power)
    run.curve, run.mean_step_ms, run.total_seconds = _train(
        model, model.params(), train_store, cfg
    )
    if holdout is not None:
        run.holdout_final = evaluate_on_store(model, holdout, cfg.loss,
                                              cfg.weight_power)
    run.base_hash_after = base.params_hash()
    run.params_hash = model.params_hash()
    return run, model
