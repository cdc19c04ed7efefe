"""Online continual learners and the single-pass run harness.

The main learner keeps three parameter vectors: the working model that
takes gradient steps, plus fast and slow shadows maintained as
stochastically triggered exponential moving averages of the working
weights. Replay draws come jointly from a reservoir memory and a
gradient-diversity memory; each replayed sample is distilled from
whichever of the fast/slow models currently predicts it better.

Four reference learners run under the identical protocol: plain SGD,
reservoir replay with stored-output distillation, diversity-buffer
replay, and gradient projection against a replayed reference gradient.

Trainers never read a sample's task id; task boundaries exist only in the
harness, which uses them to fill the error matrices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .buffers import (BufferEntry, DiversityBuffer, ReservoirBuffer,
                      composition, sample_joint)
from .errors import ConfigurationError, InputError, InternalError
from .metrics import ErrorMatrix, evaluate_model
from .model import (Array, Heatmap, HeatmapPredictor, PredictorConfig, Sample,
                    sgd_step)
from .stream import TaskStream

TRAINER_KINDS = ("dualls", "vanilla", "der", "gss", "agem")


@dataclass(frozen=True)
class HyperParams:
    """Learning-rate, EMA, replay-weight and batch-size settings.

    ``alpha_1``/``beta_1`` weight the distillation/ground-truth losses on
    reservoir draws, ``alpha_2``/``beta_2`` the same on diversity draws
    (the reservoir pair doubles as the distillation/ground-truth weights
    of the reservoir-replay baseline, and ``beta_2`` as the diversity
    baseline's replay weight).
    """

    lr: float = 1e-2
    decay_fast: float = 0.9
    decay_slow: float = 0.999
    p_fast: float = 0.9
    p_slow: float = 0.1
    alpha_1: float = 0.5
    beta_1: float = 0.5
    alpha_2: float = 0.5
    beta_2: float = 0.5
    batch_size: int = 8
    k_r: int = 8
    k_d: int = 8

    def __post_init__(self):
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        for name in ("decay_fast", "decay_slow"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        for name in ("p_fast", "p_slow"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        for name in ("alpha_1", "alpha_2", "beta_1", "beta_2"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ConfigurationError(f"{name} must be >= 0, got {v}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.k_r < 0 or self.k_d < 0:
            raise ConfigurationError("k_r and k_d must be >= 0")


@dataclass(frozen=True)
class StepInfo:
    """Per-step trace record: losses, EMA triggers, samples consumed."""

    step: int
    loss: float
    stream_focal: float
    replay_kl_r: float = 0.0
    replay_focal_r: float = 0.0
    replay_kl_d: float = 0.0
    replay_focal_d: float = 0.0
    triggered_fast: bool = False
    triggered_slow: bool = False
    processed: int = 0


def ema_update(target: Array, source: Array, decay: float) -> Array:
    """Elementwise decay*target + (1-decay)*source."""
    if target.shape != source.shape:
        raise InternalError(
            f"length mismatch: {target.shape} vs {source.shape}")
    if not (0.0 <= decay <= 1.0):
        raise ConfigurationError(f"decay must be in [0, 1], got {decay}")
    return decay * target + (1.0 - decay) * source


def select_teacher(predictor: HeatmapPredictor, sample: Sample,
                   theta_f: Array, theta_s: Array) -> Heatmap:
    """Heatmap of whichever shadow model has the smaller loss on the sample.

    Ties go to the slow model (the comparison is strictly 'fast < slow').
    """
    lf, pf = predictor.focal_and_probs(theta_f, [sample])
    ls, ps = predictor.focal_and_probs(theta_s, [sample])
    probs = pf[0] if lf[0] < ls[0] else ps[0]
    return predictor.heatmap_from_probs(probs)


def agem_project(g: Array, g_ref: Array) -> Array:
    """Project g onto the half-space where the reference loss cannot rise.

    Returns g itself (same object) when the constraint is already
    satisfied or the reference gradient is zero.
    """
    denom = float(g_ref @ g_ref)
    if denom == 0.0:
        return g
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return g
    return g - (dot / denom) * g_ref


class OnlineTrainer:
    """Shared state and plumbing for all single-pass learners.

    Randomness is split into independent child streams (parameter init,
    EMA triggers, replay draws, reservoir offers, diversity offers), so a
    learner that skips one source leaves the others untouched; this is
    what makes the degenerate configurations of different learners agree
    bitwise on the working parameters.
    """

    kind = "base"

    def __init__(self, predictor: HeatmapPredictor, hyper: HyperParams,
                 res_capacity: int = 0, div_capacity: int = 0, seed: int = 0,
                 score_batch: int = 8):
        self.predictor = predictor
        self.hyper = hyper
        self.seed = seed
        init_ss, ema_ss, replay_ss, res_ss, div_ss = \
            np.random.SeedSequence(seed).spawn(5)
        self.rng_ema = np.random.default_rng(ema_ss)
        self.rng_replay = np.random.default_rng(replay_ss)
        self.rng_res = np.random.default_rng(res_ss)
        self.rng_div = np.random.default_rng(div_ss)
        self.theta_w = predictor.init_params(np.random.default_rng(init_ss))
        self.reservoir = ReservoirBuffer(res_capacity)
        self.diversity = DiversityBuffer(div_capacity, score_batch=score_batch)
        self.step_count = 0
        # Entry id -> (entry, features, targets). Features and targets are
        # parameter-independent, so rows for buffered entries are computed
        # once; the entry reference pins the id against reuse.
        self._row_cache: dict[int, tuple] = {}

    # -- shared loss plumbing -------------------------------------------------

    def _segments(self, batch, replays):
        """Assemble weighted rows for one working-model gradient step.

        ``replays`` is a list of (entries, kl_weight, focal_weight,
        teacher_rows) segments; zero-weight or empty segments must be
        dropped by the caller so that degenerate configurations evaluate
        exactly the same rows as the plain-SGD learner.
        """
        samples = list(batch)
        n_b = len(batch)
        fw = [np.full(n_b, 1.0 / n_b)]
        kw = [np.zeros(n_b)]
        teacher_rows = []
        spans = []
        for entries, kl_w, focal_w, teachers in replays:
            k = len(entries)
            spans.append((len(samples), len(samples) + k))
            samples.extend(e.sample for e in entries)
            fw.append(np.full(k, focal_w / k))
            kw.append(np.full(k, kl_w / k))
            teacher_rows.append(teachers)
        teachers = None
        if any(rows is not None for rows in teacher_rows):
            c = self.predictor.config.n_cells
            teachers = np.full((len(samples), c), 1.0 / c)
            for (lo, hi), rows in zip(spans, teacher_rows):
                if rows is not None:
                    teachers[lo:hi] = rows
        x = self.predictor.encode(samples)
        goals = np.stack([s.goal for s in samples])
        return x, goals, np.concatenate(fw), np.concatenate(kw), teachers, spans

    def _apply(self, batch, replays):
        """Evaluate the combined loss, take the SGD step, return details."""
        x, goals, fw, kw, teachers, spans = self._segments(batch, replays)
        result = self.predictor.rows_eval(self.theta_w, x, goals, fw, kw, teachers)
        self.theta_w = sgd_step(self.theta_w, result.grad, self.hyper.lr)
        n_b = len(batch)
        parts = []
        for (lo, hi), (entries, kl_w, focal_w, _) in zip(spans, replays):
            k = hi - lo
            parts.append((kl_w * result.kl[lo:hi].sum() / k,
                          focal_w * result.focal[lo:hi].sum() / k))
        return result, float(result.focal[:n_b].mean()), parts

    def _entries(self, batch, probs):
        return [BufferEntry(sample=s, teacher=probs[i].copy(), step=self.step_count)
                for i, s in enumerate(batch)]

    def _entry_rows(self, entries):
        """(features, targets) rows for buffer entries, cached by identity."""
        missing = [e for e in entries if id(e) not in self._row_cache]
        if missing:
            x_new, t_new = self.predictor.sample_rows([e.sample for e in missing])
            for i, e in enumerate(missing):
                self._row_cache[id(e)] = (e, x_new[i], t_new[i])
        rows = [self._row_cache[id(e)] for e in entries]
        return (np.stack([r[1] for r in rows]),
                np.stack([r[2] for r in rows]))

    def _sweep_row_cache(self):
        limit = 512 + 4 * (self.reservoir.capacity + self.diversity.capacity)
        if len(self._row_cache) <= limit:
            return
        keep = {id(e) for e in self.reservoir.items}
        keep.update(id(e) for e in self.diversity.items)
        self._row_cache = {k: v for k, v in self._row_cache.items() if k in keep}

    def _offer_diversity(self, entries):
        # Gradient factors depend only on (entry, current params) and the
        # params are fixed for the whole offer block, so factor rows are
        # computed once per entry and shared across this block's offers.
        factors: dict[int, tuple] = {}
        pinned = []

        def grad_fn(items):
            missing = [e for e in items if id(e) not in factors]
            if missing:
                x, t = self._entry_rows(missing)
                acts, dzs = self.predictor.grad_factors_rows(self.theta_w, x, t)
                for i, e in enumerate(missing):
                    factors[id(e)] = tuple(a[i] for a in acts) + \
                        tuple(d[i] for d in dzs)
                    pinned.append(e)
            rows = [factors[id(e)] for e in items]
            acts = [np.stack([r[k] for r in rows]) for k in range(3)]
            dzs = [np.stack([r[3 + k] for r in rows]) for k in range(3)]
            return self.predictor.sketch_from_factors(acts, dzs)

        for e in entries:
            self.diversity.offer(e, grad_fn, self.rng_div)
        self._sweep_row_cache()

    def eval_params(self, role: str = "working") -> Array:
        return self.theta_w

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        raise NotImplementedError

    # -- checkpoint support ----------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "hyper": asdict(self.hyper),
            "step_count": self.step_count,
            "theta_w": self.theta_w,
            "rng": {
                "ema": self.rng_ema.bit_generator.state,
                "replay": self.rng_replay.bit_generator.state,
                "res": self.rng_res.bit_generator.state,
                "div": self.rng_div.bit_generator.state,
            },
            "res": self.reservoir.state(),
            "div": self.diversity.state(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["kind"] != self.kind:
            raise InputError(
                f"state is for kind {state['kind']!r}, not {self.kind!r}")
        self.step_count = int(state["step_count"])
        self.theta_w = np.asarray(state["theta_w"], dtype=np.float64)
        self.rng_ema.bit_generator.state = state["rng"]["ema"]
        self.rng_replay.bit_generator.state = state["rng"]["replay"]
        self.rng_res.bit_generator.state = state["rng"]["res"]
        self.rng_div.bit_generator.state = state["rng"]["div"]
        self.reservoir = ReservoirBuffer.from_state(state["res"])
        self.diversity = DiversityBuffer.from_state(state["div"])


class DualLSTrainer(OnlineTrainer):
    """Dual-memory replay with fast/slow EMA shadows and live distillation.

    Each step: draw from both memories, pick a per-sample teacher from the
    fast/slow pair by smaller loss, take one SGD step on the combined
    loss, stochastically fold the new working weights into the shadows,
    then offer the incoming samples to both memories.
    """

    kind = "dualls"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.theta_f = self.theta_w.copy()
        self.theta_s = self.theta_w.copy()

    def eval_params(self, role: str = "slow") -> Array:
        if role == "working":
            return self.theta_w
        if role == "fast":
            return self.theta_f
        if role == "slow":
            return self.theta_s
        raise ConfigurationError(f"unknown evaluation role {role!r}")

    def _teachers(self, entries):
        """Per-entry teacher rows chosen by smaller shadow-model loss."""
        x, targets = self._entry_rows(entries)
        lf, pf = self.predictor.focal_and_probs_rows(self.theta_f, x, targets)
        ls, ps = self.predictor.focal_and_probs_rows(self.theta_s, x, targets)
        return np.where((lf < ls)[:, None], pf, ps)

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        if not batch:
            raise InputError("batch must be non-empty")
        h = self.hyper
        draws_r, draws_d = sample_joint(self.reservoir, self.diversity, h.k_r, h.k_d,
                                        self.rng_replay)
        replays = []
        if draws_r and (h.alpha_1 > 0 or h.beta_1 > 0):
            replays.append((draws_r, h.alpha_1, h.beta_1, self._teachers(draws_r)))
        if draws_d and (h.alpha_2 > 0 or h.beta_2 > 0):
            replays.append((draws_d, h.alpha_2, h.beta_2, self._teachers(draws_d)))
        result, stream_focal, parts = self._apply(batch, replays)

        u = self.rng_ema.random(2)
        trig_f = bool(u[0] < h.p_fast)
        trig_s = bool(u[1] < h.p_slow)
        if trig_f:
            self.theta_f = ema_update(self.theta_f, self.theta_w, h.decay_fast)
        if trig_s:
            self.theta_s = ema_update(self.theta_s, self.theta_w, h.decay_slow)

        entries = self._entries(batch, result.probs)
        self.reservoir.offer_many(entries, self.rng_res)
        self._offer_diversity(entries)

        kl_r = focal_r = kl_d = focal_d = 0.0
        i = 0
        if draws_r and (h.alpha_1 > 0 or h.beta_1 > 0):
            kl_r, focal_r = parts[i]
            i += 1
        if draws_d and (h.alpha_2 > 0 or h.beta_2 > 0):
            kl_d, focal_d = parts[i]
        info = StepInfo(step=self.step_count, loss=result.loss,
                        stream_focal=stream_focal,
                        replay_kl_r=kl_r, replay_focal_r=focal_r,
                        replay_kl_d=kl_d, replay_focal_d=focal_d,
                        triggered_fast=trig_f, triggered_slow=trig_s,
                        processed=len(batch) + len(draws_r) + len(draws_d))
        self.step_count += 1
        return info

    def state_dict(self) -> dict:
        state = super().state_dict()
        state["theta_f"] = self.theta_f
        state["theta_s"] = self.theta_s
        return state

    def load_state_dict(self, state: dict) -> None:
        super().load_state_dict(state)
        self.theta_f = np.asarray(state["theta_f"], dtype=np.float64)
        self.theta_s = np.asarray(state["theta_s"], dtype=np.float64)


class VanillaTrainer(OnlineTrainer):
    """Plain single-pass SGD; the no-memory reference point."""

    kind = "vanilla"

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        if not batch:
            raise InputError("batch must be non-empty")
        result, stream_focal, _ = self._apply(batch, [])
        info = StepInfo(step=self.step_count, loss=result.loss,
                        stream_focal=stream_focal, processed=len(batch))
        self.step_count += 1
        return info


class DERTrainer(OnlineTrainer):
    """Reservoir replay distilling from outputs stored at insertion time."""

    kind = "der"

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        if not batch:
            raise InputError("batch must be non-empty")
        h = self.hyper
        draws = self.reservoir.sample(h.k_r, self.rng_replay)
        replays = []
        if draws and (h.alpha_1 > 0 or h.beta_1 > 0):
            teachers = np.stack([e.teacher for e in draws])
            replays.append((draws, h.alpha_1, h.beta_1, teachers))
        result, stream_focal, parts = self._apply(batch, replays)
        self.reservoir.offer_many(self._entries(batch, result.probs), self.rng_res)
        kl_r, focal_r = parts[0] if parts else (0.0, 0.0)
        info = StepInfo(step=self.step_count, loss=result.loss,
                        stream_focal=stream_focal,
                        replay_kl_r=kl_r, replay_focal_r=focal_r,
                        processed=len(batch) + len(draws))
        self.step_count += 1
        return info


class GSSTrainer(OnlineTrainer):
    """Diversity-buffer replay on the ground-truth loss only."""

    kind = "gss"

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        if not batch:
            raise InputError("batch must be non-empty")
        h = self.hyper
        draws = self.diversity.sample(h.k_d, self.rng_replay)
        replays = []
        if draws and h.beta_2 > 0:
            replays.append((draws, 0.0, h.beta_2, None))
        result, stream_focal, parts = self._apply(batch, replays)
        self._offer_diversity(self._entries(batch, result.probs))
        _, focal_d = parts[0] if parts else (0.0, 0.0)
        info = StepInfo(step=self.step_count, loss=result.loss,
                        stream_focal=stream_focal, replay_focal_d=focal_d,
                        processed=len(batch) + len(draws))
        self.step_count += 1
        return info


class AGEMTrainer(OnlineTrainer):
    """Gradient projection against a replayed reference gradient."""

    kind = "agem"

    def step(self, batch: Sequence[Sample]) -> StepInfo:
        if not batch:
            raise InputError("batch must be non-empty")
        h = self.hyper
        x, goals, fw, kw, teachers, _ = self._segments(batch, [])
        result = self.predictor.rows_eval(self.theta_w, x, goals, fw, kw, teachers)
        draws = self.reservoir.sample(h.k_r, self.rng_replay)
        g = result.grad
        if draws:
            ref_samples = [e.sample for e in draws]
            xr = self.predictor.encode(ref_samples)
            gr = np.stack([s.goal for s in ref_samples])
            k = len(draws)
            ref = self.predictor.rows_eval(self.theta_w, xr, gr,
                                           np.full(k, 1.0 / k), np.zeros(k), None)
            g = agem_project(g, ref.grad)
        self.theta_w = sgd_step(self.theta_w, g, h.lr)
        self.reservoir.offer_many(self._entries(batch, result.probs), self.rng_res)
        info = StepInfo(step=self.step_count, loss=result.loss,
                        stream_focal=float(result.focal.mean()),
                        processed=len(batch) + len(draws))
        self.step_count += 1
        return info


_TRAINER_CLASSES = {cls.kind: cls for cls in
                    (DualLSTrainer, VanillaTrainer, DERTrainer, GSSTrainer,
                     AGEMTrainer)}


def make_trainer(kind: str, predictor: HeatmapPredictor, hyper: HyperParams,
                 total_budget: int = 1000, reservoir_fraction: float = 0.5,
                 seed: int = 0, score_batch: int = 8) -> OnlineTrainer:
    """Build a learner, assigning the shared memory budget by kind.

    The dual-memory learner splits the budget between its two buffers;
    single-buffer learners get the whole budget in their one buffer; plain
    SGD stores nothing.
    """
    if kind not in TRAINER_KINDS:
        raise ConfigurationError(
            f"unknown trainer kind {kind!r}; expected one of {TRAINER_KINDS}")
    if total_budget < 0:
        raise ConfigurationError("total_budget must be >= 0")
    if not (0.0 <= reservoir_fraction <= 1.0):
        raise ConfigurationError("reservoir_fraction must be in [0, 1]")
    res_cap = div_cap = 0
    if kind == "dualls":
        res_cap = int(round(total_budget * reservoir_fraction))
        div_cap = total_budget - res_cap
    elif kind in ("der", "agem"):
        res_cap = total_budget
    elif kind == "gss":
        div_cap = total_budget
    cls = _TRAINER_CLASSES[kind]
    return cls(predictor, hyper, res_capacity=res_cap, div_capacity=div_cap,
               seed=seed, score_batch=score_batch)


# ---------------------------------------------------------------------------
# Run harness
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    """Everything one (kind, seed) run produces."""

    kind: str
    seed: int
    fde_matrix: ErrorMatrix
    mr_matrix: ErrorMatrix
    trace: list[StepInfo]
    compositions: list[dict]          # {"step", "reservoir", "diversity"}
    processed: int
    wall_time: float
    trainer: OnlineTrainer = field(repr=False)


def run_stream(kind: str, stream: TaskStream, hyper: HyperParams, seed: int,
               total_budget: int = 1000, reservoir_fraction: float = 0.5,
               predictor_config: PredictorConfig | None = None,
               goals_k: int = 6, eval_role: str = "slow",
               composition_every: int = 25, score_batch: int = 8) -> RunResult:
    """Train one learner over the whole stream, single pass, and evaluate.

    After each task's final batch, the evaluation-role parameters are
    scored on every task's test set to fill one row of the FDE and MR
    error matrices. Task boundaries are harness knowledge only; the
    trainer sees an unbroken stream of batches.
    """
    if stream.n_tasks < 1 or stream.total_train < 1:
        raise InputError("stream has no training samples")
    t0 = time.perf_counter()
    d_v, d_s, d_e = stream.feature_dims()
    predictor = HeatmapPredictor(predictor_config or PredictorConfig(),
                                 d_v, d_s, d_e)
    trainer = make_trainer(kind, predictor, hyper, total_budget,
                           reservoir_fraction, seed, score_batch)
    n_tasks = stream.n_tasks
    fde_matrix = ErrorMatrix(n_tasks, "fde")
    mr_matrix = ErrorMatrix(n_tasks, "mr")
    trace: list[StepInfo] = []
    compositions: list[dict] = []
    processed = 0
    role = eval_role if kind == "dualls" else "working"
    for t in range(n_tasks):
        train = stream.train_set(t)
        bs = hyper.batch_size
        for lo in range(0, len(train), bs):
            info = trainer.step(train[lo:lo + bs])
            trace.append(info)
            processed += info.processed
            if composition_every and (info.step + 1) % composition_every == 0:
                compositions.append({"step": info.step + 1,
                                     "reservoir": composition(trainer.reservoir),
                                     "diversity": composition(trainer.diversity)})
        params = trainer.eval_params(role)
        fde_row = []
        mr_row = []
        for j in range(n_tasks):
            r = evaluate_model(predictor, params, stream.test_set(j), goals_k)
            fde_row.append(r.fde)
            mr_row.append(r.mr)
        fde_matrix.fill_row(t, fde_row)
        mr_matrix.fill_row(t, mr_row)
    return RunResult(kind=kind, seed=seed, fde_matrix=fde_matrix,
                     mr_matrix=mr_matrix, trace=trace,
                     compositions=compositions, processed=processed,
                     wall_time=time.perf_counter() - t0, trainer=trainer)
