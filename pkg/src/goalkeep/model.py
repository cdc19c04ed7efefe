"""Differentiable goal-heatmap predictor.

A small fully connected network maps per-sample features (agent histories
plus a map encoding) to a softmax distribution over a fixed spatial grid.
Everything is float64 and the gradient is computed by explicit
backpropagation, so it can be checked against central finite differences
to tight tolerances.

Parameters live in a single flat vector (a "ParamVector"), which is the
unit of SGD, EMA averaging and gradient cosine arithmetic elsewhere in
the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, InternalError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One stream observation.

    ``dynamic`` is a (d_v, d_s) matrix of agent features (row 0 is the
    target agent), ``static`` a (d_e,) map encoding. ``goal`` is the
    ground-truth 2-D goal position in metres, in the sample's local frame
    (the grid is centred on the origin of that frame). ``speed`` is the
    target agent's speed in m/s at prediction time.

    ``task_id`` exists for evaluation-side bookkeeping only. Trainers must
    never read it; the harness test suite enforces this dynamically.
    """

    dynamic: Array
    static: Array
    goal: Array
    speed: float
    task_id: int

    def __post_init__(self):
        if self.speed < 0:
            raise InputError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class Heatmap:
    """Non-parametric goal distribution over an l x w grid.

    ``values[ix, iy]`` is the probability mass of the cell whose centre is
    ``origin + ((ix + 0.5) * cell_size, (iy + 0.5) * cell_size)``. Cells are
    square. The flat (row-major) index of cell (ix, iy) is ``ix * w + iy``.
    """

    values: Array
    origin: Array
    cell_size: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def validate(self, tol: float = 1e-6) -> None:
        l, w = self.values.shape
        if l < 2 or w < 2:
            raise ConfigurationError(f"grid must be at least 2x2, got {l}x{w}")
        if np.any(self.values < 0):
            raise InputError("heatmap has negative cells")
        total = float(self.values.sum())
        if abs(total - 1.0) > tol:
            raise InputError(f"heatmap mass {total} is not 1 within {tol}")

    def flat(self) -> Array:
        return self.values.reshape(-1)

    def cell_centers(self) -> Array:
        """(l*w, 2) array of cell centres in metres, row-major order."""
        return grid_cell_centers(self.values.shape[0], self.values.shape[1],
                                 self.origin, self.cell_size)


@dataclass(frozen=True)
class PredictorConfig:
    """Architecture and loss hyperparameters of the heatmap predictor."""

    grid_l: int = 16
    grid_w: int = 16
    cell_size: float = 4.0          # metres per cell (square cells)
    hidden: tuple[int, ...] = (64, 64)
    focal_gamma: float = 2.0        # focusing exponent; 0 reduces to cross-entropy
    target_sigma_cells: float = 1.0  # Gaussian splat radius of the target, in cells
    kl_epsilon: float = 1e-8        # clamping floor inside the KL divergence

    def __post_init__(self):
        if self.grid_l < 2 or self.grid_w < 2:
            raise ConfigurationError("grid_l and grid_w must be >= 2")
        if self.cell_size <= 0:
            raise ConfigurationError("cell_size must be positive")
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigurationError("hidden must be two positive layer widths")
        if self.focal_gamma < 0:
            raise ConfigurationError("focal_gamma must be >= 0")
        if self.target_sigma_cells <= 0:
            raise ConfigurationError("target_sigma_cells must be > 0")
        if not (0.0 < self.kl_epsilon <= 1e-3):
            raise ConfigurationError("kl_epsilon must be in (0, 1e-3]")

    @property
    def n_cells(self) -> int:
        return self.grid_l * self.grid_w

    @property
    def grid_origin(self) -> Array:
        """Lower corner of the grid; the window is centred on the origin."""
        return np.array([-0.5 * self.grid_l * self.cell_size,
                         -0.5 * self.grid_w * self.cell_size])


@dataclass(frozen=True)
class LossSpec:
    """Weights of the per-row loss ``focal_weight * focal + kl_weight * KL``.

    ``teachers`` supplies the KL reference distribution per row as an
    (n, l*w) array of probabilities; required when ``kl_weight`` is nonzero.
    """

    focal_weight: float = 1.0
    kl_weight: float = 0.0
    teachers: Array | None = None


FOCAL = LossSpec()


def grid_cell_centers(l: int, w: int, origin: Array, cell_size: float) -> Array:
    ix, iy = np.meshgrid(np.arange(l), np.arange(w), indexing="ij")
    cx = origin[0] + (ix.reshape(-1) + 0.5) * cell_size
    cy = origin[1] + (iy.reshape(-1) + 0.5) * cell_size
    return np.stack([cx, cy], axis=1)


# ---------------------------------------------------------------------------
# Loss primitives (probability space)
# ---------------------------------------------------------------------------


def splat_targets(goals: Array, l: int, w: int, origin: Array,
                  cell_size: float, sigma_cells: float) -> Array:
    """Gaussian-splatted target distributions, one row per goal.

    With ``sigma_cells == 0`` the splat degenerates to a one-hot on the
    cell containing the goal. Goals outside the grid raise InputError.
    """
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    extent = np.array([l, w]) * cell_size
    rel = goals - origin
    if np.any(rel < 0) or np.any(rel >= extent):
        raise InputError("goal lies outside the heatmap grid extent")
    if sigma_cells == 0:
        idx = np.floor(rel / cell_size).astype(int)
        flat = idx[:, 0] * w + idx[:, 1]
        out = np.zeros((goals.shape[0], l * w))
        out[np.arange(goals.shape[0]), flat] = 1.0
        return out
    centers = grid_cell_centers(l, w, origin, cell_size)
    sigma_m = sigma_cells * cell_size
    d2 = ((goals[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    t = np.exp(-d2 / (2.0 * sigma_m ** 2))
    return t / t.sum(axis=1, keepdims=True)


def _focal_values(probs: Array, logp: Array, targets: Array, gamma: float) -> Array:
    """Per-row focal loss sum_c t_c * (1 - p_c)^gamma * (-log p_c).

    Cells with zero target weight contribute exactly 0 even when the
    predicted probability there is 0 (so logp is -inf).
    """
    if gamma == 0.0:
        core = targets * logp
    else:
        core = targets * (1.0 - probs) ** gamma * logp
    return -np.where(targets > 0, core, 0.0).sum(axis=1)


def _focal_dprobs(probs: Array, logp: Array, targets: Array, gamma: float) -> Array:
    """d(focal)/d(probs), matching _focal_values exactly."""
    if gamma == 0.0:
        return -targets / probs
    om = 1.0 - probs
    return targets * (gamma * om ** (gamma - 1.0) * logp - om ** gamma / probs)


def _kl_clamped(teacher: Array, student: Array, eps: float) -> Array:
    """Per-row KL(teacher || student), both clamped at eps and renormalized.

    Renormalizing after the clamp keeps the result a true KL divergence of
    two distributions, hence >= 0 for every input (the raw clamped sum can
    dip below zero when the teacher has sub-eps cells).
    """
    t = np.maximum(teacher, eps)
    t = t / t.sum(axis=1, keepdims=True)
    s = np.maximum(student, eps)
    s = s / s.sum(axis=1, keepdims=True)
    return (t * (np.log(t) - np.log(s))).sum(axis=1)


def _kl_dstudent(teacher: Array, student: Array, eps: float) -> Array:
    """d(_kl_clamped)/d(student); zero where the student clamp is active."""
    t = np.maximum(teacher, eps)
    t = t / t.sum(axis=1, keepdims=True)
    m = np.maximum(student, eps)
    z = m.sum(axis=1, keepdims=True)
    active = (student > eps).astype(np.float64)
    return (1.0 / z - t / m) * active


def focal_loss(pred: Heatmap, goal: Array, gamma: float = 2.0,
               sigma_cells: float = 1.0) -> float:
    """Penalty-reduced focal loss of a heatmap against a splatted 2-D goal.

    ``sigma_cells = 0`` places the whole target mass on the goal's cell, in
    which case gamma = 0 reduces the loss to plain cross-entropy there.
    """
    pred.validate()
    l, w = pred.shape
    targets = splat_targets(np.asarray(goal, dtype=np.float64), l, w,
                            pred.origin, pred.cell_size, sigma_cells)
    p = pred.flat()[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(np.maximum(p, np.finfo(float).tiny)), -np.inf)
        vals = _focal_values(p, logp, targets, gamma)
    return float(vals[0])


def kl_divergence(teacher, student, eps: float = 1e-8) -> float:
    """KL(teacher || student) in probability space, clamped at ``eps``.

    Accepts Heatmaps or plain probability vectors of matching size. Zero
    when the distributions are identical; always >= 0.
    """
    t = teacher.flat() if isinstance(teacher, Heatmap) else \
        np.asarray(teacher, dtype=np.float64).reshape(-1)
    s = student.flat() if isinstance(student, Heatmap) else \
        np.asarray(student, dtype=np.float64).reshape(-1)
    if t.shape != s.shape:
        raise InputError(f"shape mismatch: {t.shape} vs {s.shape}")
    return float(_kl_clamped(t[None, :], s[None, :], eps)[0])


def sgd_step(params: Array, grad: Array, lr: float) -> Array:
    """One plain gradient-descent step: params - lr * grad."""
    if params.shape != grad.shape:
        raise InternalError(f"length mismatch: {params.shape} vs {grad.shape}")
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    return params - lr * grad


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------


@dataclass
class RowsResult:
    """Outcome of one evaluation pass over a set of weighted rows."""

    probs: Array                 # (n, C) softmax outputs
    focal: Array                 # (n,) per-row focal losses
    kl: Array                    # (n,) per-row KL losses (0 where unweighted)
    loss: float                  # sum of weighted row losses
    grad: Array | None = None    # flat gradient of `loss` w.r.t. params


class HeatmapPredictor:
    """Two-hidden-layer tanh network from flattened features to grid logits.

    The class is stateless apart from its configuration: parameters are
    always passed in explicitly as a flat float64 vector, so predictor
    instances can be shared freely across threads.
    """

    def __init__(self, config: PredictorConfig, d_v: int, d_s: int, d_e: int):
        if d_v < 1 or d_s < 1 or d_e < 1:
            raise ConfigurationError("feature dimensions must be >= 1")
        self.config = config
        self.d_v = d_v
        self.d_s = d_s
        self.d_e = d_e
        self.d_in = d_v * d_s + d_e
        h1, h2 = config.hidden
        c = config.n_cells
        self._shapes = [(self.d_in, h1), (h1,), (h1, h2), (h2,), (h2, c), (c,)]
        sizes = [int(np.prod(s)) for s in self._shapes]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_params = int(self._offsets[-1])
        self._centers = grid_cell_centers(config.grid_l, config.grid_w,
                                          config.grid_origin, config.cell_size)

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> Array:
        """Gaussian fan-in initialization; biases start at zero."""
        params = np.zeros(self.n_params)
        for k, shape in enumerate(self._shapes):
            if len(shape) == 2:
                fan_in = shape[0]
                block = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
                params[self._offsets[k]:self._offsets[k + 1]] = block.reshape(-1)
        return params

    def _unpack(self, params: Array):
        if params.shape != (self.n_params,):
            raise ConfigurationError(
                f"expected {self.n_params} parameters, got {params.shape}")
        views = []
        for k, shape in enumerate(self._shapes):
            views.append(params[self._offsets[k]:self._offsets[k + 1]].reshape(shape))
        return views

    # -- encoding and forward -----------------------------------------------

    def encode(self, samples: Sequence[Sample]) -> Array:
        """Stack samples into an (n, d_in) feature matrix."""
        rows = np.empty((len(samples), self.d_in))
        for i, s in enumerate(samples):
            dyn = np.asarray(s.dynamic, dtype=np.float64)
            sta = np.asarray(s.static, dtype=np.float64)
            if dyn.shape != (self.d_v, self.d_s) or sta.shape != (self.d_e,):
                raise ConfigurationError(
                    f"sample features {dyn.shape}/{sta.shape} do not match "
                    f"predictor dims ({self.d_v},{self.d_s})/({self.d_e},)")
            rows[i, :self.d_v * self.d_s] = dyn.reshape(-1)
            rows[i, self.d_v * self.d_s:] = sta
        return rows

    def _forward(self, params: Array, x: Array):
        w1, b1, w2, b2, w3, b3 = self._unpack(params)
        a1 = np.tanh(x @ w1 + b1)
        a2 = np.tanh(a1 @ w2 + b2)
        z = a2 @ w3 + b3
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        denom = ez.sum(axis=1, keepdims=True)
        probs = ez / denom
        logp = (z - zmax) - np.log(denom)
        return a1, a2, probs, logp

    def predict_probs(self, params: Array, x: Array) -> Array:
        """Softmax outputs for an (n, d_in) feature matrix."""
        return self._forward(params, x)[2]

    def forward(self, params: Array, sample: Sample) -> Heatmap:
        """Normalized goal heatmap for one sample; pure and deterministic."""
        probs = self.predict_probs(params, self.encode([sample]))[0]
        return self.heatmap_from_probs(probs)

    def heatmap_from_probs(self, probs: Array) -> Heatmap:
        cfg = self.config
        return Heatmap(values=probs.reshape(cfg.grid_l, cfg.grid_w),
                       origin=cfg.grid_origin, cell_size=cfg.cell_size)

    def _splat(self, goals: Array) -> Array:
        cfg = self.config
        goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
        extent = np.array([cfg.grid_l, cfg.grid_w]) * cfg.cell_size
        rel = goals - cfg.grid_origin
        if np.any(rel < 0) or np.any(rel >= extent):
            raise InputError("goal lies outside the heatmap grid extent")
        sigma_m = cfg.target_sigma_cells * cfg.cell_size
        d2 = ((goals[:, None, :] - self._centers[None, :, :]) ** 2).sum(axis=2)
        t = np.exp(-d2 / (2.0 * sigma_m ** 2))
        return t / t.sum(axis=1, keepdims=True)

    # -- losses and gradients -------------------------------------------------

    def rows_eval(self, params: Array, x: Array, goals: Array,
                  focal_w: Array, kl_w: Array, teachers: Array | None,
                  need_grad: bool = True) -> RowsResult:
        """Evaluate ``sum_r focal_w[r]*focal_r + kl_w[r]*KL_r`` and its gradient.

        This is the single numeric path shared by every trainer: the stream
        term, the replay ground-truth terms and the replay distillation terms
        are all rows with different weights. ``teachers`` holds per-row
        reference distributions and may be None when all ``kl_w`` are zero.
        """
        cfg = self.config
        a1, a2, probs, logp = self._forward(params, x)
        targets = self._splat(goals)
        focal_vals = _focal_values(probs, logp, targets, cfg.focal_gamma)
        if teachers is not None:
            kl_vals = _kl_clamped(teachers, probs, cfg.kl_epsilon)
        else:
            kl_vals = np.zeros(len(x))
        loss = float(focal_vals @ focal_w + kl_vals @ kl_w)
        result = RowsResult(probs=probs, focal=focal_vals, kl=kl_vals, loss=loss)
        if not need_grad:
            return result
        gp = focal_w[:, None] * _focal_dprobs(probs, logp, targets, cfg.focal_gamma)
        if teachers is not None:
            gp = gp + kl_w[:, None] * _kl_dstudent(teachers, probs, cfg.kl_epsilon)
        dz = probs * (gp - (probs * gp).sum(axis=1, keepdims=True))
        result.grad = self._backward(params, x, a1, a2, dz)
        return result

    def _backward(self, params: Array, x: Array, a1: Array, a2: Array,
                  dz3: Array) -> Array:
        w1, b1, w2, b2, w3, b3 = self._unpack(params)
        grad = np.empty(self.n_params)
        gw3 = a2.T @ dz3
        gb3 = dz3.sum(axis=0)
        da2 = dz3 @ w3.T
        dz2 = da2 * (1.0 - a2 * a2)
        gw2 = a1.T @ dz2
        gb2 = dz2.sum(axis=0)
        da1 = dz2 @ w2.T
        dz1 = da1 * (1.0 - a1 * a1)
        gw1 = x.T @ dz1
        gb1 = dz1.sum(axis=0)
        o = self._offsets
        for k, block in enumerate((gw1, gb1, gw2, gb2, gw3, gb3)):
            grad[o[k]:o[k + 1]] = block.reshape(-1)
        return grad

    def loss(self, params: Array, batch: Sequence[Sample],
             spec: LossSpec = FOCAL) -> float:
        """Mean batch loss under ``spec`` (the quantity ``grad`` differentiates)."""
        if len(batch) == 0:
            raise InputError("batch must be non-empty")
        n = len(batch)
        x = self.encode(batch)
        goals = np.stack([s.goal for s in batch])
        fw = np.full(n, spec.focal_weight / n)
        kw = np.full(n, spec.kl_weight / n)
        teachers = spec.teachers if spec.kl_weight != 0.0 else None
        return self.rows_eval(params, x, goals, fw, kw, teachers,
                              need_grad=False).loss

    def grad(self, params: Array, batch: Sequence[Sample],
             spec: LossSpec = FOCAL) -> Array:
        """Gradient of the mean batch loss as a flat vector of length P."""
        if len(batch) == 0:
            raise InputError("batch must be non-empty")
        n = len(batch)
        x = self.encode(batch)
        goals = np.stack([s.goal for s in batch])
        fw = np.full(n, spec.focal_weight / n)
        kw = np.full(n, spec.kl_weight / n)
        teachers = spec.teachers if spec.kl_weight != 0.0 else None
        return self.rows_eval(params, x, goals, fw, kw, teachers).grad

    def sample_rows(self, samples: Sequence[Sample]) -> tuple[Array, Array]:
        """Parameter-independent (features, target) rows for a sample list.

        Callers that evaluate the same samples under changing parameters
        (replay teachers, buffer scoring) can compute these once and reuse
        them; the result is identical to encoding and splatting inline.
        """
        x = self.encode(samples)
        goals = np.stack([s.goal for s in samples])
        return x, self._splat(goals)

    def focal_and_probs(self, params: Array,
                        samples: Sequence[Sample]) -> tuple[Array, Array]:
        """Per-sample focal losses and softmax outputs in one forward pass."""
        x, targets = self.sample_rows(samples)
        return self.focal_and_probs_rows(params, x, targets)

    def focal_and_probs_rows(self, params: Array, x: Array,
                             targets: Array) -> tuple[Array, Array]:
        _, _, probs, logp = self._forward(params, x)
        return _focal_values(probs, logp, targets, self.config.focal_gamma), probs

    def per_sample_grads(self, params: Array, samples: Sequence[Sample]) -> Array:
        """(n, P) matrix of each sample's own focal-loss gradient.

        Used by gradient-diversity buffer maintenance, where the cosine
        similarity between individual sample gradients is the score.
        """
        x, targets = self.sample_rows(samples)
        return self.per_sample_grads_rows(params, x, targets)

    def per_sample_grads_rows(self, params: Array, x: Array,
                              targets: Array) -> Array:
        cfg = self.config
        w1, b1, w2, b2, w3, b3 = self._unpack(params)
        a1, a2, probs, logp = self._forward(params, x)
        gp = _focal_dprobs(probs, logp, targets, cfg.focal_gamma)
        dz3 = probs * (gp - (probs * gp).sum(axis=1, keepdims=True))
        da2 = dz3 @ w3.T
        dz2 = da2 * (1.0 - a2 * a2)
        da1 = dz2 @ w2.T
        dz1 = da1 * (1.0 - a1 * a1)
        n = len(x)
        out = np.empty((n, self.n_params))
        o = self._offsets
        pairs = [(x, dz1), (None, dz1), (a1, dz2), (None, dz2), (a2, dz3), (None, dz3)]
        for k, (act, dz) in enumerate(pairs):
            if act is None:
                out[:, o[k]:o[k + 1]] = dz
            else:
                out[:, o[k]:o[k + 1]] = np.einsum("si,sj->sij", act, dz).reshape(n, -1)
        return out

    def grad_factors_rows(self, params: Array, x: Array,
                          targets: Array) -> tuple[list[Array], list[Array]]:
        """Factorized per-sample focal gradients: per-layer (acts, deltas).

        A sample's flat gradient is the concatenation over layers of
        ``vec(act ⊗ dz)`` (weights) and ``dz`` (biases), so the inner
        product of two samples' gradients is
        ``sum_k (act_k·act'_k + 1) (dz_k·dz'_k)``. Returns ``(acts, dzs)``
        with ``acts = [x, a1, a2]`` and ``dzs = [dz1, dz2, dz3]``, letting
        callers compute exact pairwise gradient geometry without ever
        materializing (n, P) matrices.
        """
        w1, b1, w2, b2, w3, b3 = self._unpack(params)
        a1, a2, probs, logp = self._forward(params, x)
        gp = _focal_dprobs(probs, logp, targets, self.config.focal_gamma)
        dz3 = probs * (gp - (probs * gp).sum(axis=1, keepdims=True))
        dz2 = (dz3 @ w3.T) * (1.0 - a2 * a2)
        dz1 = (dz2 @ w2.T) * (1.0 - a1 * a1)
        return [x, a1, a2], [dz1, dz2, dz3]

    @staticmethod
    def sketch_from_factors(acts: Sequence[Array], dzs: Sequence[Array]) -> Array:
        """Rows whose pairwise inner products equal the gradient Gram matrix.

        Built by eigendecomposing the exact (n, n) Gram computed from the
        factor identity, so cosine-based consumers see the same geometry
        as with full (n, P) gradient rows at a fraction of the cost.
        """
        n = len(acts[0])
        gram = np.zeros((n, n))
        for act, dz in zip(acts, dzs):
            gram += (act @ act.T + 1.0) * (dz @ dz.T)
        vals, vecs = np.linalg.eigh(gram)
        return vecs * np.sqrt(np.maximum(vals, 0.0))

    def grad_sketch_rows(self, params: Array, x: Array, targets: Array) -> Array:
        """Per-sample gradient sketches; see ``sketch_from_factors``."""
        return self.sketch_from_factors(*self.grad_factors_rows(params, x, targets))

    def focal_grad_fn(self, params: Array) -> Callable[[Sequence[Sample]], Array]:
        """Per-sample gradient closure over a fixed parameter vector."""
        return lambda samples: self.per_sample_grads(params, samples)
