"""Task-stream construction for single-pass continual learning runs.

A stream is an ordered list of tasks, each with train/test sample sets.
Tasks come from either a synthetic scenario family (the default
benchmark) or CSV trajectory tables. Training samples are delivered
strictly in task order and each task's data differs from every other
task's in at least one distribution parameter, so the stream is genuinely
domain-incremental.

Synthetic family: the target agent moves with a task-specific speed range
and a random heading; its goal is the current velocity scaled to a fixed
horizon and rotated by the task's field rotation, plus noise. Nothing in
the features identifies the task, so the same velocity maps to different
goals in different tasks: sequential training on later tasks actively
overwrites earlier goal fields, which is what makes single-pass training
forget. A learner that retains past samples can instead spread heatmap
mass over several rotated candidates and stay accurate on every task
through the min-over-K goal extraction.

All features are normalized: positions by 32 m, velocities by 12 m/s.
The goal is expressed relative to the agent's current position, matching
the default 64 m prediction window centered on the agent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .model import Sample

D_V = 4                  # feature rows per sample: target agent + 3 neighbours
D_S = 12                 # per-agent features: 5 history points (x, y) + (vx, vy)
D_E = 8                  # static (map) feature length
HISTORY_TIMES = np.array([-0.8, -0.6, -0.4, -0.2, 0.0])   # seconds
GOAL_HORIZON = 3.0       # seconds ahead for the goal position
POS_SCALE = 32.0         # metres; also the half-extent of the default grid
VEL_SCALE = 12.0         # m/s
GOAL_CLIP = 31.9         # keep synthetic goals strictly inside the window

NEIGHBOR_SPREAD = 20.0   # metres, uniform box for synthetic neighbour agents
STATIC_SPREAD = 0.3      # std of the uninformative static context features

CSV_COLUMNS = ("case_id", "agent_id", "frame", "x", "y", "vx", "vy", "is_target")
CSV_HZ = 10              # frames per second in ingested tables
HIST_FRAMES = 10         # 1 s of history
HORIZON_FRAMES = 30      # 3 s to the goal


@dataclass(frozen=True)
class TaskSpec:
    """One task's generator parameters.

    ``kind`` is "synthetic" or "csv". Synthetic tasks use the distribution
    parameters; CSV tasks load ``csv_path`` and split it into train/test by
    ``test_fraction`` (their n_train/n_test are derived, not configured).
    """

    task_id: int
    n_train: int = 2000
    n_test: int = 500
    kind: str = "synthetic"
    rotation_deg: float = 0.0
    speed_range: tuple[float, float] = (2.0, 5.5)
    agent_count_range: tuple[int, int] = (0, 3)
    noise_scale: float = 1.0
    heading_spread: float = math.pi / 2
    csv_path: str | None = None
    csv_stride: int = 1
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.n_train < 1 or self.n_test < 1:
                raise ConfigurationError("n_train and n_test must be >= 1")
            lo, hi = self.speed_range
            if not (0 <= lo < hi):
                raise ConfigurationError(
                    f"speed_range must satisfy 0 <= lo < hi, got {self.speed_range}")
            alo, ahi = self.agent_count_range
            if not (0 <= alo <= ahi <= D_V - 1):
                raise ConfigurationError(
                    f"agent_count_range must lie in [0, {D_V - 1}]")
            if self.noise_scale < 0:
                raise ConfigurationError("noise_scale must be >= 0")
            if not (0 < self.heading_spread <= math.pi):
                raise ConfigurationError("heading_spread must be in (0, pi]")
        else:
            if not self.csv_path:
                raise ConfigurationError("csv task needs csv_path")
            if self.csv_stride < 1:
                raise ConfigurationError("csv_stride must be >= 1")
            if not (0 < self.test_fraction < 1):
                raise ConfigurationError("test_fraction must be in (0, 1)")

    def distribution_key(self) -> tuple:
        if self.kind == "csv":
            return ("csv", self.csv_path)
        return ("synthetic", self.rotation_deg, self.speed_range,
                self.agent_count_range, self.noise_scale, self.heading_spread)


def rotation_matrix(deg: float) -> np.ndarray:
    rad = math.radians(deg)
    c, s = math.cos(rad), math.sin(rad)
    return np.array([[c, -s], [s, c]])


def closed_form_goal(sample: Sample, rotation_deg: float) -> np.ndarray:
    """The noise-free goal implied by a synthetic sample's own features."""
    vel = np.asarray(sample.dynamic)[0, -2:] * VEL_SCALE
    return GOAL_HORIZON * (rotation_matrix(rotation_deg) @ vel)


def generate_synthetic(spec: TaskSpec, seed) -> tuple[list[Sample], list[Sample]]:
    """Materialize one synthetic task; returns (train, test) sample lists.

    Deterministic given (spec, seed): the same pair always produces
    bit-identical samples.
    """
    if spec.kind != "synthetic":
        raise ConfigurationError("generate_synthetic needs a synthetic spec")
    rng = np.random.default_rng(seed)
    n = spec.n_train + spec.n_test
    ns = spec.noise_scale
    lo, hi = spec.speed_range

    speeds = rng.uniform(lo, hi, n)
    phis = rng.uniform(-spec.heading_spread, spec.heading_spread, n)
    vels = speeds[:, None] * np.stack([np.cos(phis), np.sin(phis)], axis=1)

    rot = rotation_matrix(spec.rotation_deg)
    goals = GOAL_HORIZON * vels @ rot.T
    goals = goals + rng.normal(0.0, 0.5 * ns, (n, 2)) if ns > 0 else goals
    goals = np.clip(goals, -GOAL_CLIP, GOAL_CLIP)

    # Target history: constant-velocity track around the current position.
    hist = vels[:, None, :] * HISTORY_TIMES[None, :, None]     # (n, 5, 2)
    if ns > 0:
        hist = hist + rng.normal(0.0, 0.2 * ns, hist.shape)

    alo, ahi = spec.agent_count_range
    counts = rng.integers(alo, ahi + 1, n)
    npos = rng.uniform(-NEIGHBOR_SPREAD, NEIGHBOR_SPREAD, (n, D_V - 1, 2))
    nphi = rng.uniform(-math.pi, math.pi, (n, D_V - 1))
    nspd = rng.uniform(lo, hi, (n, D_V - 1))
    nvel = nspd[:, :, None] * np.stack([np.cos(nphi), np.sin(nphi)], axis=2)
    nhist = npos[:, :, None, :] + nvel[:, :, None, :] * HISTORY_TIMES[None, None, :, None]
    if ns > 0:
        nhist = nhist + rng.normal(0.0, 0.2 * ns, nhist.shape)
    present = np.arange(D_V - 1)[None, :] < counts[:, None]    # (n, 3)

    # Static context carries no task information; every task draws it from
    # the same distribution, so rotations can only be told apart by history.
    static = rng.normal(0.0, STATIC_SPREAD, (n, D_E))

    dynamic = np.zeros((n, D_V, D_S))
    dynamic[:, 0, :10] = hist.reshape(n, 10) / POS_SCALE
    dynamic[:, 0, 10:] = vels / VEL_SCALE
    dynamic[:, 1:, :10] = np.where(present[:, :, None],
                                   nhist.reshape(n, D_V - 1, 10) / POS_SCALE, 0.0)
    dynamic[:, 1:, 10:] = np.where(present[:, :, None], nvel / VEL_SCALE, 0.0)

    samples = [
        Sample(dynamic=dynamic[i], static=static[i], goal=goals[i],
               speed=float(speeds[i]), task_id=spec.task_id)
        for i in range(n)
    ]
    return samples[:spec.n_train], samples[spec.n_train:]


def load_csv(path: str, stride: int = 1, task_id: int = 0,
             ) -> tuple[list[Sample], int]:
    """Window a trajectory table into (1 s history -> 3 s goal) samples.

    Expected header: case_id, agent_id, frame, x, y, vx, vy, is_target
    (frames at 10 Hz; is_target marks exactly one agent per case). Returns
    (samples, warning_count); malformed rows, ambiguous cases, and windows
    whose goal leaves the prediction window are skipped and counted. An
    empty table yields ([], 0).
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    rows = []
    warnings = 0
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(CSV_COLUMNS):
            raise InputError(
                f"header must be exactly {','.join(CSV_COLUMNS)}, got {reader.fieldnames}")
        for raw in reader:
            try:
                rows.append((
                    raw["case_id"].strip(), raw["agent_id"].strip(),
                    int(raw["frame"]), float(raw["x"]), float(raw["y"]),
                    float(raw["vx"]), float(raw["vy"]),
                    int(raw["is_target"]),
                ))
            except (ValueError, AttributeError, KeyError, TypeError):
                warnings += 1
    cases: dict[str, dict[str, dict[int, tuple]]] = {}
    targets: dict[str, set[str]] = {}
    for case, agent, frame, x, y, vx, vy, is_t in rows:
        cases.setdefault(case, {}).setdefault(agent, {})[frame] = (x, y, vx, vy)
        if is_t:
            targets.setdefault(case, set()).add(agent)

    samples: list[Sample] = []
    for case in cases:
        tset = targets.get(case, set())
        if len(tset) != 1:
            warnings += 1
            continue
        target = next(iter(tset))
        track = cases[case][target]
        frames = sorted(track)
        s = frames[0]
        last = frames[-1]
        while s + HIST_FRAMES - 1 + HORIZON_FRAMES <= last:
            made, warned = _window_sample(cases[case], target, track, s, task_id)
            if made is not None:
                samples.append(made)
            warnings += warned
            s += stride
    return samples, warnings


def _window_sample(case_tracks, target, track, s, task_id):
    """Build one windowed sample starting at frame s, or (None, warned)."""
    p = s + HIST_FRAMES - 1                      # prediction frame
    hist_frames = [s + 1, s + 3, s + 5, s + 7, p]
    goal_frame = p + HORIZON_FRAMES
    needed = hist_frames + [goal_frame]
    if any(fr not in track for fr in needed):
        return None, 0                           # structural gap, not a bad row
    ox, oy, ovx, ovy = track[p]
    origin = np.array([ox, oy])
    goal = np.array(track[goal_frame][:2]) - origin
    if np.any(np.abs(goal) > GOAL_CLIP):
        return None, 1                           # goal outside the window
    dynamic = np.zeros((D_V, D_S))
    dynamic[0] = _agent_row(track, hist_frames, p, origin)
    others = []
    for agent, atrack in case_tracks.items():
        if agent == target or any(fr not in atrack for fr in hist_frames):
            continue
        apos = np.array(atrack[p][:2])
        others.append((float(np.linalg.norm(apos - origin)), agent))
    others.sort()
    for row, (_, agent) in enumerate(others[:D_V - 1], start=1):
        dynamic[row] = _agent_row(case_tracks[agent], hist_frames, p, origin)
    speed = float(np.hypot(ovx, ovy))
    return Sample(dynamic=dynamic, static=np.zeros(D_E), goal=goal,
                  speed=speed, task_id=task_id), 0


def _agent_row(track, hist_frames, p, origin):
    row = np.empty(D_S)
    for i, fr in enumerate(hist_frames):
        row[2 * i:2 * i + 2] = (np.array(track[fr][:2]) - origin) / POS_SCALE
    row[10:] = np.array(track[p][2:]) / VEL_SCALE
    return row


@dataclass
class TaskStream:
    """An ordered task sequence with lazily materialized train/test splits.

    (specs, seed) fully determine every sample; materialization is cached.
    Trainers only ever see the training samples, in task order.
    """

    specs: list[TaskSpec]
    seed: int = 0
    _train: dict = field(default_factory=dict, repr=False, compare=False)
    _test: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.specs:
            raise ConfigurationError("a stream needs at least one task")
        for i, spec in enumerate(self.specs):
            if spec.task_id != i:
                raise ConfigurationError(
                    f"task_id must equal stream position; spec {i} has {spec.task_id}")
        keys = [s.distribution_key() for s in self.specs]
        if len(set(keys)) != len(keys):
            raise ConfigurationError(
                "distinct tasks must differ in at least one distribution parameter")

    @property
    def n_tasks(self) -> int:
        return len(self.specs)

    def _materialize(self, t: int) -> None:
        if t in self._train:
            return
        spec = self.specs[t]
        child = np.random.SeedSequence(self.seed).spawn(self.n_tasks)[t]
        if spec.kind == "synthetic":
            train, test = generate_synthetic(spec, child)
        else:
            samples, _ = load_csv(spec.csv_path, stride=spec.csv_stride,
                                  task_id=spec.task_id)
            rng = np.random.default_rng(child)
            order = rng.permutation(len(samples)) if samples else []
            samples = [samples[i] for i in order]
            n_test = int(round(spec.test_fraction * len(samples)))
            train, test = samples[:len(samples) - n_test], samples[len(samples) - n_test:]
            if not train or not test:
                raise InputError(
                    f"csv task {t} yields {len(train)} train / {len(test)} test "
                    "samples; both must be >= 1")
        self._train[t] = train
        self._test[t] = test

    def train_set(self, t: int) -> list[Sample]:
        self._materialize(t)
        return self._train[t]

    def test_set(self, t: int) -> list[Sample]:
        self._materialize(t)
        return self._test[t]

    @property
    def total_train(self) -> int:
        return sum(len(self.train_set(t)) for t in range(self.n_tasks))

    def feature_dims(self) -> tuple[int, int, int]:
        return D_V, D_S, D_E


def stream_batches(stream: TaskStream, batch_size: int) -> Iterator[list[Sample]]:
    """Yield training batches strictly in task order, each sample once.

    Batches never span a task boundary; the final batch of a task may be
    partial.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    for t in range(stream.n_tasks):
        train = stream.train_set(t)
        for lo in range(0, len(train), batch_size):
            yield train[lo:lo + batch_size]


def task_boundaries(stream: TaskStream, batch_size: int) -> list[int]:
    """1-based step indices at which each task's last batch completes."""
    steps = 0
    out = []
    for t in range(stream.n_tasks):
        steps += -(-len(stream.train_set(t)) // batch_size)
        out.append(steps)
    return out


def default_benchmark(n_train: int = 2000, n_test: int = 500, seed: int = 7,
                      noise_scale: float = 1.0, n_tasks: int = 8) -> TaskStream:
    """The 8-task rotation benchmark used throughout the test suite.

    Tasks share the heading distribution but differ in goal-field rotation
    (45 degrees apart) and speed range (shifted 0.6 m/s per task), so
    feature distributions are statistically distinguishable and later
    tasks actively contradict earlier ones.
    """
    specs = [
        TaskSpec(task_id=t, n_train=n_train, n_test=n_test,
                 rotation_deg=45.0 * t,
                 speed_range=(2.0 + 0.6 * t, 5.5 + 0.6 * t),
                 noise_scale=noise_scale)
        for t in range(n_tasks)
    ]
    return TaskStream(specs=specs, seed=seed)
