"""Bounded replay memories for single-pass streams.

Two maintenance policies are provided:

* ``ReservoirBuffer`` keeps a uniform subsample of everything offered so
  far: after N offers every item has inclusion probability m/N.
* ``DiversityBuffer`` scores each candidate by how redundant its loss
  gradient is with the gradients of stored entries and prefers to keep a
  set of mutually dissimilar (nearly orthogonal or opposing) gradients.

Both buffers treat stored items as opaque payloads; trainers store
``BufferEntry`` records but tests may store plain ints. All randomness
comes from an explicitly passed ``numpy.random.Generator``, and every
overflow decision consumes a fixed, documented number of uniform draws,
which is what makes the reservoir's bulk path bitwise-equivalent to
sequential offers. A capacity of 0 disables a buffer: offers are counted
but nothing is stored and no randomness is consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .model import Array, Sample

FIRST_SCORE = 0.1    # redundancy score assigned when there is nothing to compare to


@dataclass(frozen=True)
class BufferEntry:
    """A stored sample plus the predictive distribution it was inserted with.

    ``teacher`` is the working model's flat softmax output over grid cells,
    captured at insertion time (None when the trainer does not distill from
    storage). ``step`` is the stream step of insertion, for inspection.
    """

    sample: Sample
    teacher: Array | None = None
    step: int = -1


class ReservoirBuffer:
    """Uniform reservoir of capacity m.

    The n-th offer (1-based, counting from the first ever offer) is kept
    with probability min(1, m/n); an accepted item overwrites a slot chosen
    uniformly at random. Every offer made while the buffer is full consumes
    exactly two uniforms, accepted or not, so a run's reservoir decisions
    are a fixed-length slice of the generator stream.
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigurationError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.items: list = []
        self.n_seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def offer(self, item, rng: np.random.Generator) -> bool:
        """Offer one item; returns True if it was stored."""
        self.n_seen += 1
        if self.capacity == 0:
            return False
        if len(self.items) < self.capacity:
            self.items.append(item)
            return True
        u, v = rng.random(2)
        if u < self.capacity / self.n_seen:
            self.items[int(v * self.capacity)] = item
            return True
        return False

    def offer_many(self, items: Sequence, rng: np.random.Generator) -> int:
        """Offer a sequence of items; returns how many were stored.

        Consumes the generator stream exactly as the equivalent sequence of
        ``offer`` calls would and leaves the buffer in the identical state.
        """
        items = list(items)
        if self.capacity == 0:
            self.n_seen += len(items)
            return 0
        n_fill = min(self.capacity - len(self.items), len(items))
        for item in items[:n_fill]:
            self.items.append(item)
        self.n_seen += n_fill
        rest = items[n_fill:]
        if not rest:
            return n_fill
        k = len(rest)
        draws = rng.random((k, 2))
        n_vec = self.n_seen + 1 + np.arange(k)
        accept = draws[:, 0] < self.capacity / n_vec
        victims = (draws[:, 1] * self.capacity).astype(int)
        self.n_seen += k
        acc = np.flatnonzero(accept)
        if acc.size:
            # Only the last accepted offer targeting a slot survives there.
            rev = acc[::-1]
            slots, first = np.unique(victims[rev], return_index=True)
            for slot, j in zip(slots, rev[first]):
                self.items[slot] = rest[j]
        return n_fill + int(acc.size)

    def sample(self, k: int, rng: np.random.Generator) -> list:
        """Draw min(k, len) stored items uniformly without replacement."""
        return _draw(self.items, k, rng)

    def state(self) -> dict:
        return {"capacity": self.capacity, "n_seen": self.n_seen,
                "items": list(self.items)}

    @classmethod
    def from_state(cls, state: dict) -> "ReservoirBuffer":
        buf = cls(state["capacity"])
        buf.items = list(state["items"])
        buf.n_seen = int(state["n_seen"])
        if len(buf.items) > buf.capacity:
            raise InputError("stored items exceed capacity")
        return buf


def diversity_score(grad_new: Array, reference_grads: Sequence[Array]) -> float:
    """Max cosine similarity against the references, plus 1; range [0, 2].

    Zero-norm gradients cannot be compared, so zero-norm references are
    skipped; if no comparison is possible (no references survive, or the
    candidate itself has zero norm) the initialization score 0.1 is
    returned.
    """
    g = np.asarray(grad_new, dtype=np.float64)
    g_norm = np.linalg.norm(g)
    if g_norm > 0 and len(reference_grads) > 0:
        refs = np.asarray(reference_grads, dtype=np.float64)
        norms = np.linalg.norm(refs, axis=1)
        keep = norms > 0
        if keep.any():
            cos = (refs[keep] @ g) / (norms[keep] * g_norm)
            return float(cos.max() + 1.0)
    return FIRST_SCORE


class DiversityBuffer:
    """Gradient-diversity memory of capacity m.

    Each stored entry carries a redundancy score q in [0, 2]: a candidate's
    score is ``max cosine against reference gradients + 1``, so q near 0
    means the candidate's gradient opposes everything stored (maximally
    informative) and q near 2 means it duplicates something. The first ever
    entry has no references and gets the fixed score 0.1.

    While the buffer has free space every candidate is stored with its
    score. Once full, a candidate with q_n >= 1 is discarded outright;
    otherwise exactly two uniforms are consumed: the first picks a victim
    slot with probability q_i / sum(q) by inverse CDF (ties to the lower
    index), the second replaces that victim with probability
    q_victim / (q_victim + q_n), the newcomer inheriting score q_n.

    ``grad_fn`` maps a list of items to a matrix with one row per item
    representing that item's current loss gradient; it is re-invoked on
    every offer so references always reflect the latest parameters. The
    canonical choice is the full (n, P) per-item gradient matrix, but any
    rows preserving pairwise gradient inner products (e.g. Gram-factor
    sketches) score identically, since only cosine geometry is consumed.
    When more than ``score_batch`` entries are stored, each offer compares
    against a random subset of that size.
    """

    def __init__(self, capacity: int, score_batch: int = 8):
        if capacity < 0:
            raise ConfigurationError(f"capacity must be >= 0, got {capacity}")
        if score_batch < 1:
            raise ConfigurationError(f"score_batch must be >= 1, got {score_batch}")
        self.capacity = capacity
        self.score_batch = score_batch
        self.items: list = []
        self.scores: list[float] = []
        self.n_seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def score_candidate(self, item, grad_fn: Callable[[list], Array],
                        rng: np.random.Generator) -> float:
        """Redundancy score of a candidate against the current contents."""
        if not self.items:
            return FIRST_SCORE
        if len(self.items) <= self.score_batch:
            ref_idx = np.arange(len(self.items))
        else:
            ref_idx = rng.choice(len(self.items), size=self.score_batch,
                                 replace=False)
        grads = grad_fn([item] + [self.items[i] for i in ref_idx])
        return diversity_score(grads[0], grads[1:])

    def offer(self, item, grad_fn: Callable[[list], Array],
              rng: np.random.Generator) -> bool:
        """Offer one item; returns True if it was stored."""
        self.n_seen += 1
        if self.capacity == 0:
            return False
        q_n = self.score_candidate(item, grad_fn, rng)
        if len(self.items) < self.capacity:
            self.items.append(item)
            self.scores.append(q_n)
            return True
        if q_n >= 1.0:
            return False
        u, v = rng.random(2)
        victim = self._pick_victim(u)
        q_v = self.scores[victim]
        if v < q_v / (q_v + q_n):
            self.items[victim] = item
            self.scores[victim] = q_n
            return True
        return False

    def _pick_victim(self, u: float) -> int:
        q = np.asarray(self.scores)
        total = q.sum()
        if total <= 0:
            return min(int(u * len(q)), len(q) - 1)  # degenerate: all scores 0
        idx = int(np.searchsorted(np.cumsum(q / total), u, side="right"))
        return min(idx, len(q) - 1)

    def sample(self, k: int, rng: np.random.Generator) -> list:
        """Draw min(k, len) stored items uniformly without replacement."""
        return _draw(self.items, k, rng)

    def state(self) -> dict:
        return {"capacity": self.capacity, "score_batch": self.score_batch,
                "n_seen": self.n_seen, "items": list(self.items),
                "scores": list(self.scores)}

    @classmethod
    def from_state(cls, state: dict) -> "DiversityBuffer":
        buf = cls(state["capacity"], score_batch=state["score_batch"])
        buf.items = list(state["items"])
        buf.scores = [float(s) for s in state["scores"]]
        buf.n_seen = int(state["n_seen"])
        if len(buf.items) != len(buf.scores):
            raise InputError("items and scores have different lengths")
        if len(buf.items) > buf.capacity:
            raise InputError("stored items exceed capacity")
        return buf


def _draw(items: list, k: int, rng: np.random.Generator) -> list:
    if k < 0:
        raise InputError(f"sample size must be >= 0, got {k}")
    n = len(items)
    if k == 0 or n == 0:
        return []
    idx = rng.choice(n, size=min(k, n), replace=False)
    return [items[i] for i in idx]


def sample_joint(res: ReservoirBuffer, div: DiversityBuffer, k_r: int, k_d: int,
                 rng: np.random.Generator) -> tuple[list, list]:
    """Draw replay minibatches from both memories, reservoir first.

    Returns (min(k_r, |reservoir|), min(k_d, |diversity|)) items drawn
    uniformly without replacement; empty lists from empty buffers. An
    empty draw consumes no randomness.
    """
    return res.sample(k_r, rng), div.sample(k_d, rng)


def composition(buf) -> dict[int, int]:
    """Entry counts per hidden task id; evaluation-side introspection only.

    Works on any buffer whose items are BufferEntry records (or anything
    with a ``sample.task_id``); never called by trainers.
    """
    counts: dict[int, int] = {}
    for item in buf.items:
        tid = item.sample.task_id
        counts[tid] = counts.get(tid, 0) + 1
    return counts
