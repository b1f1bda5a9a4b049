"""The three evaluation dimensions: transcript error rate, embedding cosine
similarity, and DTW-aligned log-pitch RMSE.

All three are deterministic pure functions. Polarities are fixed here so
"best candidate" means the same thing everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOWER_IS_BETTER = "lower"
HIGHER_IS_BETTER = "higher"

# Canonical metric order used by score tables throughout the package.
METRIC_NAMES = ("cer", "spk_sim", "prosody_rmse")
METRIC_POLARITY = {
    "cer": LOWER_IS_BETTER,
    "spk_sim": HIGHER_IS_BETTER,
    "prosody_rmse": LOWER_IS_BETTER,
}


@dataclass(frozen=True)
class MetricScores:
    cer: float
    spk_sim: float
    prosody_rmse: float

    def __post_init__(self):
        if not (np.isfinite(self.cer) and np.isfinite(self.spk_sim) and np.isfinite(self.prosody_rmse)):
            raise ValueError("MetricScores: all scores must be finite")
        if self.cer < 0:
            raise ValueError(f"MetricScores: cer must be >= 0, got {self.cer}")
        if not -1.0 <= self.spk_sim <= 1.0:
            raise ValueError(f"MetricScores: spk_sim must be in [-1, 1], got {self.spk_sim}")
        if self.prosody_rmse < 0:
            raise ValueError(f"MetricScores: prosody_rmse must be >= 0, got {self.prosody_rmse}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.cer, self.spk_sim, self.prosody_rmse)


@dataclass(frozen=True)
class ProsodyContour:
    """A strictly positive pitch-proxy sequence; log is always defined."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("ProsodyContour: empty contour")
        if any(not np.isfinite(v) or v <= 0 for v in vals):
            raise ValueError("ProsodyContour: values must be finite and > 0")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def log_values(self) -> np.ndarray:
        return np.log(np.asarray(self.values))


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (substitution, insertion, deletion)."""
    if len(a) < len(b):
        a, b = b, a
    prev = np.arange(len(b) + 1)
    cur = np.empty_like(prev)
    for i, sa in enumerate(a, start=1):
        cur[0] = i
        for j, sb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (sa != sb))
        prev, cur = cur, prev
    return int(prev[len(b)])


def cer(hypothesis: Sequence, reference: Sequence) -> float:
    """Edit distance divided by reference length; may exceed 1."""
    if len(reference) == 0:
        raise ValueError("cer: reference must be non-empty")
    return levenshtein(hypothesis, reference) / len(reference)


def speaker_similarity(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding."""
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"speaker_similarity: incompatible shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("speaker_similarity: zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _coerce_contour(c) -> ProsodyContour:
    return c if isinstance(c, ProsodyContour) else ProsodyContour(tuple(c))


def log_f0_rmse_dtw(generated, reference) -> float:
    """RMSE of log-pitch differences along the optimal DTW alignment.

    The alignment minimizes the summed absolute log difference with the
    standard step set {(1,0), (0,1), (1,1)} and both endpoints pinned;
    the returned value is the root mean square of the differences along
    that path (path length in the denominator). Ties in the traceback
    prefer the diagonal step, then the generated-side step.
    """
    g = _coerce_contour(generated).log_values()
    r = _coerce_contour(reference).log_values()
    n, m = len(g), len(r)
    diff = g[:, None] - r[None, :]
    cost = np.abs(diff)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(
                acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            )
    # Traceback from the end; collect squared differences along the path.
    i, j = n, m
    sq = 0.0
    length = 0
    while True:
        sq += diff[i - 1, j - 1] ** 2
        length += 1
        if i == 1 and j == 1:
            break
        steps = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(steps))
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
    return float(np.sqrt(sq / length))


def dtw_cost(generated, reference) -> float:
    """Total summed |log difference| along the optimal path (diagnostic)."""
    g = _coerce_contour(generated).log_values()
    r = _coerce_contour(reference).log_values()
    n, m = len(g), len(r)
    cost = np.abs(g[:, None] - r[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(
                acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            )
    return float(acc[n, m])
