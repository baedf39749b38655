"""Stability/plasticity metrics computed from the per-step accuracy matrix.

Indexing: ``a[k][b]`` is the accuracy (percent) on task ``b`` after learning
task ``k``, both 0-based internally.  ``af``/``rf`` take the 1-based number of
tasks learned, matching the usual AF_k notation.
"""
from __future__ import annotations

import numpy as np


class AccuracyMatrix:
    """Per-step, per-task accuracies kept as exact (correct, total) counts."""

    def __init__(self, K, totals=None):
        self.K = int(K)
        self.correct = np.full((self.K, self.K), -1, dtype=np.int64)
        self.totals = np.zeros(self.K, dtype=np.int64) if totals is None else np.asarray(totals, dtype=np.int64)
        self._percent = None
        self._joint = None

    @classmethod
    def from_percent(cls, a, joint=None):
        """Build from a lower-triangular percent matrix (entries above the diagonal ignored)."""
        a = np.asarray(a, dtype=np.float64)
        m = cls(a.shape[0])
        m._percent = np.where(np.tril(np.ones_like(a, dtype=bool)), a, np.nan)
        if joint is not None:
            m._joint = np.asarray(joint, dtype=np.float64)
        return m

    def record(self, k, b, correct, total):
        if b > k:
            raise ValueError("task b has not been learned at step k")
        self.correct[k, b] = int(correct)
        if self.totals[b] and self.totals[b] != total:
            raise ValueError(f"task {b} test size changed: {self.totals[b]} -> {total}")
        self.totals[b] = int(total)

    @property
    def steps(self):
        if self._percent is not None:
            return self.K
        return int(np.sum(self.correct[:, 0] >= 0))

    @property
    def a(self):
        """Percent matrix with NaN for b > k (and for steps not yet run)."""
        if self._percent is not None:
            return self._percent
        out = np.full((self.K, self.K), np.nan)
        mask = self.correct >= 0
        tot = np.broadcast_to(self.totals, out.shape)
        out[mask] = 100.0 * self.correct[mask] / tot[mask]
        return out

    @property
    def joint(self):
        """A[k]: accuracy over the union of test sets 0..k after step k."""
        if self._joint is not None:
            return self._joint
        if self._percent is not None:
            raise ValueError("joint accuracies unavailable for a percent-only matrix")
        out = np.full(self.K, np.nan)
        for k in range(self.steps):
            out[k] = 100.0 * self.correct[k, : k + 1].sum() / self.totals[: k + 1].sum()
        return out

    def peak(self, k):
        """a*_b for the k-1 old tasks after k tasks learned (1-based): best accuracy on
        task b over every step up to and including the current one, so a*_b >= a_b."""
        a = self.a
        return np.array([np.nanmax(a[b:k, b]) for b in range(k - 1)])

    def to_rows(self):
        rows = []
        a = self.a
        for k in range(self.steps):
            for b in range(k + 1):
                row = {"step": k + 1, "task": b + 1, "percent": a[k, b]}
                if self._percent is None:
                    row.update(correct=int(self.correct[k, b]), total=int(self.totals[b]))
                rows.append(row)
        return rows


def _check_k(m, k):
    if k < 2:
        raise ValueError(f"forgetting is undefined before the second task (k={k})")
    if k > m.steps:
        raise ValueError(f"only {m.steps} steps recorded, asked for k={k}")


def aan(m: AccuracyMatrix) -> float:
    """Average accuracy on the newest task over all steps."""
    if m.steps < 1:
        raise ValueError("empty accuracy matrix")
    return float(np.mean(np.diag(m.a)[: m.steps]))


def af(m: AccuracyMatrix, k: int) -> float:
    """Average forgetting after k tasks: mean over b<k of (peak past accuracy - current)."""
    _check_k(m, k)
    cur = m.a[k - 1, : k - 1]
    return float(np.mean(m.peak(k) - cur))


def rf(m: AccuracyMatrix, k: int) -> float:
    """Relative forgetting (fraction): mean over b<k of 1 - a_b / a*_b."""
    _check_k(m, k)
    peak = m.peak(k)
    if np.any(peak <= 0):
        raise ZeroDivisionError("relative forgetting undefined: a task has zero peak accuracy")
    cur = m.a[k - 1, : k - 1]
    return float(np.mean(1.0 - cur / peak))


def faf(m):
    return af(m, m.steps)


def frf(m):
    return rf(m, m.steps)


def la_aia(m: AccuracyMatrix):
    """(last joint accuracy, mean joint accuracy over steps)."""
    joint = m.joint[: m.steps]
    return float(joint[-1]), float(np.mean(joint))


def summary(m: AccuracyMatrix) -> dict:
    """Final-step metrics in percent (FRF scaled by 100)."""
    la, aia = la_aia(m)
    out = {"AAN": aan(m), "LA": la, "AIA": aia}
    if m.steps >= 2:
        out["FAF"] = faf(m)
        out["FRF"] = 100.0 * frf(m)
    return out


def task_confusion(pred_labels, true_labels, classes_per_task, K):
    """Counts c[i][j] of test samples of task i predicted into a class of task j.

    Returns (counts, row-normalised) arrays.
    """
    ti = np.asarray(true_labels) // classes_per_task
    tj = np.asarray(pred_labels) // classes_per_task
    if np.any(tj >= K) or np.any(tj < 0):
        raise ValueError("prediction outside the class range of the stream")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (ti, tj), 1)
    rows = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, rows, out=np.zeros((K, K)), where=rows > 0)
    return counts, normalized


def mean_std(values):
    """Mean and population standard deviation (divide by n)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=0))
