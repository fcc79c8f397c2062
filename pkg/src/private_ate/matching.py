"""Phase 2: treatment perturbation and ascending-distance neighbor lists."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, DegenerateGroups, GroupCounts, PrivacyLevel
from .dp_primitives import BudgetLedger, Composition, NoiseSource, randomized_response_vector
from .propensity import PropensityScores


@dataclass(frozen=True)
class TreatmentView:
    bits: np.ndarray
    perturbed: bool
    counts: GroupCounts


@dataclass(frozen=True)
class SortedMatrices:
    """Neighbor lists into the opposite group, nearest first.

    ``h0[r]`` lists every treated index ordered by distance to control sample
    ``control_idx[r]``; ``h1[r]`` lists every control index ordered by
    distance to treated sample ``treated_idx[r]``. All entries are indices
    into the original dataset.
    """

    h0: np.ndarray
    h1: np.ndarray
    control_idx: np.ndarray
    treated_idx: np.ndarray
    scores: np.ndarray

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    def row_of(self, i: int) -> np.ndarray:
        """Sorted opposite-group indices for sample ``i``."""
        pos = np.searchsorted(self.control_idx, i)
        if pos < self.control_idx.shape[0] and self.control_idx[pos] == i:
            return self.h0[pos]
        pos = np.searchsorted(self.treated_idx, i)
        if pos < self.treated_idx.shape[0] and self.treated_idx[pos] == i:
            return self.h1[pos]
        raise IndexError(i)


def perturb_treatment(
    dataset: Dataset,
    level: PrivacyLevel | str,
    eps_2: float | None,
    rng: NoiseSource | None,
    ledger: BudgetLedger | None = None,
) -> TreatmentView:
    """Label level keeps T; sample level applies randomized response per bit."""
    level = PrivacyLevel.parse(level)
    if level is PrivacyLevel.LABEL:
        return TreatmentView(bits=dataset.treatment, perturbed=False, counts=dataset.counts)
    if rng is None:
        raise ValueError("sample-level treatment perturbation needs a NoiseSource")
    bits = randomized_response_vector(dataset.treatment, eps_2, rng)
    bits.setflags(write=False)
    if ledger is not None:
        ledger.record("phase2", eps_2, Composition.PARALLEL)
        ledger.tainted |= rng.disabled
    return TreatmentView(bits=bits, perturbed=True, counts=GroupCounts.from_bits(bits, perturbed=True))


def distance(e_a: float, e_b: float) -> float:
    return abs(float(e_a) - float(e_b))


# elements per block of temporaries (about 512 KiB of float64)
_BLOCK_ELEMS = 1 << 16


def _sorted_rows(query_scores: np.ndarray, cand_scores: np.ndarray, cand_idx: np.ndarray) -> np.ndarray:
    """Rows of ``cand_idx`` ordered by (|query - score|, index).

    Candidates are sorted by score once. For each query the candidates at or
    below its score (walked downwards) and those above it (walked upwards) form
    two ascending distance runs, which a stable sort merges in linear time.
    Rows where round-off or cross-run ties leave equal distances out of index
    order are redone with an exact lexicographic sort. Queries are processed
    in blocks so the temporaries stay cache-sized.
    """
    idx64 = cand_idx.astype(np.int64)
    m = cand_scores.shape[0]
    up = np.lexsort((idx64, cand_scores))
    down = np.lexsort((-idx64, cand_scores))
    # positions < m hold the downward walk, positions >= m the upward one
    runs_s = np.concatenate([cand_scores[down], cand_scores[up]])
    runs_i = np.concatenate([cand_idx[down], cand_idx[up]])
    s_up = runs_s[m:]
    col = np.arange(m)[None, :]

    rows = np.empty((query_scores.shape[0], m), dtype=cand_idx.dtype)
    step = max(1, _BLOCK_ELEMS // max(1, m))
    for lo in range(0, query_scores.shape[0], step):
        q = query_scores[lo : lo + step, None]
        split = np.searchsorted(s_up, q[:, 0], side="right")[:, None]
        gidx = np.where(col < split, split - 1 - col, m + col)
        # |q - s| equals q - s below and s - q above bit for bit
        dist = np.abs(q - runs_s[gidx])
        order = np.argsort(dist, axis=1, kind="stable")
        gidx = np.take_along_axis(gidx, order, axis=1)
        block = runs_i[gidx]
        dist = np.take_along_axis(dist, order, axis=1)
        bad = np.flatnonzero(((dist[:, 1:] == dist[:, :-1]) & (block[:, 1:] < block[:, :-1])).any(axis=1))
        for r in bad:
            block[r] = cand_idx[np.lexsort((idx64, np.abs(q[r, 0] - cand_scores)))]
        rows[lo : lo + block.shape[0]] = block
    return rows


def build_sorted_matrices(scores: PropensityScores | np.ndarray, treatment: TreatmentView) -> SortedMatrices:
    """Sort every opposite-group candidate by propensity distance.

    Ties go to the lower sample index. This is post-processing of the
    (possibly perturbed) scores and treatment and spends no budget.
    """
    e = np.asarray(getattr(scores, "scores", scores), dtype=float)
    bits = np.asarray(treatment.bits)
    if e.shape != bits.shape:
        raise ValueError(f"scores {e.shape} and treatment {bits.shape} disagree")
    treated_idx = np.flatnonzero(bits == 1).astype(np.int32)
    control_idx = np.flatnonzero(bits == 0).astype(np.int32)
    if treated_idx.size == 0 or control_idx.size == 0:
        raise DegenerateGroups(
            f"both groups must be non-empty under the treatment view "
            f"(treated={treated_idx.size}, control={control_idx.size})"
        )
    h0 = _sorted_rows(e[control_idx], e[treated_idx], treated_idx)
    h1 = _sorted_rows(e[treated_idx], e[control_idx], control_idx)
    return SortedMatrices(h0=h0, h1=h1, control_idx=control_idx, treated_idx=treated_idx, scores=e)
