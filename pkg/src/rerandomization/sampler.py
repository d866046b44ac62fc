"""Assignment generation: complete randomization, rejection sampling under a
balance criterion, and exhaustive enumeration for small instances.

Candidates come from a single deterministic stream per generator: candidate
``j`` consumes row ``j`` of the generator's uniform output, so results do
not depend on the internal batch size.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numba import njit

from .criteria import BalanceCriterion, BalanceDiagnostics, CompiledCriterion
from .errors import BudgetExhaustedError, CriterionError, DomainError, InstanceTooLargeError
from .population import Assignment, DesignMatrix
from .specialfn import SeededGenerator, as_rng

ENUMERATION_LIMIT = 10_000_000
# ceiling on the default budget; 100 / p_a is unbounded as p_a -> 0
MAX_DEFAULT_DRAWS = 100_000_000
_FIRST_BATCH = 256
_MAX_BATCH = 65_536


@njit(cache=True)
def _candidate_sums(u, xc, out):  # pragma: no cover - compiled
    """Row b of ``out`` gets the sum of the rows of ``xc`` picked by a
    partial Fisher-Yates shuffle driven by ``u[b]``."""
    n = xc.shape[0]
    B, m = u.shape
    K = xc.shape[1]
    perm = np.arange(n)
    for b in range(B):
        for k in range(K):
            out[b, k] = 0.0
        for j in range(m):
            t = j + int(u[b, j] * (n - j))
            tmp = perm[t]
            perm[t] = perm[j]
            perm[j] = tmp
            for k in range(K):
                out[b, k] += xc[tmp, k]
        for j in range(m - 1, -1, -1):
            t = j + int(u[b, j] * (n - j))
            tmp = perm[t]
            perm[t] = perm[j]
            perm[j] = tmp


@njit(cache=True)
def _selected(u_row, n):  # pragma: no cover - compiled
    perm = np.arange(n)
    m = u_row.shape[0]
    for j in range(m):
        t = j + int(u_row[j] * (n - j))
        tmp = perm[t]
        perm[t] = perm[j]
        perm[j] = tmp
    return perm[:m].copy()


class CandidateStream:
    """Uniformly random assignments with fixed group sizes, generated in
    batches together with their scaled covariate imbalance
    ``mu = sqrt(n) * tau_hat_X``."""

    def __init__(self, design: DesignMatrix, n1: int, g):
        n = design.n
        if not 1 <= n1 <= n - 1:
            raise DomainError(f"n1 must be in [1, n-1], got {n1} for n={n}")
        self.design = design
        self.n = n
        self.n1 = int(n1)
        self.n0 = n - self.n1
        self.rng = as_rng(g)
        self.select_treated = self.n1 <= self.n0
        self.m = self.n1 if self.select_treated else self.n0
        self._xc = np.ascontiguousarray(design.centered)
        sign = 1.0 if self.select_treated else -1.0
        self._factor = sign * math.sqrt(n) * n / (self.n1 * self.n0)

    def batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(u, mu)``; ``u`` identifies each candidate."""
        u = self.rng.random((size, self.m))
        sums = np.empty((size, self.design.k))
        _candidate_sums(u, self._xc, sums)
        return u, sums * self._factor

    def assignment(self, u_row: np.ndarray) -> Assignment:
        idx = _selected(np.ascontiguousarray(u_row), self.n)
        z = np.zeros(self.n, dtype=np.int8) if self.select_treated else np.ones(self.n, dtype=np.int8)
        z[idx] = 1 if self.select_treated else 0
        return Assignment(z)


def draw_cre(n: int, n1: int, g) -> Assignment:
    """One completely randomized assignment: uniform over all C(n, n1)."""
    if not 1 <= n1 <= n - 1:
        raise DomainError(f"n1 must be in [1, n-1], got {n1} for n={n}")
    rng = as_rng(g)
    m = min(n1, n - n1)
    idx = _selected(rng.random(m), n)
    treated = n1 <= n - n1
    z = np.zeros(n, dtype=np.int8) if treated else np.ones(n, dtype=np.int8)
    z[idx] = 1 if treated else 0
    return Assignment(z)


@dataclass(frozen=True)
class RerandomizationOutcome:
    assignment: Assignment
    diagnostics: BalanceDiagnostics
    draws_used: int
    empirical_acceptance: float
    first_candidate: Assignment | None = None


def _compiled(c, design: DesignMatrix, n1: int) -> CompiledCriterion:
    if isinstance(c, CompiledCriterion):
        if c.design is not design or c.n1 != n1:
            raise CriterionError("compiled criterion belongs to a different design or n1")
        return c
    return c.compile(design, n1)


def default_max_draws(c: BalanceCriterion | CompiledCriterion, design: DesignMatrix) -> int:
    crit = c.criterion if isinstance(c, CompiledCriterion) else c
    try:
        p_a = crit.acceptance_probability(design)
    except CriterionError:
        return 1_000_000
    if not p_a > 0:
        return MAX_DEFAULT_DRAWS
    return int(min(max(1e6, math.ceil(100.0 / p_a)), MAX_DEFAULT_DRAWS))


def rerandomize(
    c: BalanceCriterion | CompiledCriterion,
    design: DesignMatrix,
    n1: int,
    g,
    max_draws: int | None = None,
) -> RerandomizationOutcome:
    """Draw complete randomizations until one satisfies the criterion."""
    compiled = _compiled(c, design, n1)
    if max_draws is None:
        max_draws = default_max_draws(compiled, design)
    if max_draws < 1:
        raise DomainError("max_draws must be at least 1")
    stream = CandidateStream(design, n1, g)
    used = 0
    size = _FIRST_BATCH
    first_u = None
    while used < max_draws:
        b = min(size, max_draws - used)
        u, mu = stream.batch(b)
        if first_u is None:
            first_u = u[0].copy()
        acc, M, M_t = compiled.evaluate(mu)
        hits = np.flatnonzero(acc)
        if hits.size:
            j = int(hits[0])
            used += j + 1
            diag = BalanceDiagnostics(float(M[j]), tuple(float(v) for v in M_t[j]), True, used)
            return RerandomizationOutcome(
                assignment=stream.assignment(u[j]),
                diagnostics=diag,
                draws_used=used,
                empirical_acceptance=1.0 / used,
                first_candidate=stream.assignment(first_u),
            )
        used += b
        size = min(2 * size, _MAX_BATCH)
    raise BudgetExhaustedError(
        f"no acceptable assignment in {used} draws; the threshold may be too strict for n={design.n}",
        draws=used,
        accepted=0,
    )


# ---------------------------------------------------------------------------
# replication banks


@dataclass
class AssignmentBank:
    """Accepted assignments for replications ``0..R-1``; replication ``r``
    uses stream ``(seed, r)``.  ``cre`` holds the first candidate of each
    stream, a paired completely randomized control."""

    rerand: np.ndarray
    cre: np.ndarray
    draws: np.ndarray
    seed: int

    @property
    def reps(self) -> int:
        return self.rerand.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.reps / float(self.draws.sum())


def _bank_chunk(args):
    c, design, n1, seed, reps, max_draws = args
    compiled = _compiled(c, design, n1)
    n = design.n
    Z = np.empty((len(reps), n), dtype=np.int8)
    Z0 = np.empty((len(reps), n), dtype=np.int8)
    draws = np.empty(len(reps), dtype=np.int64)
    for i, r in enumerate(reps):
        try:
            out = rerandomize(compiled, design, n1, SeededGenerator(seed, r), max_draws)
        except BudgetExhaustedError as exc:
            exc.completed = (Z[:i].copy(), Z0[:i].copy(), draws[:i].copy())
            exc.replication = r
            raise
        Z[i] = out.assignment.z
        Z0[i] = out.first_candidate.z
        draws[i] = out.draws_used
    return Z, Z0, draws


def assignment_bank(
    c: BalanceCriterion,
    design: DesignMatrix,
    n1: int,
    reps: int,
    seed: int,
    max_draws: int | None = None,
    workers: int = 1,
) -> AssignmentBank:
    """Run ``reps`` independent rerandomizations.  With ``workers > 1`` the
    replications are split across processes; output is identical.

    In the single-process path a budget failure carries the completed
    prefix as ``exc.partial_bank``.
    """
    rep_ids = list(range(reps))
    if workers <= 1 or reps < 2 * workers:
        try:
            Z, Z0, draws = _bank_chunk((c, design, n1, seed, rep_ids, max_draws))
        except BudgetExhaustedError as exc:
            exc.partial_bank = AssignmentBank(*exc.completed, seed) if exc.completed[0].shape[0] else None
            raise
        return AssignmentBank(Z, Z0, draws, seed)
    chunks = [rep_ids[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_bank_chunk, [(c, design, n1, seed, ch, max_draws) for ch in chunks]))
    n = design.n
    Z = np.empty((reps, n), dtype=np.int8)
    Z0 = np.empty((reps, n), dtype=np.int8)
    draws = np.empty(reps, dtype=np.int64)
    for ch, (z, z0, d) in zip(chunks, parts):
        Z[ch], Z0[ch], draws[ch] = z, z0, d
    return AssignmentBank(Z, Z0, draws, seed)


# ---------------------------------------------------------------------------
# exhaustive enumeration


def iter_assignments(n: int, n1: int, chunk: int = 65_536) -> Iterator[np.ndarray]:
    """Yield every assignment with ``n1`` treated units, as boolean
    ``(C, n)`` blocks in lexicographic order of the treated index sets."""
    combos = itertools.combinations(range(n), n1)
    while True:
        flat = np.fromiter(itertools.chain.from_iterable(itertools.islice(combos, chunk)), dtype=np.int64)
        if flat.size == 0:
            return
        idx = flat.reshape(-1, n1)
        z = np.zeros((idx.shape[0], n), dtype=bool)
        np.put_along_axis(z, idx, True, axis=1)
        yield z


@dataclass(frozen=True)
class EnumerationReport:
    total: int
    accepted_count: int
    exact_acceptance_prob: float
    mean_tau_x: np.ndarray
    cov_tau_x: np.ndarray
    accepted: np.ndarray | None = None


def enumerate_exact(
    c: BalanceCriterion | CompiledCriterion,
    design: DesignMatrix,
    n1: int,
    keep: int = 0,
    limit: int = ENUMERATION_LIMIT,
) -> EnumerationReport:
    """Visit every assignment once and report the exact acceptance
    probability and the conditional mean and covariance (divisor = number
    accepted) of tau_hat_X over the accepted set.  Up to ``keep`` accepted
    assignments are returned."""
    n = design.n
    total = math.comb(n, n1)
    if total > limit:
        raise InstanceTooLargeError(f"C({n}, {n1}) = {total} exceeds the enumeration limit {limit}")
    compiled = _compiled(c, design, n1)
    xc = design.centered
    n0 = n - n1
    K = design.k
    count = 0
    s1 = np.zeros(K)
    s2 = np.zeros((K, K))
    kept = []
    for z in iter_assignments(n, n1):
        tx = (z @ xc) * (n / (n1 * n0))
        acc, _, _ = compiled.evaluate(math.sqrt(n) * tx)
        t = tx[acc]
        count += t.shape[0]
        s1 += t.sum(axis=0)
        s2 += t.T @ t
        if keep and len(kept) < keep:
            kept.extend(z[acc][: keep - len(kept)].astype(np.int8))
    if count:
        mean = s1 / count
        cov = s2 / count - np.outer(mean, mean)
    else:
        mean = np.full(K, np.nan)
        cov = np.full((K, K), np.nan)
    return EnumerationReport(
        total=total,
        accepted_count=count,
        exact_acceptance_prob=count / total,
        mean_tau_x=mean,
        cov_tau_x=cov,
        accepted=np.array(kept, dtype=np.int8).reshape(-1, n) if keep else None,
    )
