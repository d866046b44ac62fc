"""Covariates, assignments and finite-population moments.

Every variance and covariance here uses divisor ``n - 1``.  Quantities that
involve both potential outcomes (``S2_tau`` and friends) only exist on
:class:`OraclePopulation`, which is available in simulation mode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .errors import DegeneratePopulationError, DomainError, SingularCovarianceError

PIVOT_TOL = 1e-10


def pivoted_cholesky_rank(cov: np.ndarray, tol: float = PIVOT_TOL) -> tuple[list[int], list[int]]:
    """Greedy pivoted Cholesky on the correlation-scaled matrix.

    Returns ``(independent, dependent)`` column indices.  A column is
    dependent when its residual variance, relative to its own variance,
    drops below ``tol`` after projecting out the pivots chosen so far.
    """
    k = cov.shape[0]
    d = np.diag(cov).astype(float)
    scale = np.sqrt(np.where(d > 0, d, 1.0))
    corr = cov / np.outer(scale, scale)
    zero_var = [j for j in range(k) if not d[j] > 0]
    remaining = [j for j in range(k) if d[j] > 0]
    resid = np.diag(corr).copy()
    L = np.zeros((k, k))
    chosen: list[int] = []
    while remaining:
        j = max(remaining, key=lambda c: resid[c])
        if resid[j] < tol:
            break
        col = len(chosen)
        L[j, col] = math.sqrt(resid[j])
        for i in remaining:
            if i != j:
                L[i, col] = (corr[i, j] - L[i, :col] @ L[j, :col]) / L[j, col]
                resid[i] -= L[i, col] ** 2
        chosen.append(j)
        remaining.remove(j)
    return sorted(chosen), sorted(zero_var + remaining)


class DesignMatrix:
    """Fixed covariate matrix with an optional ordered tier partition.

    The finite-population covariance ``cov`` (divisor ``n - 1``) must be
    positive definite; this is checked at construction unless
    ``check=False``.
    """

    def __init__(
        self,
        X,
        tier_sizes: Sequence[int] | None = None,
        columns: Sequence[str] | None = None,
        check: bool = True,
    ):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DomainError("X must be a matrix")
        if not np.all(np.isfinite(X)):
            raise DomainError("X contains non-finite values")
        n, k = X.shape
        if n < 3:
            raise DomainError(f"need at least 3 units, got {n}")
        if columns is None:
            columns = [f"x{j + 1}" for j in range(k)]
        if len(columns) != k:
            raise DomainError("column names do not match the number of columns")
        if tier_sizes is not None:
            tier_sizes = tuple(int(t) for t in tier_sizes)
            if any(t < 1 for t in tier_sizes) or sum(tier_sizes) != k:
                raise DomainError(f"tier sizes {tier_sizes} do not partition {k} columns")
        self.X = X
        self.X.setflags(write=False)
        self.columns = tuple(columns)
        self.tier_sizes = tier_sizes
        if check:
            self.check_positive_definite()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.X.mean(axis=0)

    @cached_property
    def centered(self) -> np.ndarray:
        return self.X - self.mean

    @cached_property
    def cov(self) -> np.ndarray:
        xc = self.centered
        return xc.T @ xc / (self.n - 1)

    @cached_property
    def cov_inv(self) -> np.ndarray:
        self.check_positive_definite()
        return _sym_inv(self.cov)

    @property
    def tiers(self) -> list[slice]:
        sizes = self.tier_sizes if self.tier_sizes is not None else (self.k,)
        out, start = [], 0
        for s in sizes:
            out.append(slice(start, start + s))
            start += s
        return out

    def check_positive_definite(self) -> None:
        _, dependent = pivoted_cholesky_rank(self.cov)
        if dependent:
            names = tuple(self.columns[j] for j in dependent)
            raise SingularCovarianceError(
                f"covariate covariance is singular; collinear or constant columns: {', '.join(names)}",
                columns=names,
            )

    def condition_diagnostic(self) -> float:
        """max_i ||X_i - mean||^2 / n, which should be small for the
        asymptotic approximations to be trustworthy."""
        return float(np.max(np.sum(self.centered**2, axis=1)) / self.n)

    def __repr__(self) -> str:
        return f"DesignMatrix(n={self.n}, k={self.k}, tier_sizes={self.tier_sizes})"


def _sym_inv(a: np.ndarray) -> np.ndarray:
    c = np.linalg.cholesky(a)
    ci = np.linalg.inv(c)
    return ci.T @ ci


@dataclass(frozen=True)
class Assignment:
    """A binary treatment vector; ``z[i] == 1`` means unit ``i`` is treated."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 1 or not np.all((z == 0) | (z == 1)):
            raise DomainError("assignment must be a 0/1 vector")
        z = z.astype(np.int8)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        if self.n1 < 1 or self.n0 < 1:
            raise DomainError("both arms need at least one unit")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @cached_property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def r1(self) -> float:
        return self.n1 / self.n

    @property
    def r0(self) -> float:
        return self.n0 / self.n

    def flipped(self) -> "Assignment":
        return Assignment(1 - self.z)

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and np.array_equal(self.z, other.z)

    def __hash__(self) -> int:
        return hash(self.z.tobytes())


def covariate_imbalance(X: DesignMatrix, z: Assignment | np.ndarray) -> np.ndarray:
    """tau_hat_X: treated minus control covariate means."""
    zz = np.asarray(z.z if isinstance(z, Assignment) else z, dtype=bool)
    return X.X[zz].mean(axis=0) - X.X[~zz].mean(axis=0)


@dataclass(frozen=True)
class OraclePopulation:
    """Both potential outcomes and every finite-population moment built
    from them.  ``*_x`` attributes are variances of linear projections on
    the covariates."""

    design: DesignMatrix
    y1: np.ndarray
    y0: np.ndarray
    tau: float
    s2_y1: float
    s2_y0: float
    s2_tau: float
    s_y1x: np.ndarray
    s_y0x: np.ndarray
    s_taux: np.ndarray
    s2_y1_x: float
    s2_y0_x: float
    s2_tau_x: float
    condition1: float

    @property
    def n(self) -> int:
        return self.y1.shape[0]

    @property
    def r2_y1(self) -> float:
        return self.s2_y1_x / self.s2_y1 if self.s2_y1 > 0 else math.nan

    @property
    def r2_y0(self) -> float:
        return self.s2_y0_x / self.s2_y0 if self.s2_y0 > 0 else math.nan

    @property
    def r2_tau(self) -> float:
        return self.s2_tau_x / self.s2_tau if self.s2_tau > 0 else math.nan

    @property
    def s_y1y0(self) -> float:
        return 0.5 * (self.s2_y1 + self.s2_y0 - self.s2_tau)


@dataclass(frozen=True)
class VMatrix:
    """Covariance of sqrt(n) (tau_hat_Y, tau_hat_X) under complete
    randomization."""

    vtt: float
    vtx: np.ndarray
    vxx: np.ndarray
    r2: float
    r1: float
    r0: float
    degenerate: bool = False
    vxx_inv: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.vxx_inv is None:
            object.__setattr__(self, "vxx_inv", _sym_inv(self.vxx))


def _cov_vec(xc: np.ndarray, y: np.ndarray) -> np.ndarray:
    return xc.T @ (y - y.mean()) / (xc.shape[0] - 1)


def finite_moments(
    design: DesignMatrix, y1, y0, r1: float | None = None, r0: float | None = None
) -> tuple[OraclePopulation, VMatrix]:
    """All finite-population moments and the V matrix for proportions
    ``(r1, r0)``.  A zero ``V_tautau`` is flagged as degenerate rather than
    raised; ``R^2`` is then NaN."""
    y1 = np.asarray(y1, dtype=float).copy()
    y0 = np.asarray(y0, dtype=float).copy()
    n = design.n
    if y1.shape != (n,) or y0.shape != (n,):
        raise DomainError("potential outcome vectors must have one entry per unit")
    if r1 is None:
        raise DomainError("r1 is required")
    r0 = 1.0 - r1 if r0 is None else r0
    if not (0 < r1 < 1 and 0 < r0 < 1 and abs(r1 + r0 - 1) < 1e-12):
        raise DomainError(f"proportions must be in (0,1) and sum to 1, got {r1}, {r0}")

    xc = design.centered
    s_inv = design.cov_inv
    tau_i = y1 - y0
    s_y1x = _cov_vec(xc, y1)
    s_y0x = _cov_vec(xc, y0)
    s_taux = s_y1x - s_y0x
    pop = OraclePopulation(
        design=design,
        y1=y1,
        y0=y0,
        tau=float(tau_i.mean()),
        s2_y1=float(np.var(y1, ddof=1)),
        s2_y0=float(np.var(y0, ddof=1)),
        s2_tau=float(np.var(tau_i, ddof=1)),
        s_y1x=s_y1x,
        s_y0x=s_y0x,
        s_taux=s_taux,
        s2_y1_x=float(s_y1x @ s_inv @ s_y1x),
        s2_y0_x=float(s_y0x @ s_inv @ s_y0x),
        s2_tau_x=float(s_taux @ s_inv @ s_taux),
        condition1=design.condition_diagnostic(),
    )
    return pop, v_matrix(pop, r1, r0)


def v_matrix(pop: OraclePopulation, r1: float, r0: float | None = None) -> VMatrix:
    r0 = 1.0 - r1 if r0 is None else r0
    vtt = pop.s2_y1 / r1 + pop.s2_y0 / r0 - pop.s2_tau
    vtx = pop.s_y1x / r1 + pop.s_y0x / r0
    vxx = pop.design.cov / (r1 * r0)
    scale = pop.s2_y1 / r1 + pop.s2_y0 / r0
    degenerate = not vtt > 1e-13 * max(scale, 1e-300)
    if degenerate:
        r2 = math.nan
    else:
        r2 = _r2_from_moments(pop, r1, r0, vtt)
    return VMatrix(vtt=float(max(vtt, 0.0)), vtx=vtx, vxx=vxx, r2=r2, r1=r1, r0=r0, degenerate=degenerate)


def _r2_from_moments(pop: OraclePopulation, r1: float, r0: float, vtt: float) -> float:
    num = pop.s2_y1_x / r1 + pop.s2_y0_x / r0 - pop.s2_tau_x
    return float(min(max(num / vtt, 0.0), 1.0))


def squared_multiple_correlation(pop: OraclePopulation, r1: float, r0: float | None = None) -> float:
    """Squared multiple correlation between tau_hat_Y and tau_hat_X under
    complete randomization."""
    r0 = 1.0 - r1 if r0 is None else r0
    v = v_matrix(pop, r1, r0)
    if v.degenerate:
        raise DegeneratePopulationError("V_tautau is zero; R^2 is undefined")
    return v.r2


@dataclass(frozen=True)
class TierBasis:
    """Block Gram-Schmidt coordinates ``E_i = gamma @ X_i``.

    ``cov_blocks[t]`` is the covariance of ``E[t]``; cross-tier blocks are
    zero by construction.
    """

    design: DesignMatrix
    E: np.ndarray
    gamma: np.ndarray
    blocks: tuple[slice, ...]
    cov_blocks: tuple[np.ndarray, ...]
    cov_blocks_inv: tuple[np.ndarray, ...]

    @property
    def tier_sizes(self) -> tuple[int, ...]:
        return tuple(b.stop - b.start for b in self.blocks)

    @property
    def T(self) -> int:
        return len(self.blocks)

    @cached_property
    def E_cov(self) -> np.ndarray:
        ec = self.E - self.E.mean(axis=0)
        return ec.T @ ec / (self.E.shape[0] - 1)


def tier_orthogonalize(design: DesignMatrix) -> TierBasis:
    """Residualize each tier on all earlier tiers (population least squares)."""
    if design.tier_sizes is None:
        raise DomainError("design has no tier partition")
    S = design.cov
    K = design.k
    gamma = np.eye(K)
    blocks = tuple(design.tiers)
    for t, blk in enumerate(blocks):
        prefix = slice(0, blk.stop)
        _, dependent = pivoted_cholesky_rank(S[prefix, prefix])
        if dependent:
            names = tuple(design.columns[j] for j in dependent)
            raise SingularCovarianceError(
                f"covariance of tiers 1..{t + 1} is singular (columns {', '.join(names)})",
                columns=names,
            )
        if blk.start == 0:
            continue
        prev = slice(0, blk.start)
        coef = np.linalg.solve(S[prev, prev], S[prev, blk]).T
        gamma[blk, prev] = -coef
    E = design.X @ gamma.T
    ec = E - E.mean(axis=0)
    cov_e = ec.T @ ec / (design.n - 1)
    cov_blocks = tuple(cov_e[b, b].copy() for b in blocks)
    return TierBasis(
        design=design,
        E=E,
        gamma=gamma,
        blocks=blocks,
        cov_blocks=cov_blocks,
        cov_blocks_inv=tuple(_sym_inv(c) for c in cov_blocks),
    )


def tier_correlations(
    basis: TierBasis, pop: OraclePopulation, r1: float, r0: float | None = None
) -> np.ndarray:
    """(rho_1^2, ..., rho_T^2, rho_{T+1}^2): the share of V_tautau explained
    by each orthogonalized tier, with the unexplained remainder last."""
    r0 = 1.0 - r1 if r0 is None else r0
    v = v_matrix(pop, r1, r0)
    if v.degenerate:
        raise DegeneratePopulationError("V_tautau is zero; tier correlations are undefined")
    ec = basis.E - basis.E.mean(axis=0)
    s1e = _cov_vec(ec, pop.y1)
    s0e = _cov_vec(ec, pop.y0)
    ste = s1e - s0e
    rho = []
    for blk, inv in zip(basis.blocks, basis.cov_blocks_inv):
        a, b, c = s1e[blk], s0e[blk], ste[blk]
        num = a @ inv @ a / r1 + b @ inv @ b / r0 - c @ inv @ c
        rho.append(max(float(num) / v.vtt, 0.0))
    rho = np.array(rho)
    return np.append(rho, max(1.0 - rho.sum(), 0.0))


# ---------------------------------------------------------------------------
# CSV ingestion

_MISSING = {"", "na", "nan", "null", "none"}


def read_table(path) -> dict[str, np.ndarray]:
    """Read a header-first CSV into float columns.

    Rows with any missing cell are dropped; non-numeric cells are an error.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if len(set(header)) != len(header):
            raise DomainError("duplicate column names in CSV header")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DomainError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            if any(c.strip().lower() in _MISSING for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DomainError(f"line {line_no}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {h: data[:, j] for j, h in enumerate(header)}


def design_from_table(
    table: Mapping[str, np.ndarray],
    columns: Sequence[str] | None = None,
    tiers: Sequence[Sequence[str]] | None = None,
    exclude: Sequence[str] = (),
) -> DesignMatrix:
    """Build a design from named columns; ``tiers`` (ordered lists of
    column names) fixes both the column order and the tier partition."""
    if tiers is not None:
        order = [c for tier in tiers for c in tier]
        sizes = [len(t) for t in tiers]
    else:
        order = list(columns) if columns is not None else [c for c in table if c not in exclude]
        sizes = None
    missing = [c for c in order if c not in table]
    if missing:
        raise DomainError(f"unknown covariate columns: {', '.join(missing)}")
    if len(set(order)) != len(order):
        raise DomainError("a covariate column is listed more than once")
    X = np.column_stack([table[c] for c in order])
    return DesignMatrix(X, tier_sizes=sizes, columns=order)
