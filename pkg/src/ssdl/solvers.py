"""Solvers for the penalized least-squares decomposition problem.

The problem is ``min_alpha 0.5*||y - D alpha||^2 + lam * pen(alpha)``
where ``pen`` is the plain l1 norm or a weighted group penalty.  Group
families whose prox has a closed form (singletons, partitions, nested
trees) are handled with accelerated proximal gradient descent (FISTA,
Beck & Teboulle 2009); arbitrarily overlapping families go through a
variable-splitting method with one auxiliary vector per group (ADMM,
Boyd et al. 2011).
"""

import sys
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .exceptions import ConditioningError, DimensionError, StructureError
from .groups import GroupStructure, StructureClass, classify, penalty_value
from .prox import project_l1_ball, prox_separable, prox_tree

__all__ = [
    "LassoProblem",
    "SolverOptions",
    "SolveResult",
    "ADMMState",
    "SolverCache",
    "objective",
    "grad_f",
    "lipschitz_estimate",
    "fista_solve",
    "ista_solve",
    "admm_solve",
    "solve",
]

# Above this many coordinates the splitting solver stops forming a dense
# inverse of the regularized normal equations and uses conjugate
# gradients instead.
DENSE_SYSTEM_MAX_P = 2000


@dataclass
class SolverOptions:
    """Knobs shared by all solvers; unused fields are ignored.

    ``tol`` is a relative objective-change threshold for the proximal
    gradient solvers and a relative residual threshold for the splitting
    solver.  ``lipschitz`` overrides the power-iteration estimate of the
    gradient Lipschitz constant.  ``support_eps`` is the magnitude below
    which a coefficient is reported as inactive.
    """

    max_iter: int = 1000
    tol: float = 1e-8
    lipschitz: float | None = None
    gamma: float = 1.0
    adapt_gamma: bool = False
    seed: int = 0
    support_eps: float = 1e-8
    trace_objective: bool = True
    verbose: bool = False

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("lipschitz override must be > 0")


@dataclass
class LassoProblem:
    """One decomposition instance: signal, dictionary, penalty."""

    y: np.ndarray
    D: np.ndarray
    lam: float
    penalty: GroupStructure | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        D = np.asarray(self.D, dtype=float)
        if y.ndim != 1:
            raise DimensionError(f"y must be a vector, got shape {y.shape}")
        if D.ndim != 2:
            raise DimensionError(f"D must be a matrix, got shape {D.shape}")
        if D.shape[0] != y.shape[0]:
            raise DimensionError(
                f"D has {D.shape[0]} rows but y has {y.shape[0]} entries"
            )
        lam = float(self.lam)
        if not (np.isfinite(lam) and lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {lam}")
        if self.penalty is not None and self.penalty.p != D.shape[1]:
            raise DimensionError(
                f"penalty covers {self.penalty.p} coordinates but D has "
                f"{D.shape[1]} columns"
            )
        self.y = y
        self.D = D
        self.lam = lam

    @property
    def m(self):
        return self.D.shape[0]

    @property
    def p(self):
        return self.D.shape[1]


@dataclass
class ADMMState:
    """Final splitting state: primal, per-group copies, per-group duals."""

    w: np.ndarray
    z: list
    nu: list


@dataclass
class SolveResult:
    alpha: np.ndarray
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float | None
    dual_residual: float | None
    support: np.ndarray
    solver: str
    state: ADMMState | None = field(default=None, repr=False)


class SolverCache:
    """Per-dictionary precomputations reused across many solves.

    Everything stored here is bitwise identical to what a solver would
    compute on its own, so using a cache never changes results; it only
    removes repeated work when coding many signals against one
    dictionary.
    """

    def __init__(self, D):
        self.D = np.asarray(D, dtype=float)
        self._gram = None
        self._lipschitz = None
        self._inverses = {}

    def gram(self):
        if self._gram is None:
            self._gram = np.ascontiguousarray(np.dot(self.D.T, self.D))
        return self._gram

    def lipschitz(self):
        if self._lipschitz is None:
            self._lipschitz = lipschitz_estimate(self.D)
        return self._lipschitz

    def system_inverse(self, penalty, gamma):
        """Inverse of ``D^T D + gamma * diag(counts)`` for a penalty."""
        key = (penalty, float(gamma))
        minv = self._inverses.get(key)
        if minv is None:
            counts = _membership_counts(penalty, self.D.shape[1])
            minv = _spd_inverse(self.gram(), gamma, counts)
            self._inverses[key] = minv
        return minv


# -- basic quantities ------------------------------------------------------


def objective(problem, alpha):
    """Value of ``0.5*||y - D alpha||^2 + lam * pen(alpha)``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (problem.p,):
        raise DimensionError(
            f"alpha has shape {alpha.shape}, expected ({problem.p},)"
        )
    resid = problem.y - problem.D @ alpha
    fit = 0.5 * float(resid @ resid)
    if problem.penalty is None:
        pen = float(np.sum(np.abs(alpha)))
    else:
        pen = penalty_value(alpha, problem.penalty)
    return fit + problem.lam * pen


def grad_f(problem, alpha):
    """Gradient of the smooth half: ``D^T (D alpha - y)``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (problem.p,):
        raise DimensionError(
            f"alpha has shape {alpha.shape}, expected ({problem.p},)"
        )
    return problem.D.T @ (problem.D @ alpha - problem.y)


def lipschitz_estimate(D, tol=1e-6, max_iter=500):
    """Upper bound on the largest eigenvalue of ``D^T D``.

    Power iteration from a deterministic all-ones start, stopped on a
    relative change below ``tol``, inflated by 0.1% so the returned
    value is safe to use as a gradient step bound.  An all-zero matrix
    gets the floor 1e-12.
    """
    D = np.asarray(D, dtype=float)
    p = D.shape[1]
    if p == 0 or not np.any(D):
        return 1e-12
    v = np.full(p, 1.0 / np.sqrt(p))
    est = 0.0
    for _ in range(max_iter):
        w = D.T @ (D @ v)
        new_est = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            # The start vector is in the null space; fall back to the
            # floor rather than dividing by zero.
            return 1e-12
        v = w / nrm
        if abs(new_est - est) <= tol * abs(new_est):
            est = new_est
            break
        est = new_est
    return max(est * 1.001, 1e-12)


# -- proximal gradient solvers --------------------------------------------


def _scalar_penalty_weights(penalty, lam, p):
    """Per-coordinate l1 weights for singleton families (or plain l1)."""
    w = np.zeros(p)
    if penalty is None:
        w[:] = lam
    else:
        for k, g in enumerate(penalty.groups):
            w[g[0]] += lam * penalty.weights[k]
    return w


def _select_prox(penalty):
    cls = classify(penalty)
    if cls == StructureClass.GENERAL_OVERLAP:
        raise StructureError(
            "penalty groups overlap without nesting; use admm_solve"
        )
    if cls in (StructureClass.SINGLETONS, StructureClass.PARTITION):
        return prox_separable
    return prox_tree


def _prox_gradient(problem, opts, accelerated, cache):
    opts = opts or SolverOptions()
    pen = problem.penalty
    gram = cache.gram() if cache is not None else \
        np.ascontiguousarray(np.dot(problem.D.T, problem.D))
    b = np.dot(problem.D.T, problem.y)
    y2 = float(problem.y @ problem.y)
    if opts.lipschitz is not None:
        step_l = float(opts.lipschitz)
    elif cache is not None:
        step_l = cache.lipschitz()
    else:
        step_l = lipschitz_estimate(problem.D)

    scalar = pen is None or classify(pen) == StructureClass.SINGLETONS
    if scalar:
        lam_w = _scalar_penalty_weights(pen, problem.lam, problem.p)
        alpha, trace, iters, converged = _kernels.prox_grad_kernel(
            gram, b, y2, lam_w, step_l, opts.max_iter, opts.tol, accelerated
        )
    else:
        prox_fn = _select_prox(pen)
        alpha, trace, iters, converged = _prox_gradient_grouped(
            problem, opts, accelerated, gram, b, y2, step_l, prox_fn
        )

    name = "fista" if accelerated else "ista"
    result = SolveResult(
        alpha=alpha,
        objective_trace=np.asarray(trace),
        iterations=iters,
        converged=converged,
        primal_residual=None,
        dual_residual=None,
        support=np.flatnonzero(np.abs(alpha) > opts.support_eps),
        solver=name,
    )
    if opts.verbose:
        _emit_diagnostics(result)
    return result


def _prox_gradient_grouped(problem, opts, accelerated, gram, b, y2, step_l,
                           prox_fn):
    pen = problem.penalty
    lam = problem.lam
    p = problem.p
    x = np.zeros(p)
    z = x
    tmom = 1.0
    trace = [0.5 * y2]
    iters = 0
    converged = False
    for k in range(1, opts.max_iter + 1):
        u = z - (gram @ z - b) / step_l
        xn = prox_fn(u, pen, lam / step_l)
        obj = 0.5 * y2 - float(b @ xn) + 0.5 * float(xn @ (gram @ xn)) \
            + lam * penalty_value(xn, pen)
        trace.append(obj)
        iters = k
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tmom * tmom))
        if accelerated:
            z = xn + ((tmom - 1.0) / tn) * (xn - x)
        else:
            z = xn
        tmom = tn
        x = xn
        if abs(trace[-2] - trace[-1]) <= opts.tol * (1.0 + abs(trace[-2])):
            converged = True
            break
    return x, np.array(trace), iters, converged


def fista_solve(problem, opts=None, cache=None):
    """Accelerated proximal gradient descent from a zero start.

    Requires a penalty whose prox is available in closed form: plain
    l1, singleton or partition families, or nested (tree) families.
    Stops when the relative objective change drops below ``opts.tol``.
    """
    return _prox_gradient(problem, opts, True, cache)


def ista_solve(problem, opts=None, cache=None):
    """Unaccelerated proximal gradient descent (monotone descent)."""
    return _prox_gradient(problem, opts, False, cache)


# -- splitting solver ------------------------------------------------------


def _membership_counts(penalty, p):
    if penalty is None:
        return np.ones(p)
    return penalty.membership_counts()


def _flat_groups(penalty, lam, p):
    """Concatenated indices, segment starts and per-group thresholds."""
    if penalty is None:
        idx = np.arange(p, dtype=np.int64)
        starts = np.arange(p + 1, dtype=np.int64)
        lam_eta = np.full(p, lam)
        q_inf = False
    else:
        concat, st, _ = penalty.flat_indices()
        idx = concat.astype(np.int64)
        starts = st.astype(np.int64)
        lam_eta = lam * penalty.weights
        q_inf = penalty.q == np.inf
    return idx, starts, np.ascontiguousarray(lam_eta), q_inf


def _spd_inverse(gram, gamma, counts):
    """Inverse of ``gram + gamma*diag(counts)`` via a Cholesky factor.

    Raises :class:`ConditioningError` when the system is not positive
    definite, which happens when some coordinate is covered by no group
    and ``D^T D`` is singular along it.
    """
    m = gram + gamma * np.diag(counts)
    try:
        factor = scipy.linalg.cho_factor(m, check_finite=False)
    except scipy.linalg.LinAlgError as e:
        raise ConditioningError(
            "regularized normal equations are not positive definite "
            "(a coordinate outside all groups with rank-deficient D?)"
        ) from e
    return np.ascontiguousarray(
        scipy.linalg.cho_solve(factor, np.eye(gram.shape[0]),
                               check_finite=False)
    )


def admm_solve(problem, opts=None, cache=None):
    """Variable-splitting solver for arbitrary (overlapping) families.

    Each group gets its own copy of its coordinates and its own dual
    vector (both started at zero); the primal update solves the
    regularized normal equations through one cached SPD factorization.
    Works for every structure class, including general overlap.

    The returned coefficients average the per-group copies coordinate
    by coordinate, so they carry the exact zero pattern the group
    shrinkage produces (the consensus variable itself is dense at any
    finite tolerance; it is available in ``state.w``).  Coordinates
    outside every group take the consensus value.  The last trace entry
    is the objective of the returned coefficients.
    """
    opts = opts or SolverOptions()
    pen = problem.penalty
    p = problem.p
    idx, starts, lam_eta, q_inf = _flat_groups(pen, problem.lam, p)
    gram = cache.gram() if cache is not None else \
        np.ascontiguousarray(np.dot(problem.D.T, problem.D))
    b = np.dot(problem.D.T, problem.y)
    y2 = float(problem.y @ problem.y)

    if p > DENSE_SYSTEM_MAX_P:
        return _admm_cg(problem, opts, gram, b, y2, idx, starts, lam_eta,
                        q_inf)

    if cache is not None:
        minv = cache.system_inverse(pen, opts.gamma)
    else:
        minv = _spd_inverse(gram, opts.gamma, _membership_counts(pen, p))

    counts = np.ascontiguousarray(_membership_counts(pen, p))
    (w, z, uu, trace, pri_hist, dual_hist, iters, converged, r_pri, r_dual,
     gamma) = _kernels.admm_kernel(
        gram, b, y2, minv, counts, idx, starts, lam_eta, q_inf,
        float(opts.gamma), bool(opts.adapt_gamma), float(opts.tol),
        int(opts.max_iter), bool(opts.trace_objective),
    )

    z_groups = [z[starts[g]:starts[g + 1]].copy()
                for g in range(len(starts) - 1)]
    nu_groups = [gamma * uu[starts[g]:starts[g + 1]]
                 for g in range(len(starts) - 1)]
    alpha = _consensus_alpha(w, z, idx, starts, counts)
    trace = np.asarray(trace)
    trace[-1] = objective(problem, alpha)
    result = SolveResult(
        alpha=alpha,
        objective_trace=trace,
        iterations=iters,
        converged=converged,
        primal_residual=float(r_pri),
        dual_residual=float(r_dual),
        support=np.flatnonzero(np.abs(alpha) > opts.support_eps),
        solver="admm",
        state=ADMMState(w=w, z=z_groups, nu=nu_groups),
    )
    if opts.verbose:
        _emit_diagnostics(result, pri_hist, dual_hist)
    return result


def _consensus_alpha(w, z, idx, starts, counts):
    """Average the group copies; exact zeros survive the average."""
    acc = np.zeros_like(w)
    np.add.at(acc, idx, z)
    covered = counts > 0
    alpha = np.where(covered, acc / np.maximum(counts, 1), w)
    # A coordinate whose every copy is exactly zero stays exactly zero
    # (0/k == 0.0), so the penalty's support structure is preserved.
    return alpha


def _admm_cg(problem, opts, gram, b, y2, idx, starts, lam_eta, q_inf):
    """Large-p fallback: same iteration, conjugate-gradient primal step.

    ``adapt_gamma`` is ignored here; the step parameter stays fixed.
    """
    import scipy.sparse.linalg

    p = problem.p
    counts = _membership_counts(problem.penalty, p)
    gamma = float(opts.gamma)
    diag_cur = gamma * counts

    def matvec(v):
        return gram @ v + diag_cur * v

    nc = idx.size
    z = np.zeros(nc)
    uu = np.zeros(nc)
    w = np.zeros(p)
    trace = [0.5 * y2]
    iters = 0
    converged = False
    r_pri = np.inf
    r_dual = np.inf
    seg = [slice(starts[g], starts[g + 1]) for g in range(len(starts) - 1)]
    for k in range(1, opts.max_iter + 1):
        rhs = b + np.bincount(idx, weights=gamma * (z + uu), minlength=p)
        op = scipy.sparse.linalg.LinearOperator((p, p), matvec=matvec)
        w, info = scipy.sparse.linalg.cg(op, rhs, x0=w, rtol=1e-12,
                                         atol=0.0, maxiter=10 * p)
        if info != 0:
            raise ConditioningError(
                f"conjugate gradient did not converge (info={info})"
            )
        zprev = z.copy()
        wg = w[idx]
        v = wg - uu
        pri2 = 0.0
        dual2 = 0.0
        for g, s in enumerate(seg):
            t = lam_eta[g] / gamma
            vg = v[s]
            if q_inf:
                z[s] = vg - project_l1_ball(vg, t)
            else:
                nrm = float(np.linalg.norm(vg))
                z[s] = 0.0 if nrm <= t else (1.0 - t / nrm) * vg
            d = z[s] - wg[s]
            uu[s] += d
            pri2 = max(pri2, float(d @ d))
            dz = z[s] - zprev[s]
            dual2 = max(dual2, float(dz @ dz))
        r_pri = np.sqrt(pri2)
        r_dual = gamma * np.sqrt(dual2)
        iters = k
        if opts.trace_objective:
            trace.append(
                0.5 * y2 - float(b @ w) + 0.5 * float(w @ (gram @ w))
                + float(lam_eta @ _group_norms(w, idx, starts, q_inf))
            )
        scale = opts.tol * (1.0 + float(np.linalg.norm(w)))
        if r_pri <= scale and r_dual <= scale:
            converged = True
            break
    z_groups = [z[s].copy() for s in seg]
    nu_groups = [gamma * uu[s] for s in seg]
    alpha = _consensus_alpha(w, z, idx, starts, counts)
    if opts.trace_objective:
        trace[-1] = objective(problem, alpha)
    else:
        trace = [objective(problem, alpha)]
    return SolveResult(
        alpha=alpha,
        objective_trace=np.asarray(trace),
        iterations=iters,
        converged=converged,
        primal_residual=float(r_pri),
        dual_residual=float(r_dual),
        support=np.flatnonzero(np.abs(alpha) > opts.support_eps),
        solver="admm",
        state=ADMMState(w=w, z=z_groups, nu=nu_groups),
    )


def _group_norms(w, idx, starts, q_inf):
    vals = w[idx]
    if q_inf:
        return np.maximum.reduceat(np.abs(vals), starts[:-1])
    return np.sqrt(np.add.reduceat(vals * vals, starts[:-1]))


def _emit_diagnostics(result, pri_hist=None, dual_hist=None):
    trace = result.objective_trace
    for k in range(1, result.iterations + 1):
        obj = trace[k] if k < len(trace) else float("nan")
        if pri_hist is not None and k - 1 < len(pri_hist):
            sys.stderr.write(
                f"iter={k} obj={obj:.12g} "
                f"r_primal={pri_hist[k - 1]:.6g} "
                f"r_dual={dual_hist[k - 1]:.6g}\n"
            )
        else:
            sys.stderr.write(f"iter={k} obj={obj:.12g}\n")


def solve(problem, opts=None, cache=None):
    """Dispatch on the penalty's structure class.

    Plain l1, singleton, partition, and nested families go to
    :func:`fista_solve`; families with genuine overlap go to
    :func:`admm_solve`.
    """
    pen = problem.penalty
    if pen is None or classify(pen) != StructureClass.GENERAL_OVERLAP:
        return fista_solve(problem, opts, cache)
    return admm_solve(problem, opts, cache)
