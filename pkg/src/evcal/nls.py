"""Robust Levenberg-Marquardt over Euclidean and rotation parameter blocks.

A problem is a list of :class:`ParameterBlock` objects plus an ``evaluate``
callable. ``evaluate(values, need_jacobian)`` receives the current block
values (same order as the blocks) and returns ``(r, J)``: the stacked
residual vector and, when requested, its Jacobian with respect to the
concatenated tangent coordinates of *all* blocks (constant blocks included;
their columns are ignored). ``J`` may be a dense array or a scipy sparse
matrix. Returning ``J = None`` while a Jacobian is requested falls back to
forward differences.

Rotation blocks are perturbed on the right: ``R <- R Exp(delta)``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import so3
from .errors import InvalidArgumentError, InvalidProblemError, SolverError

EUCLIDEAN = "euclidean"
ROTATION = "rotation3"


@dataclass
class ParameterBlock:
    """One or more parameters sharing a manifold kind.

    A rotation block may hold a stack of matrices, shape ``(..., 3, 3)``;
    its tangent size is three per matrix.
    """

    value: np.ndarray
    kind: str = EUCLIDEAN
    constant: bool = False
    name: str = ""

    def __post_init__(self):
        self.value = np.array(self.value, dtype=float)
        if self.kind not in (EUCLIDEAN, ROTATION):
            raise InvalidArgumentError(f"unknown block kind {self.kind!r}")
        if self.kind == ROTATION:
            so3.check_rotation(self.value)

    @property
    def tangent_size(self):
        if self.kind == ROTATION:
            return 3 * (self.value.size // 9)
        return self.value.size

    def plus(self, value, delta):
        if self.kind == ROTATION:
            return value @ so3.so3_exp(delta.reshape(value.shape[:-2] + (3,)))
        return value + delta.reshape(value.shape)


@dataclass(frozen=True)
class RobustLoss:
    """``rho`` applied to squared residual-block norms.

    ``huber``: rho(s) = s for s <= scale^2, else 2 scale sqrt(s) - scale^2.
    ``soft_l1``: rho(s) = 2 (sqrt(s + scale^2) - scale), a smooth |r|.
    """

    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "soft_l1"):
            raise InvalidArgumentError(f"unknown loss {self.kind!r}")
        if self.kind != "none" and not self.scale > 0:
            raise InvalidArgumentError("loss scale must be positive")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "none":
            return s, np.ones_like(s)
        if self.kind == "huber":
            d = self.scale
            root = np.sqrt(np.maximum(s, d * d))
            inlier = s <= d * d
            return np.where(inlier, s, 2.0 * d * root - d * d), np.where(inlier, 1.0, d / root)
        root = np.sqrt(s + self.scale**2)
        return 2.0 * (root - self.scale), 1.0 / root


def huber(delta=2.0):
    return RobustLoss("huber", delta)


@dataclass
class SolverOptions:
    max_iterations: int = 100
    function_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-14
    initial_lambda: float = 1e-4
    min_lambda: float = 1e-12
    max_lambda: float = 1e8
    min_diagonal: float = 1e-6
    reorthonormalize_every: int = 25
    fd_step: float = 1e-7
    verbose: bool = False


@dataclass
class SolverReport:
    iterations: int = 0
    accepted_steps: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    termination: str = ""
    gradient_norm: float = float("nan")
    success: bool = False
    num_residuals: int = 0
    num_parameters: int = 0
    cost_history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "accepted_steps": self.accepted_steps,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "gradient_norm": self.gradient_norm,
            "success": self.success,
            "num_residuals": self.num_residuals,
            "num_parameters": self.num_parameters,
        }


class Problem:
    def __init__(self, blocks, evaluate, residual_block_size=1):
        self.blocks = list(blocks)
        self.evaluate = evaluate
        self.residual_block_size = int(residual_block_size)
        sizes = [b.tangent_size for b in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        free = [np.arange(o, o + s) for o, s, b in zip(self.offsets, sizes, self.blocks) if not b.constant]
        self.free = np.concatenate(free) if free else np.zeros(0, int)

    @property
    def tangent_size(self):
        return int(self.offsets[-1])

    def values(self):
        return [b.value for b in self.blocks]

    def plus(self, values, delta_free):
        full = np.zeros(self.tangent_size)
        full[self.free] = delta_free
        out = []
        for k, (b, v) in enumerate(zip(self.blocks, values)):
            if b.constant:
                out.append(v)
            else:
                out.append(b.plus(v, full[self.offsets[k] : self.offsets[k + 1]]))
        return out

    def residuals(self, values):
        r, _ = self.evaluate(values, False)
        return np.asarray(r, dtype=float)

    def linearize(self, values, fd_step=1e-7):
        r, J = self.evaluate(values, True)
        r = np.asarray(r, dtype=float)
        if J is None:
            J = self.numeric_jacobian(values, r, fd_step)
        return r, J

    def numeric_jacobian(self, values, r0=None, step=1e-7, central=False):
        """Finite-difference Jacobian over all tangent coordinates."""
        if r0 is None:
            r0 = self.residuals(values)
        J = np.zeros((r0.size, self.tangent_size))
        for k, b in enumerate(self.blocks):
            base = values[k]
            flat = base.reshape(-1)
            for a in range(b.tangent_size):
                if b.kind == ROTATION:
                    h = step
                else:
                    h = step * max(1.0, abs(flat[a]))
                delta = np.zeros(b.tangent_size)
                delta[a] = h
                vals = list(values)
                vals[k] = b.plus(base, delta)
                rp = self.residuals(vals)
                if central:
                    vals[k] = b.plus(base, -delta)
                    J[:, self.offsets[k] + a] = (rp - self.residuals(vals)) / (2 * h)
                else:
                    J[:, self.offsets[k] + a] = (rp - r0) / h
        return J


def _robust_cost(problem, loss, r):
    m = problem.residual_block_size
    s = np.sum(r.reshape(-1, m) ** 2, axis=1)
    rho, drho = loss(s)
    return 0.5 * float(np.sum(rho)), drho


def _normal_equations(J, r, w_rows, free):
    if sp.issparse(J):
        J = sp.csr_matrix(J)
        Jw = sp.diags(np.sqrt(w_rows)) @ J
        H = (Jw.T @ Jw).tocsr()
        g = J.T @ (w_rows * r)
        H = H[free][:, free]
        return H, g[free]
    J = np.asarray(J)
    Jf = J[:, free]
    H = Jf.T @ (w_rows[:, None] * Jf)
    g = Jf.T @ (w_rows * r)
    return H, g


def _solve_damped(H, g, lam, min_diag):
    if sp.issparse(H):
        D = np.clip(H.diagonal(), min_diag, 1e32)
        A = (H + sp.diags(lam * D)).tocsc()
        try:
            lu = splu(A)
        except RuntimeError:
            return None
        x = lu.solve(-g)
    else:
        D = np.clip(np.diag(H), min_diag, 1e32)
        A = H + np.diag(lam * D)
        try:
            c = scipy.linalg.cho_factor(A, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            return None
        x = scipy.linalg.cho_solve(c, -g, check_finite=False)
    if not np.all(np.isfinite(x)):
        return None
    return x


def solve(problem, loss=RobustLoss(), options=None):
    """Minimize ``0.5 * sum(rho(|r_b|^2))``; block values are updated in place."""
    options = options or SolverOptions()
    report = SolverReport()
    values = problem.values()
    r, J = problem.linearize(values, options.fd_step)
    if not np.all(np.isfinite(r)):
        raise InvalidProblemError("non-finite residual at the initial point")
    if r.size % problem.residual_block_size:
        raise InvalidProblemError("residual length is not a multiple of the block size")
    cost, drho = _robust_cost(problem, loss, r)
    report.initial_cost = cost
    report.num_residuals = r.size
    report.num_parameters = problem.free.size
    report.cost_history.append(cost)
    m = problem.residual_block_size
    lam = options.initial_lambda
    last_reject = None

    if problem.free.size == 0:
        report.final_cost = cost
        report.termination = "no free parameters"
        report.success = True
        return report

    need_linearize = False
    while True:
        if need_linearize:
            r, J = problem.linearize(values, options.fd_step)
            cost, drho = _robust_cost(problem, loss, r)
            need_linearize = False
        w_rows = np.repeat(drho, m)
        H, g = _normal_equations(J, r, w_rows, problem.free)
        report.gradient_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if report.gradient_norm < options.gradient_tolerance:
            report.termination = "gradient tolerance"
            report.success = True
            break
        if report.iterations >= options.max_iterations:
            report.termination = "max iterations"
            report.success = True
            break
        if cost <= 1e-300:
            report.termination = "zero cost"
            report.success = True
            break

        report.iterations += 1
        step = _solve_damped(H, g, lam, options.min_diagonal)
        accepted = False
        if step is None:
            last_reject = "factorization"
        else:
            trial = problem.plus(values, step)
            try:
                r_new = problem.residuals(trial)
                ok = r_new.shape == r.shape and np.all(np.isfinite(r_new))
            except (ValueError, ArithmeticError):
                ok = False
            if ok:
                new_cost, _ = _robust_cost(problem, loss, r_new)
                if new_cost < cost:
                    accepted = True
            last_reject = None if accepted else "cost"

        if accepted:
            rel = (cost - new_cost) / max(cost, 1e-300)
            small_step = np.linalg.norm(step) <= options.parameter_tolerance * (
                1.0 + np.linalg.norm(np.concatenate([v.ravel() for v in values]))
            )
            values = trial
            report.accepted_steps += 1
            if options.reorthonormalize_every and report.accepted_steps % options.reorthonormalize_every == 0:
                values = _reorthonormalize(problem, values)
            cost = new_cost
            report.cost_history.append(cost)
            lam = max(lam * 0.5, options.min_lambda)
            need_linearize = True
            if options.verbose:
                print(f"  it {report.iterations:3d} cost {cost:.6e} lambda {lam:.1e}")
            if rel < options.function_tolerance or small_step or cost < 1e-300:
                r, J = problem.linearize(values, options.fd_step)
                cost, drho = _robust_cost(problem, loss, r)
                H, g = _normal_equations(J, r, np.repeat(drho, m), problem.free)
                report.gradient_norm = float(np.max(np.abs(g))) if g.size else 0.0
                report.termination = "function tolerance" if not small_step else "parameter tolerance"
                report.success = True
                break
        else:
            lam *= 2.0
            if lam > options.max_lambda:
                if last_reject == "factorization":
                    raise SolverError("normal equations could not be factorized at maximum damping")
                report.termination = "no further progress"
                report.success = True
                break

    for b, v in zip(problem.blocks, values):
        b.value = v
    report.final_cost = cost
    return report


def _reorthonormalize(problem, values):
    out = []
    for b, v in zip(problem.blocks, values):
        if b.kind == ROTATION and not b.constant:
            v = so3.project_to_rotation(v)
        out.append(v)
    return out


def check_jacobian(problem, values=None, step=1e-6):
    """Max deviation between the analytic and a central-difference Jacobian.

    Deviations are scaled by ``max(1, |analytic|)`` entrywise.
    """
    values = problem.values() if values is None else values
    r, J = problem.evaluate(values, True)
    if J is None:
        raise InvalidArgumentError("problem has no analytic Jacobian")
    J = J.toarray() if sp.issparse(J) else np.asarray(J)
    Jn = problem.numeric_jacobian(values, np.asarray(r), step=step, central=True)
    cols = problem.free
    dev = np.abs(J[:, cols] - Jn[:, cols]) / np.maximum(1.0, np.abs(J[:, cols]))
    return float(dev.max()) if dev.size else 0.0
