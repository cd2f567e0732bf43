"""Solvers for the attack programs, with forward-pipeline certification.

Two engines:

* :func:`solve_qp` - the convex feature-phase program (closest point of
  a polyhedron).  A dual projected-gradient loop with Nesterov momentum
  gets near the optimum, an active-set refinement lands exactly on the
  optimal face, and a Farkas-style certificate flags infeasible sign
  patterns.

* :func:`solve_qcqp` - the non-convex image programs.  Continuous
  relaxation of the pixels with an augmented Lagrangian over the squared
  gradient-magnitude equalities and the sign inequalities (inner loop:
  spectral projected gradient), then rounding, then a greedy integer
  repair over single-pixel moves scored by (constraint violation, then
  objective), with perturbed restarts.

A candidate only counts as a success when re-running the full forward
pipeline reproduces every target template bit-for-bit; that check is the
ground truth, never the solver's internal bookkeeping.  All reported
statuses short of certification are advisory: the non-convex stage
cannot prove infeasibility.

Determinism: with a fixed ``rng_seed`` the whole pipeline is
deterministic as long as the time limit does not bite (the clock is
polled only at coarse stage boundaries).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .pipeline import (
    SOBEL_X,
    SOBEL_Y,
    GrayImage,
    Template,
    binarize,
    convolve,
    enroll,
    project,
    sobel,
)
from .problems import AttackProblem, ProblemKind

_PIXEL_SCALE = 255.0
#: Scaled upper bound for the auxiliary magnitude variables; slightly
#: above the largest attainable gradient magnitude (4 * 255 * sqrt(2)).
_Y_BOUND = 4.0 * np.sqrt(2.0) * 1.01
#: Extra margin (raw pixel units) imposed on the sign constraints during
#: the continuous stage only, so the rounded iterate lands inside the
#: feasible cone instead of on its boundary.  The integer repair then
#: walks the objective back down under the problem's own margin.
_CONTINUOUS_MARGIN = 4.0
#: A second continuous pass runs with this nearly-true margin: its
#: optimum sits in the basin of the true integer optimum, while the
#: inflated pass trades a little objective for reliable rounding.
_SLIM_MARGIN = 0.25
#: Absolute tolerance on |S^2 - target^2| under which an integer image
#: counts as matching a target feature.  Squared magnitudes of integer
#: images are integers, so 0.5 separates exact preimages from everything
#: else while tolerating the float round-trip of squaring a square root.
_IMAGE_CERT_TOL = 0.5

_INNER_ITERS = 250
_QP_MAX_ITERS = 60_000
_RHO_INIT = 10.0
_RHO_MAX = 1e9


class SolverError(ValueError):
    """Configuration or problem/solver mismatch."""


class SolveStatus(Enum):
    CERTIFIED_FEASIBLE = "certified_feasible"
    CONTINUOUS_ONLY = "continuous_only"
    INFEASIBLE = "infeasible"
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class SolverConfig:
    time_limit: float = 150.0
    max_outer_iterations: int = 30
    penalty_growth: float = 4.0
    feasibility_tol: float = 1e-7
    repair_budget: int = 20_000
    rng_seed: int = 1
    restarts: int = 8

    def __post_init__(self):
        if self.time_limit <= 0:
            raise SolverError("time_limit must be positive")
        if self.penalty_growth <= 1:
            raise SolverError("penalty_growth must exceed 1")
        if self.feasibility_tol <= 0 or self.restarts < 1 or self.max_outer_iterations < 1:
            raise SolverError("bad solver configuration")
        if self.rng_seed < 0 or self.repair_budget < 0:
            raise SolverError("rng_seed and repair_budget must be non-negative")


@dataclass(frozen=True)
class SolveReport:
    status: SolveStatus
    solution: GrayImage | np.ndarray | None
    objective: float
    euclidean_distance: float
    wall_time: float
    certification: dict[str, bool] = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.status is SolveStatus.CERTIFIED_FEASIBLE


def report_to_json(report: SolveReport) -> dict:
    from .pgm import dumps_pgm

    if report.solution is None:
        solution = None
    elif isinstance(report.solution, GrayImage):
        solution = {"type": "image", "pgm": dumps_pgm(report.solution)}
    else:
        solution = {"type": "feature", "values": [float(v) for v in report.solution]}

    def finite(v: float) -> float | None:
        return float(v) if np.isfinite(v) else None

    return {
        "status": report.status.value,
        "objective": finite(report.objective),
        "euclidean_distance": finite(report.euclidean_distance),
        "wall_time": report.wall_time,
        "certification": dict(report.certification),
        "solution": solution,
    }


# ---------------------------------------------------------------------------
# Linearized gradient operators


@lru_cache(maxsize=64)
def conv_operators(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense matrices applying the two gradient convolutions to a
    flattened image; built through the forward pipeline itself so the
    solver's linear algebra cannot drift from the oracle's."""
    n = height * width
    a1 = np.zeros((n, n))
    a2 = np.zeros((n, n))
    basis = np.zeros((height + 2, width + 2))
    for k in range(n):
        basis[1 + k // width, 1 + k % width] = 1.0
        a1[:, k] = convolve(SOBEL_X, basis).reshape(-1)
        a2[:, k] = convolve(SOBEL_Y, basis).reshape(-1)
        basis[1 + k // width, 1 + k % width] = 0.0
    a1.flags.writeable = False
    a2.flags.writeable = False
    return a1, a2


# ---------------------------------------------------------------------------
# Certification


def certify(candidate: GrayImage, problem: AttackProblem) -> dict[str, bool]:
    """Ground-truth success map for a candidate image.

    Sign-constrained problems get one entry per victim: exact template
    equality after re-running the full pipeline (from the stored
    password when available, else through the stored matrix).  The
    image-phase problem gets a single ``feature`` entry comparing
    squared gradient magnitudes against the target.
    """
    if (candidate.height, candidate.width) != (problem.height, problem.width):
        raise SolverError("candidate dimensions do not match the problem")
    if problem.kind is ProblemKind.IMAGE_PHASE:
        feat = sobel(candidate)
        resid = np.abs(feat**2 - problem.target_feature**2)
        return {"feature": bool(resid.max(initial=0.0) <= _IMAGE_CERT_TOL)}
    out: dict[str, bool] = {}
    for i, cs in enumerate(problem.constraint_sets):
        if cs.password is not None:
            got = enroll(candidate, cs.password, cs.m, cs.orthonormalize)
        else:
            got = binarize(project(sobel(candidate), cs.matrix))
        out[str(i)] = got == cs.template
    return out


# ---------------------------------------------------------------------------
# Feature-phase QP


def _qp_constraints(problem: AttackProblem) -> tuple[np.ndarray, np.ndarray]:
    """Rows g, offsets c with the feasible set {x >= 0 : g @ x <= c}."""
    cs = problem.constraint_sets[0]
    mat = cs.matrix
    g = np.vstack([mat[:, cs.zero_idx].T, -mat[:, cs.one_idx].T])
    c = np.concatenate(
        [np.full(cs.zero_idx.size, -problem.delta), np.zeros(cs.one_idx.size)]
    )
    return g, c


def _active_set_polish(
    a: np.ndarray, g: np.ndarray, c: np.ndarray, x0: np.ndarray, tol: float
) -> np.ndarray | None:
    """Exact projection onto the polyhedron via primal active-set steps,
    seeded near the optimum.  Returns None if the working set cycles."""
    n = a.size
    slack0 = c - g @ x0
    active = set(np.flatnonzero(slack0 <= 10 * tol + 1e-9))
    bound = set(np.flatnonzero(x0 <= 10 * tol + 1e-9))
    for _ in range(120):
        act = sorted(active)
        free = np.array(sorted(set(range(n)) - bound), dtype=np.intp)
        x = np.zeros(n)
        nu = np.zeros(len(act))
        if free.size:
            if act:
                ga = g[np.array(act, dtype=np.intp)][:, free]
                rhs = ga @ a[free] - c[np.array(act, dtype=np.intp)]
                try:
                    nu = np.linalg.lstsq(ga @ ga.T / 2.0, rhs, rcond=None)[0]
                except np.linalg.LinAlgError:
                    return None
                x[free] = a[free] - ga.T @ nu / 2.0
            else:
                x[free] = a[free]
        # Multipliers of the active bounds from stationarity.
        grad = 2.0 * (x - a)
        if act:
            grad += g[np.array(act, dtype=np.intp)].T @ nu
        changed = False
        worst_drop, worst_val = None, -1e-9
        for j, row in enumerate(act):
            if nu[j] < worst_val:
                worst_val, worst_drop = nu[j], ("c", row)
        for i in sorted(bound):
            if grad[i] < worst_val:
                worst_val, worst_drop = grad[i], ("b", i)
        if worst_drop is not None:
            kind, idx = worst_drop
            (active if kind == "c" else bound).discard(idx)
            changed = True
        else:
            viol = g @ x - c
            adds = np.flatnonzero(viol > 1e-11)
            neg = np.flatnonzero(x < -1e-11)
            if adds.size:
                active.add(int(adds[np.argmax(viol[adds])]))
                changed = True
            if neg.size:
                bound.update(int(i) for i in neg)
                changed = True
        if not changed:
            return np.maximum(x, 0.0)
    return None


def _sign_score(x: np.ndarray, problem: AttackProblem) -> tuple[int, float]:
    cs = problem.constraint_sets[0]
    proj = project(x, cs.matrix)
    wrong = int((proj[cs.zero_idx] >= 0).sum() + (proj[cs.one_idx] < 0).sum())
    worst = max(
        float(np.maximum(proj[cs.zero_idx], 0.0).max(initial=0.0)),
        float(np.maximum(-proj[cs.one_idx], 0.0).max(initial=0.0)),
    )
    return wrong, worst


def _nudge_onto_signs(x: np.ndarray, problem: AttackProblem, kappa: float) -> np.ndarray:
    """Lift every non-negative-side projection sitting at or just below
    zero to a small positive value in one joint correction; keep the
    result only if the overall sign picture improves."""
    cs = problem.constraint_sets[0]
    mat = cs.matrix
    best = x
    best_score = _sign_score(x, problem)
    cur = x
    for _ in range(8):
        proj = project(cur, mat)
        if not (proj[cs.one_idx] < 0).any():
            break
        group = cs.one_idx[proj[cs.one_idx] < kappa]
        cols = mat[:, group]
        try:
            w = np.linalg.lstsq(cols.T @ cols, kappa - proj[group], rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        cur = np.maximum(0.0, cur + cols @ w)
        score = _sign_score(cur, problem)
        if score < best_score:
            best, best_score = cur, score
    return best


def solve_qp(problem: AttackProblem, config: SolverConfig | None = None) -> SolveReport:
    """Closest non-negative feature vector satisfying the sign pattern.

    Dual projected gradient with momentum, then an active-set polish;
    certification re-binarizes the solution's projections.
    """
    if problem.kind is not ProblemKind.FEATURE_PHASE:
        raise SolverError(f"solve_qp expects a feature-phase problem, got {problem.kind}")
    config = config or SolverConfig()
    start = time.monotonic()
    deadline = start + config.time_limit
    a = np.asarray(problem.anchor_feature, dtype=np.float64)
    cs = problem.constraint_sets[0]
    g, c = _qp_constraints(problem)
    scale = max(1.0, float(np.linalg.norm(a)))
    tol_p = config.feasibility_tol * scale
    lip = max(1e-12, float(np.linalg.norm(g, 2)) ** 2 / 2.0)
    step = 1.0 / lip

    def primal(lam: np.ndarray) -> np.ndarray:
        return np.maximum(0.0, a - 0.5 * (g.T @ lam))

    lam = np.zeros(g.shape[0])
    mom = lam.copy()
    t_mom = 1.0
    status = SolveStatus.CONTINUOUS_ONLY
    x = primal(lam)
    prev_norm = 0.0
    growth_checks = 0
    for it in range(_QP_MAX_ITERS):
        grad = g @ primal(mom) - c
        lam_new = np.maximum(0.0, mom + step * grad)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        mom = lam_new + ((t_mom - 1.0) / t_new) * (lam_new - lam)
        if (mom - lam_new) @ (lam_new - lam) > 0:  # momentum restart
            mom = lam_new.copy()
            t_new = 1.0
        lam, t_mom = lam_new, t_new
        if it % 128 == 0 or it == _QP_MAX_ITERS - 1:
            x = primal(lam)
            resid = g @ x - c
            pviol = float(np.maximum(resid, 0.0).max(initial=0.0))
            gap = abs(float(lam @ resid))
            if pviol <= tol_p and gap <= tol_p * scale:
                break
            # An unbounded dual ray is the footprint of an empty feasible
            # set.  Track sustained norm growth; once the direction has
            # had time to stabilize, test it as a Farkas certificate:
            # y >= 0 with G^T y >= 0 and c.y < 0 proves infeasibility.
            norm = float(np.linalg.norm(lam))
            if norm > max(1.0, prev_norm * (1.0 + 1e-9)):
                growth_checks += 1
            else:
                growth_checks = 0
            prev_norm = norm
            if growth_checks >= 20 or norm > 1e4 * scale:
                y = lam / norm
                if (g.T @ y).min(initial=0.0) >= -1e-10 and c @ y < 0.0:
                    status = SolveStatus.INFEASIBLE
                    break
            if time.monotonic() > deadline:
                status = SolveStatus.TIMED_OUT
                break

    if status not in (SolveStatus.INFEASIBLE, SolveStatus.TIMED_OUT):
        # Bias the zero-threshold rows a hair into their strict interior
        # before the exact polish, so float noise cannot flip the active
        # ones to the wrong side of the binarization threshold.
        kappa = 1e-10 * scale
        c_solve = np.where(c == 0.0, -kappa, c)
        polished = _active_set_polish(a, g, c_solve, x, tol_p)
        if polished is not None:
            pv_new = float(np.maximum(g @ polished - c, 0.0).max(initial=0.0))
            pv_old = float(np.maximum(g @ x - c, 0.0).max(initial=0.0))
            obj_new = float(np.sum((polished - a) ** 2))
            obj_old = float(np.sum((x - a) ** 2))
            # The polish verifies KKT, which certifies optimality here;
            # the dual iterate may be slightly infeasible, so its lower
            # objective is no reason to reject the polished point.  Only
            # guard against a degenerate linear solve blowing up.
            if pv_new <= max(1e-9 * scale, pv_old) and obj_new <= 1.01 * obj_old + scale:
                x = polished
        x = _nudge_onto_signs(x, problem, kappa)

    if status is SolveStatus.INFEASIBLE:
        return SolveReport(
            status=status,
            solution=None,
            objective=float("inf"),
            euclidean_distance=float("inf"),
            wall_time=time.monotonic() - start,
            certification={"0": False},
        )
    certified = binarize(project(x, cs.matrix)) == cs.template
    if certified:
        status = SolveStatus.CERTIFIED_FEASIBLE
    objective = float(np.sum((x - a) ** 2))
    return SolveReport(
        status=status,
        solution=x,
        objective=objective,
        euclidean_distance=float(np.sqrt(objective)),
        wall_time=time.monotonic() - start,
        certification={"0": bool(certified)},
    )


# ---------------------------------------------------------------------------
# Continuous models (scaled units: pixels / 255)


class MergedModel:
    """Augmented Lagrangian of the sign-constrained image programs.

    Variables are the scaled pixels followed by the scaled magnitude
    auxiliaries: z = [x (n), y (n)].  Equalities y_p^2 = u_p^2 + v_p^2
    tie the auxiliaries to the gradients; inequalities put each victim's
    sign pattern on y's projections.
    """

    def __init__(self, problem: AttackProblem, margin: float | None = None):
        self.n = problem.n
        a1, a2 = conv_operators(problem.height, problem.width)
        self.a1, self.a2 = a1, a2
        self.anchor = problem.anchor_image.flat() / _PIXEL_SCALE
        margin = problem.delta if margin is None else margin
        rows, offs = [], []
        for cs in problem.constraint_sets:
            rows.append(cs.matrix[:, cs.zero_idx].T)
            offs.append(np.full(cs.zero_idx.size, margin / _PIXEL_SCALE))
            rows.append(-cs.matrix[:, cs.one_idx].T)
            offs.append(np.full(cs.one_idx.size, margin / _PIXEL_SCALE))
        self.rows = np.vstack(rows)
        self.offsets = np.concatenate(offs)
        self.n_eq = self.n
        self.n_ineq = self.rows.shape[0]
        self.lower = np.zeros(2 * self.n)
        self.upper = np.concatenate([np.ones(self.n), np.full(self.n, _Y_BOUND)])

    def initial_point(self, x_scaled: np.ndarray) -> np.ndarray:
        u = self.a1 @ x_scaled
        v = self.a2 @ x_scaled
        return np.concatenate([x_scaled, np.sqrt(u * u + v * v)])

    def project(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, self.lower, self.upper)

    def residuals(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x, y = z[: self.n], z[self.n :]
        u = self.a1 @ x
        v = self.a2 @ x
        h = y * y - u * u - v * v
        g = self.rows @ y + self.offsets
        return h, g

    def violation(self, z: np.ndarray) -> float:
        h, g = self.residuals(z)
        return max(
            float(np.abs(h).max(initial=0.0)), float(np.maximum(g, 0.0).max(initial=0.0))
        )

    def al_value(self, z, lam, mu, rho) -> float:
        x, _ = z[: self.n], z[self.n :]
        h, g = self.residuals(z)
        hinge = np.maximum(0.0, mu + rho * g)
        return float(
            np.sum((x - self.anchor) ** 2)
            + lam @ h
            + 0.5 * rho * h @ h
            + (hinge @ hinge - mu @ mu) / (2.0 * rho)
        )

    def al_grad(self, z, lam, mu, rho) -> np.ndarray:
        x, y = z[: self.n], z[self.n :]
        u = self.a1 @ x
        v = self.a2 @ x
        h = y * y - u * u - v * v
        g = self.rows @ y + self.offsets
        w = lam + rho * h
        gx = 2.0 * (x - self.anchor) - 2.0 * (self.a1.T @ (w * u) + self.a2.T @ (w * v))
        gy = 2.0 * w * y + self.rows.T @ np.maximum(0.0, mu + rho * g)
        return np.concatenate([gx, gy])

    def pixels_raw(self, z: np.ndarray) -> np.ndarray:
        return np.clip(np.rint(z[: self.n] * _PIXEL_SCALE), 0, 255).astype(np.int64)


class ImageModel:
    """Augmented Lagrangian of the feature-matching image program:
    squared gradient magnitudes must equal the target feature squared.
    Variables are the scaled pixels only."""

    def __init__(self, problem: AttackProblem):
        self.n = problem.n
        self.a1, self.a2 = conv_operators(problem.height, problem.width)
        self.anchor = problem.anchor_image.flat() / _PIXEL_SCALE
        self.target_sq = (problem.target_feature / _PIXEL_SCALE) ** 2
        self.n_eq = self.n
        self.n_ineq = 0
        self.lower = np.zeros(self.n)
        self.upper = np.ones(self.n)

    def initial_point(self, x_scaled: np.ndarray) -> np.ndarray:
        return x_scaled.copy()

    def project(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, 0.0, 1.0)

    def residuals(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = self.a1 @ z
        v = self.a2 @ z
        return u * u + v * v - self.target_sq, np.zeros(0)

    def violation(self, z: np.ndarray) -> float:
        h, _ = self.residuals(z)
        return float(np.abs(h).max(initial=0.0))

    def al_value(self, z, lam, mu, rho) -> float:
        h, _ = self.residuals(z)
        return float(np.sum((z - self.anchor) ** 2) + lam @ h + 0.5 * rho * h @ h)

    def al_grad(self, z, lam, mu, rho) -> np.ndarray:
        u = self.a1 @ z
        v = self.a2 @ z
        h = u * u + v * v - self.target_sq
        w = lam + rho * h
        return 2.0 * (z - self.anchor) + 2.0 * (self.a1.T @ (w * u) + self.a2.T @ (w * v))

    def pixels_raw(self, z: np.ndarray) -> np.ndarray:
        return np.clip(np.rint(z[: self.n] * _PIXEL_SCALE), 0, 255).astype(np.int64)


def _spg_minimize(model, z0, lam, mu, rho, max_iter, tol, deadline):
    """Spectral projected gradient (Barzilai-Borwein step, nonmonotone
    Armijo over the last 8 values)."""
    z = model.project(z0)
    f = model.al_value(z, lam, mu, rho)
    grad = model.al_grad(z, lam, mu, rho)
    alpha = 1.0 / max(1e-10, float(np.abs(grad).max(initial=0.0)))
    history = [f]
    for it in range(max_iter):
        d = model.project(z - alpha * grad) - z
        if float(np.abs(d).max(initial=0.0)) <= tol:
            break
        gtd = float(grad @ d)
        step_len = 1.0
        f_ref = max(history)
        while True:
            zn = z + step_len * d
            fn = model.al_value(zn, lam, mu, rho)
            if fn <= f_ref + 1e-4 * step_len * gtd or step_len < 1e-12:
                break
            step_len *= 0.5
        gn = model.al_grad(zn, lam, mu, rho)
        s = zn - z
        yv = gn - grad
        sy = float(s @ yv)
        alpha = min(1e8, max(1e-12, float(s @ s) / sy)) if sy > 1e-18 else min(1e8, 4.0 * alpha)
        z, f, grad = zn, fn, gn
        history.append(f)
        if len(history) > 8:
            history.pop(0)
        if it % 64 == 0 and time.monotonic() > deadline:
            break
    return z


def _continuous_stage(model, z0, config, deadline, on_round):
    """Outer augmented-Lagrangian loop.  ``on_round`` sees the rounded
    integer pixels once per round and may stop the stage early by
    returning True (used for en-route certification)."""
    lam = np.zeros(model.n_eq)
    mu = np.zeros(model.n_ineq)
    rho = _RHO_INIT
    z = model.project(z0)
    best_vio = np.inf
    for _ in range(config.max_outer_iterations):
        inner_tol = max(1e-10, 1e-4 / rho)
        z = _spg_minimize(model, z, lam, mu, rho, _INNER_ITERS, inner_tol, deadline)
        h, g = model.residuals(z)
        vio = max(
            float(np.abs(h).max(initial=0.0)), float(np.maximum(g, 0.0).max(initial=0.0))
        )
        if on_round(model.pixels_raw(z)):
            return z, 0.0, True
        if vio <= config.feasibility_tol:
            best_vio = min(best_vio, vio)
            break
        if vio <= 0.25 * best_vio or not np.isfinite(best_vio):
            lam = lam + rho * h
            if model.n_ineq:
                mu = np.maximum(0.0, mu + rho * g)
        else:
            rho = min(_RHO_MAX, rho * config.penalty_growth)
        best_vio = min(best_vio, vio)
        if time.monotonic() > deadline:
            break
    return z, best_vio, False


# ---------------------------------------------------------------------------
# Integer repair


class _SignScorer:
    """Vectorized scoring of integer candidates for sign-constrained
    problems; exact confirmation goes through the forward pipeline."""

    def __init__(self, problem: AttackProblem):
        self.problem = problem
        self.a1, self.a2 = conv_operators(problem.height, problem.width)
        self.anchor = problem.anchor_image.flat().astype(np.float64)
        self.big_m = np.hstack([cs.matrix for cs in problem.constraint_sets])
        self.want_zero = np.concatenate(
            [cs.template.bits == 0 for cs in problem.constraint_sets]
        )
        self.delta = problem.delta

    def score_batch(self, u_batch, v_batch, obj):
        s = np.sqrt(u_batch * u_batch + v_batch * v_batch)
        proj = s @ self.big_m
        bits = proj >= 0
        mism = (bits != ~self.want_zero).sum(axis=1)
        viol = np.where(self.want_zero, np.maximum(0.0, proj + self.delta), 0.0).sum(axis=1)
        viol += np.where(~self.want_zero, np.maximum(0.0, -proj), 0.0).sum(axis=1)
        return mism, viol, obj

    def exact_certified(self, pixels: np.ndarray) -> bool:
        problem = self.problem
        img = GrayImage(problem.width, problem.height, pixels.reshape(problem.height, problem.width))
        feat = sobel(img)
        return all(
            binarize(project(feat, cs.matrix)) == cs.template
            for cs in problem.constraint_sets
        )


class _FeatureScorer:
    """Scoring against a target feature (image-phase repair)."""

    def __init__(self, problem: AttackProblem):
        self.problem = problem
        self.a1, self.a2 = conv_operators(problem.height, problem.width)
        self.anchor = problem.anchor_image.flat().astype(np.float64)
        self.target_sq = np.asarray(problem.target_feature, dtype=np.float64) ** 2

    def score_batch(self, u_batch, v_batch, obj):
        resid = np.abs(u_batch * u_batch + v_batch * v_batch - self.target_sq)
        mism = (resid > _IMAGE_CERT_TOL).sum(axis=1)
        viol = resid.sum(axis=1)
        return mism, viol, obj

    def exact_certified(self, pixels: np.ndarray) -> bool:
        u = self.a1 @ pixels.astype(np.float64)
        v = self.a2 @ pixels.astype(np.float64)
        resid = np.abs(u * u + v * v - self.target_sq)
        return bool(resid.max(initial=0.0) <= _IMAGE_CERT_TOL)


_REPAIR_STEPS = np.array([d * s for d in range(1, 9) for s in (1, -1)], dtype=np.int64)
_PAIR_RANGE = (-3, -2, -1, 1, 2, 3)
_PAIR_STEPS = np.array([(a, b) for a in _PAIR_RANGE for b in _PAIR_RANGE], dtype=np.int64)
_TRIPLE_STEPS = np.array(
    [(a, b, c) for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)], dtype=np.int64
)
#: Pair moves cost O(n^2) per sweep and triples O(n^3); past these many
#: pixels the respective stage is skipped.
_PAIR_MOVE_LIMIT = 64
_TRIPLE_MOVE_LIMIT = 24
_PAIR_CHUNK = 32_768


class _RepairState:
    """Integer candidate with incrementally maintained gradients."""

    def __init__(self, scorer, pixels: np.ndarray):
        self.scorer = scorer
        self.x = pixels.astype(np.int64).copy()
        xf = self.x.astype(np.float64)
        self.u = scorer.a1 @ xf
        self.v = scorer.a2 @ xf
        mism, viol, _ = scorer.score_batch(self.u[None, :], self.v[None, :], np.zeros(1))
        self.obj = float(np.sum((xf - scorer.anchor) ** 2))
        self.score = (int(mism[0]), float(viol[0]), self.obj)

    def apply(self, updates, new_score):
        for pix, val in updates:
            d = float(val - self.x[pix])
            self.u += d * self.scorer.a1[:, pix]
            self.v += d * self.scorer.a2[:, pix]
            self.x[pix] = val
        self.obj = new_score[2]
        self.score = new_score


def _repair(scorer, pixels: np.ndarray, budget: int, deadline: float):
    """Greedy hill climb over pixel moves, accepted only on strict
    lexicographic improvement of (mismatched bits, hinge violation,
    objective).

    Single-pixel moves of magnitude 1..8 run first; when they stall and
    the image is small enough, coordinated two-pixel moves of magnitude
    up to 2 take over (they walk along constraint boundaries where any
    lone pixel change breaks a sign).  Every improvement that clears all
    mismatches is re-checked through the exact forward pipeline.
    Returns (best certified pixels or None, its objective, final pixels,
    final score).
    """
    n = pixels.size
    state = _RepairState(scorer, pixels)
    best_cert = None
    best_cert_obj = np.inf

    def note():
        nonlocal best_cert, best_cert_obj
        if state.score[0] == 0 and state.obj < best_cert_obj and scorer.exact_certified(state.x):
            best_cert, best_cert_obj = state.x.copy(), state.obj

    note()
    a1_rows = scorer.a1.T
    a2_rows = scorer.a2.T
    anchor = scorer.anchor

    groups: list[tuple[np.ndarray, np.ndarray]] = [
        (
            np.repeat(np.arange(n), _REPAIR_STEPS.size)[:, None],
            np.tile(_REPAIR_STEPS, n)[:, None],
        )
    ]
    if n <= _PAIR_MOVE_LIMIT:
        iu, ju = np.triu_indices(n, 1)
        groups.append(
            (
                np.stack(
                    [np.repeat(iu, len(_PAIR_STEPS)), np.repeat(ju, len(_PAIR_STEPS))],
                    axis=1,
                ),
                np.tile(_PAIR_STEPS, (iu.size, 1)),
            )
        )
    if n <= _TRIPLE_MOVE_LIMIT and n >= 3:
        trips = np.array(list(itertools.combinations(range(n), 3)), dtype=np.intp)
        groups.append(
            (
                np.repeat(trips, len(_TRIPLE_STEPS), axis=0),
                np.tile(_TRIPLE_STEPS, (trips.shape[0], 1)),
            )
        )

    out_of_time = False

    def best_move(pix_all: np.ndarray, del_all: np.ndarray):
        nonlocal out_of_time
        best = None
        for lo in range(0, pix_all.shape[0], _PAIR_CHUNK):
            pix = pix_all[lo : lo + _PAIR_CHUNK]
            dlt = del_all[lo : lo + _PAIR_CHUNK]
            vals = state.x[pix] + dlt
            keep = ((vals >= 0) & (vals <= 255)).all(axis=1)
            if not keep.any():
                continue
            pix, dlt, vals = pix[keep], dlt[keep], vals[keep]
            dltf = dlt.astype(np.float64)
            u_batch = state.u[None, :] + dltf[:, 0, None] * a1_rows[pix[:, 0]]
            v_batch = state.v[None, :] + dltf[:, 0, None] * a2_rows[pix[:, 0]]
            for t in range(1, pix.shape[1]):
                u_batch += dltf[:, t, None] * a1_rows[pix[:, t]]
                v_batch += dltf[:, t, None] * a2_rows[pix[:, t]]
            obj_batch = state.obj + (
                (vals - anchor[pix]) ** 2 - (state.x[pix] - anchor[pix]) ** 2
            ).sum(axis=1)
            mism_b, viol_b, obj_b = scorer.score_batch(u_batch, v_batch, obj_batch)
            b = np.lexsort((obj_b, viol_b, mism_b))[0]
            cand = (int(mism_b[b]), float(viol_b[b]), float(obj_b[b]))
            if best is None or cand < best[0]:
                best = (cand, list(zip(pix[b].tolist(), vals[b].tolist())))
            if time.monotonic() > deadline:
                out_of_time = True
                break
        return best

    moves = 0
    while moves < budget and not out_of_time:
        # Single-pixel descent until it stalls.
        while moves < budget and not out_of_time:
            mv = best_move(*groups[0])
            if mv is None or mv[0] >= state.score:
                break
            state.apply(mv[1], mv[0])
            moves += 1
            note()
        if out_of_time:
            break
        # One accepted multi-pixel move, then back to single moves.
        stepped = False
        for pix_all, del_all in groups[1:]:
            mv = best_move(pix_all, del_all)
            if mv is not None and mv[0] < state.score:
                state.apply(mv[1], mv[0])
                moves += 1
                note()
                stepped = True
                break
        if not stepped:
            break
    return best_cert, best_cert_obj, state.x, state.score


#: Ceiling on candidates enumerated by the exhaustive window polish.
_WINDOW_BUDGET = 2_000_000
_WINDOW_CHUNK = 262_144


def _window_radius(n: int) -> int:
    for w in range(16, 0, -1):
        if (2 * w + 1) ** n <= _WINDOW_BUDGET:
            return w
    return 0


def _window_polish(scorer, pixels: np.ndarray, obj_limit: float, deadline: float):
    """Exhaustive scan of the integer box around a feasible point.

    Greedy moves coordinate at most three pixels; on tiny images the
    optimum often needs a simultaneous shift of every pixel, so when the
    box fits the candidate budget just enumerate it.  Returns the best
    strictly-improving certified pixels (or None)."""
    n = pixels.size
    w = _window_radius(n)
    if w == 0:
        return None, np.inf
    base = 2 * w + 1
    total = base**n
    anchor = scorer.anchor
    best = None
    best_obj = obj_limit
    for lo in range(0, total, _WINDOW_CHUNK):
        idx = np.arange(lo, min(total, lo + _WINDOW_CHUNK), dtype=np.int64)
        digits = np.empty((idx.size, n), dtype=np.int64)
        q = idx
        for t in range(n - 1, -1, -1):
            digits[:, t] = q % base
            q = q // base
        cand = pixels[None, :] + digits - w
        keep = ((cand >= 0) & (cand <= 255)).all(axis=1)
        cand = cand[keep]
        if cand.size == 0:
            continue
        obj = ((cand - anchor[None, :]) ** 2).sum(axis=1)
        cut = obj < best_obj
        cand, obj = cand[cut], obj[cut]
        if cand.size == 0:
            continue
        candf = cand.astype(np.float64)
        u_batch = candf @ scorer.a1.T
        v_batch = candf @ scorer.a2.T
        mism, _, obj_b = scorer.score_batch(u_batch, v_batch, obj.astype(np.float64))
        ok = mism == 0
        if ok.any():
            rows = np.flatnonzero(ok)
            i = rows[np.argmin(obj_b[rows])]
            if obj_b[i] < best_obj and scorer.exact_certified(cand[i]):
                best, best_obj = cand[i].copy(), float(obj_b[i])
        if time.monotonic() > deadline:
            break
    return best, best_obj


# ---------------------------------------------------------------------------
# Non-convex driver


def solve_qcqp(problem: AttackProblem, config: SolverConfig | None = None) -> SolveReport:
    """Continuous relaxation + rounding + integer repair + restarts for
    the image-side programs; success means exact forward certification
    of every target."""
    if problem.kind is ProblemKind.FEATURE_PHASE:
        raise SolverError("feature-phase problems go to solve_qp")
    config = config or SolverConfig()
    start = time.monotonic()
    deadline = start + config.time_limit
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))

    if problem.kind is ProblemKind.IMAGE_PHASE:
        scorer = _FeatureScorer(problem)
        models = [ImageModel(problem)]
    else:
        scorer = _SignScorer(problem)
        models = [
            MergedModel(problem, margin=max(problem.delta, _CONTINUOUS_MARGIN)),
            MergedModel(problem, margin=max(problem.delta, _SLIM_MARGIN)),
        ]

    anchor_pixels = problem.anchor_image.flat().astype(np.int64)
    anchor_scaled = anchor_pixels / _PIXEL_SCALE

    best_cert: np.ndarray | None = None
    best_cert_obj = np.inf
    best_attempt = anchor_pixels.copy()
    best_attempt_score = None
    best_vio = np.inf
    timed_out = False

    def consider(pixels: np.ndarray) -> bool:
        """Record an exactly-certified rounding; a True return (perfect
        objective) stops the current continuous stage early."""
        nonlocal best_cert, best_cert_obj
        xf = pixels.astype(np.float64)
        u = scorer.a1 @ xf
        v = scorer.a2 @ xf
        mism, _, _ = scorer.score_batch(u[None, :], v[None, :], np.zeros(1))
        if int(mism[0]) == 0 and scorer.exact_certified(pixels):
            obj = float(np.sum((xf - scorer.anchor) ** 2))
            if obj < best_cert_obj:
                best_cert, best_cert_obj = pixels.copy(), obj
        return best_cert_obj == 0.0

    consider(anchor_pixels)
    # Certification does not stop the scan: later restarts regularly
    # land in better basins, and the best certified objective wins.
    done = best_cert_obj == 0.0
    for k in range(config.restarts):
        if done:
            break
        if time.monotonic() > deadline:
            timed_out = True
            break
        if k == 0:
            x0 = anchor_scaled.copy()
        else:
            sigma = min(0.5, 0.08 * k)
            x0 = np.clip(anchor_scaled + sigma * rng.standard_normal(problem.n), 0.0, 1.0)
        for model in models:
            z, vio, early = _continuous_stage(
                model, model.initial_point(x0), config, deadline, consider
            )
            best_vio = min(best_vio, vio)
            if early:
                done = True
                break
            cert, cert_obj, attempt, attempt_score = _repair(
                scorer, model.pixels_raw(z), config.repair_budget, deadline
            )
            if cert is not None and cert_obj < best_cert_obj:
                best_cert, best_cert_obj = cert, cert_obj
                if best_cert_obj == 0.0:
                    done = True
                    break
            if best_attempt_score is None or attempt_score < best_attempt_score:
                best_attempt, best_attempt_score = attempt, attempt_score
            if time.monotonic() > deadline:
                timed_out = True
                done = True
                break

    if best_cert is not None and best_cert_obj > 0.0 and not timed_out:
        # Final descent from the best certificate; a mid-stage rounding
        # recorded by consider() never went through the repair polish.
        cert, cert_obj, _, _ = _repair(scorer, best_cert, config.repair_budget, deadline)
        if cert is not None and cert_obj < best_cert_obj:
            best_cert, best_cert_obj = cert, cert_obj
        # Alternate exhaustive-window and greedy descent to a fixpoint.
        for _ in range(4):
            win, win_obj = _window_polish(scorer, best_cert, best_cert_obj, deadline)
            if win is None:
                break
            best_cert, best_cert_obj = win, win_obj
            cert, cert_obj, _, _ = _repair(scorer, best_cert, config.repair_budget, deadline)
            if cert is not None and cert_obj < best_cert_obj:
                best_cert, best_cert_obj = cert, cert_obj
            if time.monotonic() > deadline:
                break

    if best_cert is not None:
        status = SolveStatus.CERTIFIED_FEASIBLE
        pixels = best_cert
    elif timed_out:
        status = SolveStatus.TIMED_OUT
        pixels = best_attempt
    elif best_vio <= config.feasibility_tol:
        status = SolveStatus.CONTINUOUS_ONLY
        pixels = best_attempt
    else:
        # The continuous relaxation itself never came close to feasible;
        # report that instead of a best-effort image.
        status = SolveStatus.INFEASIBLE
        pixels = None

    if pixels is None:
        return SolveReport(
            status=status,
            solution=None,
            objective=float("inf"),
            euclidean_distance=float("inf"),
            wall_time=time.monotonic() - start,
            certification={},
        )
    image = GrayImage(problem.width, problem.height, pixels.reshape(problem.height, problem.width))
    objective = float(np.sum((pixels - anchor_pixels).astype(np.float64) ** 2))
    return SolveReport(
        status=status,
        solution=image,
        objective=objective,
        euclidean_distance=float(np.sqrt(objective)),
        wall_time=time.monotonic() - start,
        certification=certify(image, problem),
    )


def solve(problem: AttackProblem, config: SolverConfig | None = None) -> SolveReport:
    """Dispatch on problem kind."""
    if problem.kind is ProblemKind.FEATURE_PHASE:
        return solve_qp(problem, config)
    return solve_qcqp(problem, config)
