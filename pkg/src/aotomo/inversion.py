"""Coefficient reconstruction inside known inclusion masks.

Two stages. A grid search over piecewise constant coefficients matches the
measured boundary flux and fixes the per-inclusion base levels. A projected
Landweber iteration then recovers the smooth variation inside each inclusion
by matching the internal data functional

    F[a](v) = sum_j int_{A_j} phi(a)^2 grad(a_j) . grad(v_j)

against the Laplacian functional of the Helmholtz potential. Iterates are
stored as base constants plus zero-trace corrections; every functional is
handled through its Riesz representer (one masked Dirichlet solve per
inclusion), and the constraint set (coefficient bounds plus an L4 gradient
budget per inclusion) is enforced by clamping and scale-back.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diffusion import OpticalSolution, RobinOperator, RobinProblem, solve_T
from .fields import (
    BoundaryTrace,
    Grid,
    ScalarField,
    cg,
    gradient,
)
from .helmholtz import PsiField, edge_average
from .segmentation import InclusionMask


@dataclass(frozen=True)
class KProjectionConfig:
    lower: float
    upper: float
    theta: float

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("gradient budget theta must be positive")


class MaskSpace:
    """Per-inclusion discrete space: in-mask edges and the Dirichlet form."""

    def __init__(self, grid: Grid, mask: np.ndarray):
        self.grid = grid
        self.mask = np.asarray(mask, dtype=bool)
        inner = self.mask.copy()
        inner[1:, :] &= self.mask[:-1, :]
        inner[:-1, :] &= self.mask[1:, :]
        inner[:, 1:] &= self.mask[:, :-1]
        inner[:, :-1] &= self.mask[:, 1:]
        inner[0, :] = inner[-1, :] = inner[:, 0] = inner[:, -1] = False
        self.interior = inner
        self.cx = (self.mask[1:, :] & self.mask[:-1, :]).astype(float)
        self.cy = (self.mask[:, 1:] & self.mask[:, :-1]).astype(float)
        if not np.any(inner):
            raise ValueError("mask has no interior nodes")

    def form_apply(self, x, coef_x=None, coef_y=None):
        cx = self.cx if coef_x is None else self.cx * coef_x
        cy = self.cy if coef_y is None else self.cy * coef_y
        xm = np.where(self.interior, x, 0.0)
        out = kernels.edge_form_apply(xm, cx, cy)
        return np.where(self.interior, out, 0.0)

    def bilinear(self, u, v, coef_x=None, coef_y=None):
        """sum over in-mask edges of c_e du dv (undivided differences)."""
        cx = self.cx if coef_x is None else self.cx * coef_x
        cy = self.cy if coef_y is None else self.cy * coef_y
        du_x = u[1:, :] - u[:-1, :]
        dv_x = v[1:, :] - v[:-1, :]
        du_y = u[:, 1:] - u[:, :-1]
        dv_y = v[:, 1:] - v[:, :-1]
        return float(np.sum(cx * du_x * dv_x) + np.sum(cy * du_y * dv_y))

    def assemble(self, coef_x, coef_y):
        """Vector b with b . v = sum_e c_e dv for all interior v."""
        b = np.zeros(self.grid.shape)
        fx = self.cx * coef_x
        b[1:, :] += fx
        b[:-1, :] -= fx
        fy = self.cy * coef_y
        b[:, 1:] += fy
        b[:, :-1] -= fy
        return np.where(self.interior, b, 0.0)

    def riesz_solve(self, b, tol=1e-10):
        """Solve the mask Dirichlet form L rho = b."""
        bm = np.where(self.interior, b, 0.0)
        x, res, it = cg(self.form_apply, bm, tol=tol,
                        max_iter=80 * self.grid.n)
        return x


@dataclass
class HElement:
    """One zero-trace field per inclusion mask."""

    parts: list

    def __add__(self, other):
        return HElement([a + b for a, b in zip(self.parts, other.parts)])

    def __sub__(self, other):
        return HElement([a - b for a, b in zip(self.parts, other.parts)])

    def scaled(self, c):
        return HElement([c * a for a in self.parts])

    def combined(self):
        out = np.zeros_like(self.parts[0])
        for a in self.parts:
            out += a
        return out


@dataclass
class HFunctional:
    """Functional on H stored as assembled vectors plus Riesz representer."""

    raw: list
    representer: HElement


@dataclass
class PiecewiseConstantGuess:
    alphas: list
    misfit: float


@dataclass
class ReconstructionState:
    alphas: list
    correction: HElement
    tau: float
    residuals: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    halvings: int = 0
    stopped_reason: str = ""

    def coefficient(self, problem) -> ScalarField:
        return problem.coefficient_field(self.alphas, self.correction)


class ReconstructionProblem:
    """Geometry, optics, and constraint data shared by the reconstruction."""

    def __init__(self, grid: Grid, masks: list, a0: float, lower: float,
                 upper: float, g=1.0, l=0.1, theta=None):
        self.grid = grid
        self.masks = masks
        self.spaces = [MaskSpace(grid, m.mask) for m in masks]
        self.a0 = float(a0)
        self.lower = float(lower)
        self.upper = float(upper)
        self.l = float(l)
        self.g = g if isinstance(g, BoundaryTrace) else BoundaryTrace.constant(
            grid, g)
        self._theta = theta
        self._phi_bounds = None

    @property
    def k(self):
        return len(self.masks)

    def zero_element(self) -> HElement:
        return HElement([np.zeros(self.grid.shape) for _ in self.masks])

    def coefficient_field(self, alphas, correction: HElement | None = None
                          ) -> ScalarField:
        vals = np.full(self.grid.shape, self.a0)
        for j, space in enumerate(self.spaces):
            vals[space.mask] = alphas[j]
            if correction is not None:
                vals[space.interior] += correction.parts[j][space.interior]
        return ScalarField(self.grid, vals)

    def solve_forward(self, alphas, correction=None, x0=None) -> OpticalSolution:
        a = self.coefficient_field(alphas, correction)
        return solve_T(RobinProblem(a, self.g, self.l), x0=x0)

    # -- H space operations --------------------------------------------------

    def h_inner(self, u: HElement, v: HElement) -> float:
        return sum(
            space.bilinear(up, vp)
            for space, up, vp in zip(self.spaces, u.parts, v.parts)
        )

    def h_norm(self, u: HElement) -> float:
        return math.sqrt(max(self.h_inner(u, u), 0.0))

    def riesz(self, raw: list) -> HElement:
        return HElement([
            space.riesz_solve(b) for space, b in zip(self.spaces, raw)
        ])

    def functional(self, raw: list) -> HFunctional:
        return HFunctional(raw, self.riesz(raw))

    def dual_inner(self, f1: HFunctional, f2: HFunctional) -> float:
        """H* inner product via representers: <rep1, rep2>_H = raw1 . rep2."""
        return sum(
            float(np.sum(b * rep))
            for b, rep in zip(f1.raw, f2.representer.parts)
        )

    def dual_norm(self, f: HFunctional) -> float:
        return math.sqrt(max(self.dual_inner(f, f), 0.0))

    def apply_functional(self, f: HFunctional, h: HElement) -> float:
        return sum(float(np.sum(b * hp)) for b, hp in zip(f.raw, h.parts))

    # -- phi bounds and the gradient budget ----------------------------------

    def record_phi_bounds(self, solution: OpticalSolution, margin=0.1):
        region = self.grid.interior_margin_mask(margin)
        vals = solution.phi.values[region]
        self._phi_bounds = (float(vals.min()), float(vals.max()))
        return self._phi_bounds

    def embedding_constant(self, iterations=20) -> float:
        """Estimate of sup ||v||_L4 / ||v||_H over the largest mask by a
        normalized fixed-point iteration on the L4 stationarity condition."""
        space = max(self.spaces, key=lambda s: s.interior.sum())
        w = self.grid.trapezoid_weights()
        rng = np.random.default_rng(1234)
        v = np.where(space.interior, rng.standard_normal(self.grid.shape), 0.0)
        v /= math.sqrt(space.bilinear(v, v))
        best = 0.0
        for _ in range(iterations):
            rhs = np.where(space.interior, w * v**3, 0.0)
            v = space.riesz_solve(rhs, tol=1e-8)
            nrm = math.sqrt(space.bilinear(v, v))
            if nrm == 0:
                break
            v /= nrm
            l4 = float(np.sum(w * np.abs(v) ** 4)) ** 0.25
            best = max(best, l4)
        return best

    def default_theta(self, solution: OpticalSolution) -> float:
        """Gradient budget from the recorded field bounds and the embedding
        estimate: 0.5 * lambda^2 / (C * Lambda^2)."""
        lam, big = self.record_phi_bounds(solution)
        c_emb = self.embedding_constant()
        return 0.5 * lam**2 / (c_emb * big**2)

    def projection_config(self, solution=None) -> KProjectionConfig:
        if self._theta is None:
            if solution is None:
                solution = self.solve_forward([self.a0] * self.k)
            self._theta = self.default_theta(solution)
        return KProjectionConfig(self.lower, self.upper, self._theta)

    def grad_l4(self, part, space) -> float:
        g = gradient(ScalarField(self.grid, part))
        mag4 = (g.vx**2 + g.vy**2) ** 2
        w = self.grid.trapezoid_weights()
        return float(np.sum(w[space.mask] * mag4[space.mask])) ** 0.25


# ---------------------------------------------------------------------------
# boundary misfit and the exhaustion initial guess


def boundary_misfit(problem: ReconstructionProblem, flux: BoundaryTrace,
                    measured: BoundaryTrace) -> float:
    diff = flux.values - measured.values
    return 0.5 * problem.grid.h * float(np.sum(diff * diff))


def initial_guess_exhaustion(problem: ReconstructionProblem,
                             measured_flux: BoundaryTrace,
                             partition_step=0.125,
                             mode="exhaustive") -> PiecewiseConstantGuess:
    """Grid search of per-inclusion constants minimizing the boundary flux
    misfit. Exhaustive product search for up to three inclusions; cyclic
    coordinate sweeps (three passes) beyond that or on request.
    """
    k = problem.k
    if k == 0:
        return PiecewiseConstantGuess([], 0.0)
    lattice = np.arange(problem.lower, problem.upper + 1e-12, partition_step)
    if mode == "exhaustive" and k > 3:
        raise ValueError(
            "exhaustive sweep is limited to 3 inclusions; "
            "use mode='coordinate' for cyclic 1-D sweeps"
        )

    def misfit_of(alphas):
        sol = problem.solve_forward(list(alphas))
        return boundary_misfit(problem, sol.flux, measured_flux)

    if mode == "exhaustive":
        best, best_j = None, math.inf
        for combo in itertools.product(lattice, repeat=k):
            jval = misfit_of(combo)
            if jval < best_j:
                best, best_j = combo, jval
        return PiecewiseConstantGuess(list(best), best_j)
    if mode != "coordinate":
        raise ValueError(f"unknown exhaustion mode {mode!r}")
    alphas = [lattice[len(lattice) // 2]] * k
    best_j = misfit_of(alphas)
    for _ in range(3):
        for j in range(k):
            for val in lattice:
                trial = list(alphas)
                trial[j] = val
                jval = misfit_of(trial)
                if jval < best_j - 1e-15:
                    alphas, best_j = trial, jval
    return PiecewiseConstantGuess(list(alphas), best_j)


# ---------------------------------------------------------------------------
# the internal data map and its derivative


def F_apply(problem: ReconstructionProblem, alphas, correction: HElement,
            solution: OpticalSolution | None = None) -> HFunctional:
    """F[a](v) = sum_j int phi^2 grad(a_j) . grad(v_j) as a functional."""
    if solution is None:
        solution = problem.solve_forward(alphas, correction)
    phi2x, phi2y = edge_average(solution.phi.values**2)
    raw = []
    for j, space in enumerate(problem.spaces):
        aj = np.where(space.interior, correction.parts[j], 0.0)
        dax = aj[1:, :] - aj[:-1, :]
        day = aj[:, 1:] - aj[:, :-1]
        raw.append(space.assemble(phi2x * dax, phi2y * day))
    return problem.functional(raw)


def delta_psi_functional(problem: ReconstructionProblem,
                         psi: PsiField) -> HFunctional:
    """The potential's Laplacian as a functional: v -> sum int grad psi
    . grad v_j over the masks."""
    vals = psi.psi.values
    # the potential follows the divergence-of-the-vector-solve orientation,
    # so its weak Laplacian functional carries a minus sign
    dpx = -(vals[1:, :] - vals[:-1, :])
    dpy = -(vals[:, 1:] - vals[:, :-1])
    raw = [space.assemble(dpx, dpy) for space in problem.spaces]
    return problem.functional(raw)


def DF_apply(problem: ReconstructionProblem, alphas, correction: HElement,
             h: HElement, solution: OpticalSolution | None = None,
             tangent: ScalarField | None = None) -> HFunctional:
    """Directional derivative of F at the iterate in direction h."""
    if solution is None:
        solution = problem.solve_forward(alphas, correction)
    if tangent is None:
        tangent = _tangent_solve(problem, alphas, correction, h, solution)
    phi = solution.phi.values
    phi2x, phi2y = edge_average(phi**2)
    crossx, crossy = edge_average(2.0 * phi * tangent.values)
    raw = []
    for j, space in enumerate(problem.spaces):
        aj = np.where(space.interior, correction.parts[j], 0.0)
        hj = np.where(space.interior, h.parts[j], 0.0)
        dax = aj[1:, :] - aj[:-1, :]
        day = aj[:, 1:] - aj[:, :-1]
        dhx = hj[1:, :] - hj[:-1, :]
        dhy = hj[:, 1:] - hj[:, :-1]
        raw.append(space.assemble(
            crossx * dax + phi2x * dhx, crossy * day + phi2y * dhy
        ))
    return problem.functional(raw)


def _tangent_solve(problem, alphas, correction, h: HElement,
                   solution: OpticalSolution) -> ScalarField:
    a = problem.coefficient_field(alphas, correction)
    op = RobinOperator(problem.grid, a.values, problem.l)
    source = -h.combined() * solution.phi.values
    b = op.source_rhs(ScalarField(problem.grid, source))
    x, _, _ = op.solve(b)
    return ScalarField(problem.grid, x)


def DF_quadratic_form(problem, alphas, correction, h: HElement,
                      solution=None) -> float:
    """DF[a](h, h) without Riesz solves (used by the coercivity checks)."""
    if solution is None:
        solution = problem.solve_forward(alphas, correction)
    tangent = _tangent_solve(problem, alphas, correction, h, solution)
    phi = solution.phi.values
    phi2x, phi2y = edge_average(phi**2)
    crossx, crossy = edge_average(2.0 * phi * tangent.values)
    total = 0.0
    for j, space in enumerate(problem.spaces):
        aj = np.where(space.interior, correction.parts[j], 0.0)
        hj = np.where(space.interior, h.parts[j], 0.0)
        dax = aj[1:, :] - aj[:-1, :]
        day = aj[:, 1:] - aj[:, :-1]
        dhx = hj[1:, :] - hj[:-1, :]
        dhy = hj[:, 1:] - hj[:, :-1]
        total += float(
            np.sum(space.cx * (crossx * dax + phi2x * dhx) * dhx)
            + np.sum(space.cy * (crossy * day + phi2y * dhy) * dhy)
        )
    return total


def DF_adjoint(problem: ReconstructionProblem, alphas, correction: HElement,
               rho: HFunctional,
               solution: OpticalSolution | None = None) -> HElement:
    """The element g with <g, h>_H = DF[a](h)(rep rho) for all h.

    The solution chain runs through one adjoint diffusion solve for the
    tangent term and one masked Riesz solve per inclusion for both terms.
    """
    if solution is None:
        solution = problem.solve_forward(alphas, correction)
    phi = solution.phi.values
    grid = problem.grid
    phi2x, phi2y = edge_average(phi**2)

    # nodal source of the tangent chain: sigma_p = phi_p * sum of
    # c_e (da)_e (drho)_e over edges at p, doubled edge averages folded in
    sigma = np.zeros(grid.shape)
    raw = []
    for j, space in enumerate(problem.spaces):
        aj = np.where(space.interior, correction.parts[j], 0.0)
        rj = np.where(space.interior, rho.representer.parts[j], 0.0)
        dax = aj[1:, :] - aj[:-1, :]
        day = aj[:, 1:] - aj[:, :-1]
        drx = rj[1:, :] - rj[:-1, :]
        dry = rj[:, 1:] - rj[:, :-1]
        ex = space.cx * dax * drx
        ey = space.cy * day * dry
        acc = np.zeros(grid.shape)
        acc[1:, :] += ex
        acc[:-1, :] += ex
        acc[:, 1:] += ey
        acc[:, :-1] += ey
        sigma += phi * acc
        raw.append(space.assemble(phi2x * drx, phi2y * dry))

    a = problem.coefficient_field(alphas, correction)
    op = RobinOperator(grid, a.values, problem.l)
    z, _, _ = op.solve(sigma)
    b1 = -phi * z * op.row_weights
    for j, space in enumerate(problem.spaces):
        raw[j] = raw[j] + np.where(space.interior, b1, 0.0)
    return problem.riesz(raw)


# ---------------------------------------------------------------------------
# projection onto the constraint set


def project_K(problem: ReconstructionProblem, alphas, correction: HElement,
              config: KProjectionConfig) -> HElement:
    """Clamp the coefficient into its bounds nodewise, then scale any
    correction whose gradient exceeds the L4 budget. Idempotent."""
    parts = []
    for j, space in enumerate(problem.spaces):
        cj = np.where(space.interior, correction.parts[j], 0.0)
        vals = alphas[j] + cj
        # additive form keeps untouched nodes bit-identical
        clamped = cj + (np.clip(vals, config.lower, config.upper) - vals)
        clamped = np.where(space.interior, clamped, 0.0)
        nrm = problem.grad_l4(clamped, space)
        if nrm > config.theta * (1.0 + 1e-12):
            clamped = clamped * (config.theta / nrm)
        parts.append(clamped)
    return HElement(parts)


# ---------------------------------------------------------------------------
# projected Landweber iteration


def estimate_step_size(problem: ReconstructionProblem, alphas,
                       correction: HElement, iterations=20,
                       seed=0) -> float:
    """tau = 0.9 / L^2 with L the operator norm of DF at the iterate,
    estimated by power iterations on DF* DF."""
    rng = np.random.default_rng(seed)
    solution = problem.solve_forward(alphas, correction)
    v = HElement([
        np.where(space.interior, rng.standard_normal(problem.grid.shape), 0.0)
        for space in problem.spaces
    ])
    v = v.scaled(1.0 / max(problem.h_norm(v), 1e-300))
    lam = 0.0
    for _ in range(iterations):
        w = DF_adjoint(problem, alphas, correction,
                       DF_apply(problem, alphas, correction, v,
                                solution=solution),
                       solution=solution)
        lam = problem.h_inner(v, w)
        nrm = problem.h_norm(w)
        if nrm == 0:
            break
        v = w.scaled(1.0 / nrm)
    lam = max(lam, 1e-300)
    return 0.9 / lam


def landweber_run(problem: ReconstructionProblem, psi: PsiField, alphas,
                  max_iter=200, stop_tol=1e-3, tau=None,
                  truth: HElement | None = None,
                  progress=None) -> ReconstructionState:
    """Projected Landweber iteration from the piecewise constant guess.

    Each step evaluates the internal data misfit at the projected iterate and
    moves along the adjoint direction. If the residual increases five times
    in a row the step is halved (three halvings stop the run).
    """
    kcfg = problem.projection_config()
    target = delta_psi_functional(problem, psi)
    state = ReconstructionState(
        alphas=list(alphas),
        correction=problem.zero_element(),
        tau=tau if tau is not None else estimate_step_size(
            problem, alphas, problem.zero_element()),
    )
    rising = 0
    initial_residual = None
    for it in range(max_iter):
        projected = project_K(problem, state.alphas, state.correction, kcfg)
        solution = problem.solve_forward(state.alphas, projected)
        fval = F_apply(problem, state.alphas, projected, solution=solution)
        residual_fn = HFunctional(
            [fr - tr for fr, tr in zip(fval.raw, target.raw)],
            fval.representer - target.representer,
        )
        res = problem.dual_norm(residual_fn)
        state.residuals.append(res)
        state.taus.append(state.tau)
        if truth is not None:
            state.distances.append(problem.h_norm(projected - truth))
        if initial_residual is None:
            initial_residual = res if res > 0 else 1.0
        if res <= stop_tol * initial_residual:
            state.correction = projected
            state.stopped_reason = "converged"
            break
        if len(state.residuals) > 1 and res > state.residuals[-2]:
            rising += 1
            if rising >= 5:
                state.halvings += 1
                state.tau *= 0.5
                rising = 0
                if state.halvings >= 3:
                    state.correction = projected
                    state.stopped_reason = "stalled after three step halvings"
                    break
        else:
            rising = 0
        grad = DF_adjoint(problem, state.alphas, projected, residual_fn,
                          solution=solution)
        state.correction = projected - grad.scaled(state.tau)
        if progress is not None:
            progress(it + 1, max_iter, res)
    else:
        state.correction = project_K(problem, state.alphas, state.correction,
                                     kcfg)
        state.stopped_reason = "max iterations"
    if not state.stopped_reason:
        state.stopped_reason = "converged"
    return state


def truth_correction(problem: ReconstructionProblem, phantom,
                     alphas) -> HElement:
    """Zero-trace corrections of the true coefficient relative to the given
    base constants, for distance-to-truth audits."""
    x, y = problem.grid.meshgrid()
    true_vals = phantom.eval(x, y)
    parts = []
    for j, space in enumerate(problem.spaces):
        part = np.where(space.interior, true_vals - alphas[j], 0.0)
        parts.append(part)
    return HElement(parts)


def save_log_csv(path, state: ReconstructionState):
    """Iteration log: residual, optional distance to truth, step size."""
    with open(path, "w") as fh:
        fh.write("iter,residual_Hstar,dist_to_truth_H,tau\n")
        for i, res in enumerate(state.residuals):
            dist = f"{state.distances[i]:.17g}" if i < len(state.distances) else ""
            fh.write(f"{i},{res:.17g},{dist},{state.taus[i]:.17g}\n")
