"""
Optimal control over boundary forces: Phi(b) = J(u_b) + R(b) with F(u_b) = b.

The gradient comes from one direct and one adjoint solve per evaluation;
minimization is L-BFGS over the control DOFs, with a Gauss-Newton initial
inverse Hessian and an optional per-vertex norm cap handled by projection.
"""
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple, Any
import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from data_models import (TetMesh, RegionLabels, MaterialModel, PointCloud, Displacement,
                         AdjointState, ForceField, ProjectionSet, OptimizationReport)
from elasticity_solver import EquilibriumSolver
from mesh_processor import MeshProcessor
from surface_projection import SurfaceObjective
from settings import OptimizerSettings, SolverSettings
from exceptions import ConfigurationError, InvalidArgumentError, SolverError
from loggers import get_logger

logger = get_logger(__name__)

CAP_SLACK = 1e-12


class NoRegularizer:
    name = "none"

    def value(self, x: np.ndarray) -> float:
        return 0.0

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def curvature(self) -> float:
        return 0.0


@dataclass(frozen=True)
class TikhonovRegularizer:
    """R(b) = weight/2 |b|^2"""
    weight: float
    name: str = "tikhonov"

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0.0:
            raise InvalidArgumentError(f"Tikhonov weight must be non-negative, got {self.weight}")

    def value(self, x: np.ndarray) -> float:
        return 0.5 * self.weight * float(x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.weight * x

    def curvature(self) -> float:
        return self.weight


def make_regularizer(name: str, weight: float = 0.0):
    name = (name or "none").lower()
    if name == "none":
        return NoRegularizer()
    if name == "tikhonov":
        return TikhonovRegularizer(float(weight))
    raise ConfigurationError(f"Unknown regularizer '{name}' (expected 'none' or 'tikhonov')")


def project_to_cap(x: np.ndarray, cap: Optional[float]) -> np.ndarray:
    """per-vertex radial projection onto the ball |b_i| <= cap"""
    if cap is None:
        return x
    forces = x.reshape(-1, 3)
    norms = np.linalg.norm(forces, axis=1)
    scale = np.where(norms > cap, cap / np.maximum(norms, np.finfo(float).tiny), 1.0)
    return (forces * scale[:, None]).reshape(-1)


def exceeds_cap(x: np.ndarray, cap: Optional[float]) -> bool:
    if cap is None:
        return False
    return bool(np.any(np.linalg.norm(x.reshape(-1, 3), axis=1) > cap + CAP_SLACK))


@dataclass
class ControlProblem:
    """One registration problem: model, regions, observed cloud and the admissible set"""
    mesh: TetMesh
    material: MaterialModel
    labels: RegionLabels
    cloud: PointCloud
    support: Optional[np.ndarray] = None
    regularizer: Any = field(default_factory=NoRegularizer)
    cap: Optional[float] = None
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    solver_settings: SolverSettings = field(default_factory=SolverSettings)
    equilibrium: Optional[EquilibriumSolver] = None

    def __post_init__(self):
        if self.support is None:
            self.support = self.labels.control_vertices(self.mesh)
        self.support = np.unique(np.asarray(self.support, dtype=np.int64))
        if self.support.size == 0:
            raise ConfigurationError("The control support is empty: no vertex may carry a force")
        if self.support.min() < 0 or self.support.max() >= self.mesh.n_vertices:
            raise ConfigurationError("The control support references vertices outside the mesh")
        if np.intersect1d(self.support, self.labels.fixed_array()).size:
            raise ConfigurationError("The control support overlaps the fixed vertices")
        if self.optimizer.grad_rtol <= 0.0:
            raise ConfigurationError(f"grad_rtol must be positive, got {self.optimizer.grad_rtol}")
        if self.cap is not None and self.cap <= 0.0:
            raise ConfigurationError(f"Force cap must be positive, got {self.cap}")
        if self.equilibrium is None:
            self.equilibrium = EquilibriumSolver(self.mesh, self.material, self.labels, self.solver_settings)

    @property
    def n_controls(self) -> int:
        return 3 * self.support.size

    def zero_control(self) -> ForceField:
        return ForceField.zeros(self.mesh.n_vertices, self.support)

    def to_field(self, x: np.ndarray) -> ForceField:
        return ForceField.from_control_vector(self.mesh.n_vertices, self.support, x)

    def with_cloud(self, cloud: PointCloud) -> "ControlProblem":
        """same model and factorization, new observation"""
        return replace(self, cloud=cloud)


@dataclass
class Evaluation:
    """everything one pass of the adjoint gradient computation produces"""
    objective: float
    functional: float
    gradient: np.ndarray
    displacement: Displacement
    adjoint: AdjointState
    projections: ProjectionSet


class AdjointGradientEvaluator:
    """Phi and its control gradient: direct solve, projection, adjoint solve"""

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        self.solver = problem.equilibrium
        self.evaluations = 0

    def evaluate(self, x: np.ndarray, u0: Optional[Displacement] = None) -> Evaluation:
        problem = self.problem
        b = problem.to_field(x)
        self.evaluations += 1
        try:
            u = self.solver.solve_direct(b, u0)
        except SolverError as e:
            raise SolverError(f"Direct solve failed at evaluation {self.evaluations} "
                              f"(|b| = {b.norm():.3e}): {e}") from e

        functional, projections = SurfaceObjective.functional(
            problem.mesh, u, problem.cloud, problem.labels, problem.optimizer.restrict_to_matching)
        rhs = SurfaceObjective.functional_gradient(problem.mesh, u, problem.cloud, projections)
        p = self.solver.adjoint_solve(u, rhs)

        # mask to the admissible DOFs
        gradient = p.values[problem.support].reshape(-1) + problem.regularizer.gradient(x)
        objective = functional + problem.regularizer.value(x)
        return Evaluation(objective, functional, gradient, u, p, projections)

    def frozen_objective(self, x: np.ndarray, projections: ProjectionSet,
                         u0: Optional[Displacement] = None) -> float:
        """Phi with the projection triangles and weights held fixed"""
        problem = self.problem
        u = self.solver.solve_direct(problem.to_field(x), u0)
        return (SurfaceObjective.frozen_functional(problem.mesh, u, problem.cloud, projections)
                + problem.regularizer.value(x))


def adjoint_solve(mesh: TetMesh, material: MaterialModel, labels: RegionLabels,
                  u_b: Displacement, rhs: np.ndarray,
                  settings: Optional[SolverSettings] = None) -> AdjointState:
    """p_b with grad F(u_b)^T p_b = rhs on free DOFs"""
    return EquilibriumSolver(mesh, material, labels, settings).adjoint_solve(u_b, rhs)


def objective_and_gradient(problem: ControlProblem, b: ForceField) -> Tuple[float, ForceField]:
    if not np.array_equal(b.support, problem.support):
        raise InvalidArgumentError("Force field support does not match the control support")
    evaluation = AdjointGradientEvaluator(problem).evaluate(b.control_vector())
    return evaluation.objective, problem.to_field(evaluation.gradient)


def force_resultant(b: ForceField, region: Optional[Iterable[int]] = None) -> np.ndarray:
    """componentwise sum of nodal forces over region (default: the support)"""
    ids = b.support if region is None else np.fromiter(region, dtype=np.int64)
    if ids.size == 0:
        return np.zeros(3)
    return b.values[np.unique(ids)].sum(axis=0)


class GaussNewtonPreconditioner:
    """point-to-plane Gauss-Newton model of Phi around one evaluation

    H = 1/m sum_j a_j a_j^T + R'' with a_j = n_j . dr_j/db, where r_j is the
    projection of sample j and n_j the unit direction from the sample to it.
    The response dr_j/db comes from small-strain compliance columns, so H
    stays an approximation for nonlinear materials and after projection swaps.
    """

    def __init__(self, factor):
        self.factor = factor

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, q)

    @classmethod
    def build(cls, problem: ControlProblem, evaluation: Evaluation,
              settings: Optional[OptimizerSettings] = None) -> Optional["GaussNewtonPreconditioner"]:
        settings = settings or problem.optimizer
        if settings.preconditioner == "none":
            return None
        if settings.preconditioner != "gauss_newton":
            raise ConfigurationError(f"Unknown preconditioner '{settings.preconditioner}' "
                                     f"(expected 'none' or 'gauss_newton')")
        if problem.n_controls > settings.preconditioner_max_controls:
            logger.info(f"{problem.n_controls} controls exceed preconditioner_max_controls "
                        f"({settings.preconditioner_max_controls}); using plain L-BFGS scaling")
            return None

        response = problem.equilibrium.compliance_columns(problem.support)
        projections = evaluation.projections
        tris = problem.mesh.boundary_tris[projections.triangle_ids]
        points = np.einsum("pk,pkdc->pdc", projections.barycentric, response[tris])

        offsets = projections.positions - problem.cloud.points
        distances = np.sqrt(projections.sq_distances)
        deformed = problem.mesh.vertices + evaluation.displacement.values
        normals = MeshProcessor.triangle_normals(deformed, tris)
        # samples on the surface fall back to the face normal
        far = distances > 1e-12 * problem.mesh.diameter()
        normals[far] = offsets[far] / distances[far, None]

        rows = np.einsum("pd,pdc->pc", normals, points)
        hessian = rows.T @ rows / len(problem.cloud)
        hessian[np.diag_indices_from(hessian)] += problem.regularizer.curvature()
        damping = settings.preconditioner_damping * max(float(hessian.diagonal().max()), np.finfo(float).tiny)
        hessian[np.diag_indices_from(hessian)] += damping
        try:
            factor = cho_factor(hessian)
        except LinAlgError as e:
            logger.warning(f"Gauss-Newton model is not positive definite ({e}); using plain L-BFGS scaling")
            return None
        logger.debug(f"Gauss-Newton preconditioner over {problem.n_controls} controls")
        return cls(factor)


class LbfgsMemory:
    """Curvature pairs (s, y) and the two-loop recursion"""

    def __init__(self, size: int = 10):
        if size < 1:
            raise ConfigurationError(f"L-BFGS memory must be at least 1, got {size}")
        self.pairs = deque(maxlen=size)

    def __len__(self):
        return len(self.pairs)

    def clear(self):
        self.pairs.clear()

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        """store the pair unless curvature s.y is not safely positive"""
        sy = float(s @ y)
        if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s.copy(), y.copy(), 1.0 / sy))
        return True

    def direction(self, g: np.ndarray, initial=None) -> np.ndarray:
        """-H g with H the limited-memory inverse Hessian

        initial, when given, applies H0; otherwise H0 is the usual s.y/y.y scaling.
        """
        if not self.pairs:
            if initial is None:
                raise InvalidArgumentError("No curvature pairs and no initial inverse Hessian")
            return -initial(g)
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            alpha = rho * float(s @ q)
            q -= alpha * y
            alphas.append(alpha)
        if initial is None:
            s, y, _ = self.pairs[-1]
            r = q * (float(s @ y) / float(y @ y))
        else:
            r = initial(q)
        for (s, y, rho), alpha in zip(self.pairs, reversed(alphas)):
            beta = rho * float(y @ r)
            r += (alpha - beta) * s
        return -r


class LbfgsOptimizer:
    """L-BFGS with backtracking Armijo search; keeps its memory between runs when asked"""

    def __init__(self, settings: Optional[OptimizerSettings] = None):
        self.settings = settings or OptimizerSettings()
        self.memory = LbfgsMemory(self.settings.memory)

    def _steepest(self, g: np.ndarray, g_norm: float, objective: float) -> np.ndarray:
        # scale-free first step: the step that would zero a quadratic model's value
        if objective > 0.0:
            return -g * (2.0 * objective / (g_norm * g_norm)) * self.settings.initial_step
        return -g * (self.settings.initial_step / g_norm)

    def run(self, problem: ControlProblem, b0: Optional[ForceField] = None
            ) -> Tuple[ForceField, Displacement, OptimizationReport]:
        settings = self.settings
        if not settings.keep_memory:
            self.memory.clear()
        started = time.perf_counter()
        evaluator = AdjointGradientEvaluator(problem)
        solver = problem.equilibrium
        direct_before, adjoint_before = solver.direct_solves, solver.adjoint_solves

        if b0 is None:
            x = np.zeros(problem.n_controls)
        else:
            if not np.array_equal(b0.support, problem.support):
                raise InvalidArgumentError("Initial force support does not match the control support")
            x = b0.control_vector()
        if exceeds_cap(x, problem.cap):
            logger.warning("Initial control violates the force cap; projecting it")
            x = project_to_cap(x, problem.cap)

        current = evaluator.evaluate(x)
        g_norm = float(np.linalg.norm(current.gradient))
        tolerance = max(settings.grad_rtol * g_norm, settings.grad_atol)
        report = OptimizationReport(initial_gradient_norm=g_norm)
        report.objective_history.append(current.objective)
        report.functional_history.append(current.functional)
        report.gradient_norm_history.append(g_norm)
        # built on the first iteration that needs a direction
        preconditioner, preconditioner_tried = None, False

        while True:
            if g_norm <= tolerance:
                report.converged = True
                report.message = "gradient tolerance reached"
                break
            if report.iterations >= settings.max_iters:
                report.message = f"stopped after {settings.max_iters} iterations"
                break

            g = current.gradient
            if preconditioner is None and not preconditioner_tried:
                preconditioner_tried = True
                preconditioner = GaussNewtonPreconditioner.build(problem, current, settings)
            if len(self.memory) or preconditioner is not None:
                direction = self.memory.direction(g, preconditioner)
            else:
                direction = self._steepest(g, g_norm, current.objective)
            if float(g @ direction) >= 0.0:
                logger.debug("L-BFGS direction is not a descent direction; resetting memory")
                self.memory.clear()
                direction = self._steepest(g, g_norm, current.objective)

            projected = exceeds_cap(x + direction, problem.cap)
            if projected:
                direction = self._steepest(g, g_norm, current.objective)

            step = 1.0
            accepted = None
            for _ in range(settings.max_line_search):
                trial_x = x + step * direction
                if projected:
                    trial_x = project_to_cap(trial_x, problem.cap)
                trial = evaluator.evaluate(trial_x, current.displacement)
                decrease = float(g @ (trial_x - x))
                if trial.objective <= current.objective + settings.armijo_c1 * decrease:
                    accepted = (trial_x, trial)
                    break
                step *= 0.5

            if accepted is None:
                report.line_search_failed = True
                report.message = f"line search failed after {settings.max_line_search} trials"
                logger.warning(f"Line search failed at iteration {report.iterations}; "
                               f"returning best iterate (Phi = {current.objective:.6e})")
                break

            trial_x, trial = accepted
            self.memory.update(trial_x - x, trial.gradient - g)
            x, current = trial_x, trial
            g_norm = float(np.linalg.norm(current.gradient))
            report.iterations += 1
            report.objective_history.append(current.objective)
            report.functional_history.append(current.functional)
            report.gradient_norm_history.append(g_norm)
            logger.debug(f"iter {report.iterations}: Phi = {current.objective:.6e}, "
                         f"|grad| = {g_norm:.3e}, step = {step:g}")

        report.evaluations = evaluator.evaluations
        report.final_objective = current.objective
        report.final_functional = current.functional
        report.final_gradient_norm = g_norm
        report.direct_solves = solver.direct_solves - direct_before
        report.adjoint_solves = solver.adjoint_solves - adjoint_before
        report.wall_time = time.perf_counter() - started
        logger.info(f"L-BFGS: {report.message} ({report.iterations} iterations, "
                    f"{report.evaluations} evaluations, Phi = {report.final_objective:.6e})")
        return problem.to_field(x), current.displacement, report


def minimize(problem: ControlProblem, b0: Optional[ForceField] = None
             ) -> Tuple[ForceField, Displacement, OptimizationReport]:
    """cold L-BFGS run with fresh memory"""
    return LbfgsOptimizer(problem.optimizer).run(problem, b0)


def gradient_audit(problem: ControlProblem, b: Optional[ForceField] = None, directions: int = 10,
                   rel_step: float = 1e-4, seed: int = 0) -> Dict[str, Any]:
    """adjoint gradient against central differences of the frozen-projection objective"""
    evaluator = AdjointGradientEvaluator(problem)
    x = np.zeros(problem.n_controls) if b is None else b.control_vector()
    base = evaluator.evaluate(x)
    b_norm = float(np.linalg.norm(x))
    epsilon = rel_step * (b_norm if b_norm > 0.0 else 1.0)
    floor = 1e-8 * float(np.linalg.norm(base.gradient))

    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(directions):
        d = rng.standard_normal(problem.n_controls)
        d /= np.linalg.norm(d)
        plus = evaluator.frozen_objective(x + epsilon * d, base.projections, base.displacement)
        minus = evaluator.frozen_objective(x - epsilon * d, base.projections, base.displacement)
        finite_difference = (plus - minus) / (2.0 * epsilon)
        adjoint = float(base.gradient @ d)
        scale = max(abs(finite_difference), abs(adjoint), floor, np.finfo(float).tiny)
        errors.append(abs(finite_difference - adjoint) / scale)

    result = {
        "directions": directions,
        "epsilon": epsilon,
        "errors": errors,
        "max_error": max(errors) if errors else 0.0,
        "objective": base.objective,
        "gradient_norm": float(np.linalg.norm(base.gradient)),
    }
    logger.info(f"Gradient audit: max relative error {result['max_error']:.3e} over {directions} directions")
    return result
