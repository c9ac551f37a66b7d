"""
Experiment pipeline: builds models from settings, generates synthetic traction
sequences, estimates forces along a sequence with warm starts, runs the
end-to-end registration and writes output bundles.
"""
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd

from data_models import (TetMesh, RegionLabels, MaterialModel, PointCloud, Displacement, ForceField,
                         RigidTransform, OptimizationReport, SyntheticCase, EstimationRecord)
from mesh_processor import MeshProcessor
from elasticity_solver import ElasticityAssembler, EquilibriumSolver
from optimal_control import (ControlProblem, LbfgsOptimizer, force_resultant, gradient_audit,
                             make_regularizer, minimize)
from rigid_alignment import RigidAligner
from file_manager import FileManager
from result_viewer import ResultViewer, records_frame
from settings import (ExperimentSettings, MeshSettings, MaterialSettings, OptimizerSettings,
                      SolverSettings, AuditSettings, IcpSettings)
from validators import DataValidator
from exceptions import ConfigurationError, DataFormatError, InvalidArgumentError, GradientAuditError
from loggers import get_logger

logger = get_logger(__name__)

# default audit tolerances per material kind
AUDIT_TOLERANCE = {"linear": 1e-5, "svk": 1e-4}


class ExperimentBuilder:
    """Meshes, labels, materials and problems from settings"""

    @staticmethod
    def build_mesh(settings: MeshSettings) -> TetMesh:
        if settings.path:
            return FileManager.load_mesh(Path(settings.path))
        if settings.generator == "box":
            nx, ny, nz = (int(n) for n in settings.cells)
            return MeshProcessor.generate_box_mesh(nx, ny, nz, settings.lengths)
        if settings.generator == "ellipsoid":
            return MeshProcessor.generate_ellipsoid_mesh(int(settings.cells[0]), settings.semi_axes)
        raise ConfigurationError(f"Unknown mesh generator '{settings.generator}' (expected 'box' or 'ellipsoid')")

    @staticmethod
    def build_labels(mesh: TetMesh, settings: MeshSettings) -> RegionLabels:
        """labels from a sidecar file, or from the geometric selectors"""
        if settings.labels_path:
            return FileManager.load_labels(Path(settings.labels_path), mesh)

        matching = MeshProcessor.selector_from_config(mesh, settings.matching)
        loaded = MeshProcessor.selector_from_config(mesh, settings.loaded)
        fixed = MeshProcessor.region_vertices(mesh, MeshProcessor.selector_from_config(mesh, settings.fixed))
        # a loaded triangle may not carry a fixed vertex
        touching = {t for t in loaded if np.isin(mesh.boundary_tris[t], fixed).any()}
        if touching:
            logger.warning(f"Dropped {len(touching)} loaded triangles that touch fixed vertices")
        labels = RegionLabels(matching=matching, loaded=loaded - touching, fixed=fixed)
        DataValidator.validate_labels(mesh, labels)
        return labels

    @staticmethod
    def build_material(settings: MaterialSettings) -> MaterialModel:
        try:
            return MaterialModel(settings.kind, float(settings.young_modulus), float(settings.poisson_ratio))
        except ValueError as e:
            raise ConfigurationError(f"Invalid material settings: {e}") from e

    @staticmethod
    def build_problem(mesh: TetMesh, material: MaterialModel, labels: RegionLabels, cloud: PointCloud,
                      settings: ExperimentSettings, support=None) -> ControlProblem:
        optimizer = settings.optimizer
        return ControlProblem(
            mesh=mesh, material=material, labels=labels, cloud=cloud, support=support,
            regularizer=make_regularizer(optimizer.regularizer, optimizer.regularizer_weight),
            cap=optimizer.cap, optimizer=optimizer, solver_settings=settings.solver,
        )

    @staticmethod
    def tool_candidates(mesh: TetMesh, labels: RegionLabels) -> List[int]:
        """loaded triangles with no fixed vertex"""
        fixed = labels.fixed_array()
        return [t for t in sorted(labels.loaded) if not np.isin(mesh.boundary_tris[t], fixed).any()]

    @staticmethod
    def tool_center(mesh: TetMesh, labels: RegionLabels, settings: ExperimentSettings) -> np.ndarray:
        """configured tool centre, or the centroid of the loaded surface"""
        if settings.case.tool_center is not None:
            return np.asarray(settings.case.tool_center, dtype=np.float64)
        candidates = ExperimentBuilder.tool_candidates(mesh, labels)
        if not candidates:
            raise ConfigurationError("The loaded surface has no triangle free of fixed vertices")
        return MeshProcessor.triangle_centroids(mesh.vertices, mesh.boundary_tris[candidates]).mean(axis=0)


class SyntheticCaseGenerator:
    """Traction ramps on a tool triangle pair, with sampled deformed-surface clouds"""

    @staticmethod
    def sample_surface(mesh: TetMesh, u: Optional[Displacement], triangle_ids: Sequence[int],
                       count: int, rng: np.random.Generator) -> np.ndarray:
        """points uniform by area on the deformed triangles"""
        positions = mesh.vertices if u is None else mesh.vertices + u.values
        ids = np.array(sorted(triangle_ids), dtype=np.int64)
        corners = positions[mesh.boundary_tris[ids]]
        areas = MeshProcessor.triangle_areas(positions, mesh.boundary_tris[ids])
        chosen = rng.choice(ids.size, size=count, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        bary = np.column_stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2])
        return np.einsum("pk,pkj->pj", bary, corners[chosen])

    @staticmethod
    def generate_case(mesh: TetMesh, material: MaterialModel, labels: RegionLabels,
                      tool_triangles: Tuple[int, int], steps: int = 50,
                      step_displacement_target: float = 1e-3, sample_count: int = 500,
                      seed: int = 0, noise_sd: float = 0.0, traction_direction=None,
                      visible: Optional[Iterable[int]] = None,
                      solver_settings: Optional[SolverSettings] = None) -> SyntheticCase:
        """monotone traction ramp calibrated to a per-step tool displacement increment"""
        tool = tuple(int(t) for t in tool_triangles)
        if len(tool) != 2 or min(tool) < 0 or max(tool) >= mesh.n_boundary_tris:
            raise InvalidArgumentError(f"Tool must be two boundary triangle ids, got {tool}")
        if not MeshProcessor.triangles_adjacent(mesh, *tool):
            raise InvalidArgumentError(f"Tool triangles {tool} are not adjacent")
        if steps < 1 or sample_count < 1:
            raise InvalidArgumentError(f"steps and sample_count must be >= 1, got {steps}, {sample_count}")
        if step_displacement_target < 0.0 or noise_sd < 0.0:
            raise InvalidArgumentError("step_displacement_target and noise_sd must be non-negative")

        if traction_direction is None:
            # pressing into the surface
            normals = MeshProcessor.triangle_area_vectors(mesh.vertices, mesh.boundary_tris[list(tool)])
            direction = -normals.sum(axis=0)
        else:
            direction = np.asarray(traction_direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)

        visible_ids = sorted(visible) if visible is not None else sorted(labels.matching)
        if not visible_ids:
            visible_ids = list(range(mesh.n_boundary_tris))

        solver = EquilibriumSolver(mesh, material, labels, solver_settings)
        unit = ElasticityAssembler.traction_to_nodal_forces(mesh, tool, direction)
        tool_vertices = unit.support

        def tool_displacement(u: Displacement) -> float:
            return float(np.linalg.norm(u.values[tool_vertices].mean(axis=0)))

        increment = 0.0
        if step_displacement_target > 0.0:
            calibration = tool_displacement(solver.solve_direct(unit))
            if calibration <= 0.0:
                raise InvalidArgumentError("A unit traction on the tool does not move it")
            increment = step_displacement_target / calibration

        rng = np.random.default_rng(seed)
        magnitude = 0.0
        previous = 0.0
        u = Displacement.zeros(mesh.n_vertices)
        tractions, clouds, forces_true, displacements, nodal_forces = [], [], [], [], []
        for step in range(steps):
            magnitude += increment
            b = ForceField(magnitude * unit.values, unit.support)
            u = solver.solve_direct(b, u) if magnitude > 0.0 else Displacement.zeros(mesh.n_vertices)

            # secant correction of the increment; constant for a linear law
            reached = tool_displacement(u)
            if increment > 0.0 and reached > previous:
                increment *= step_displacement_target / (reached - previous)
            previous = reached

            points = SyntheticCaseGenerator.sample_surface(mesh, u, visible_ids, sample_count, rng)
            if noise_sd > 0.0:
                points = points + rng.normal(0.0, noise_sd, size=points.shape)

            tractions.append(magnitude * direction)
            clouds.append(PointCloud(points))
            forces_true.append(force_resultant(b))
            displacements.append(u)
            nodal_forces.append(b)
            logger.debug(f"case step {step}: |traction| = {magnitude:.4e} Pa, tool displacement {reached:.4e} m")

        logger.info(f"Generated {steps}-step case on tool {tool} (seed {seed})")
        return SyntheticCase(mesh, tool, np.array(tractions), clouds, np.array(forces_true),
                             displacements, nodal_forces, seed, noise_sd)


def control_zone(mesh: TetMesh, labels: RegionLabels, center, size: int = 50) -> np.ndarray:
    """the `size` free loaded-surface vertices nearest to a point"""
    candidates = labels.control_vertices(mesh)
    if candidates.size == 0:
        raise ConfigurationError("No loaded-surface vertex is free to carry a force")
    return MeshProcessor.nearest_vertices(mesh, center, size, candidates)


def estimate_sequence(case: SyntheticCase, recon_mesh: TetMesh, material: MaterialModel,
                      labels: RegionLabels, zone, settings: Optional[ExperimentSettings] = None,
                      reports: Optional[List[OptimizationReport]] = None) -> List[EstimationRecord]:
    """per-step force estimates, each solve warm-started from the previous one"""
    settings = settings or ExperimentSettings()
    zone = np.unique(np.asarray(list(zone), dtype=np.int64))
    problem = ExperimentBuilder.build_problem(recon_mesh, material, labels, case.clouds[0], settings, zone)
    optimizer = LbfgsOptimizer(settings.optimizer)

    records = []
    b = None
    for step, cloud in enumerate(case.clouds):
        problem = problem.with_cloud(cloud)
        started = time.perf_counter()
        b, _, report = optimizer.run(problem, b)
        elapsed = time.perf_counter() - started
        record = EstimationRecord(
            step=step,
            f_est=force_resultant(b, zone),
            f_true=case.forces_true[step],
            evaluations=report.evaluations,
            iterations=report.iterations,
            converged=report.converged,
            warning=report.line_search_failed,
            update_time=elapsed,
        )
        if record.warning:
            logger.warning(f"Step {step}: {report.message}")
        records.append(record)
        if reports is not None:
            reports.append(report)
        logger.info(f"step {step}: |f_est| = {np.linalg.norm(record.f_est):.4e} N, "
                    f"relative error {record.relative_error:.3%}, {record.evaluations} evaluations")
    return records


@dataclass
class RegistrationResult:
    transform: RigidTransform
    displacement: Displacement
    forces: ForceField
    report: OptimizationReport
    icp_history: List[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.transform, self.displacement, self.report))


def register(mesh: TetMesh, material: MaterialModel, labels: RegionLabels, cloud: PointCloud,
             settings: Optional[ExperimentSettings] = None) -> RegistrationResult:
    """rigid pre-alignment (ICP or a stored transform), then elastic registration in the mesh frame"""
    settings = settings or ExperimentSettings()
    icp = settings.icp
    if icp.transform_path:
        transform, history = load_transform(Path(icp.transform_path)), []
        logger.info(f"Using stored rigid transform from {icp.transform_path}")
    elif icp.enabled:
        transform, history = RigidAligner.icp_align(mesh, cloud, icp.max_iters, icp.tol, icp.centroid_init,
                                                    icp_triangles(labels, icp))
    else:
        transform, history = RigidTransform.identity(), []

    local_cloud = cloud.transformed(transform.inverse())
    problem = ExperimentBuilder.build_problem(mesh, material, labels, local_cloud, settings)
    forces, u, report = minimize(problem)
    logger.info(f"Elastic registration: J = {report.final_functional:.6e}, |u| = {u.norm():.4e} m")
    return RegistrationResult(transform, u, forces, report, history)


def icp_triangles(labels: RegionLabels, icp: IcpSettings):
    """triangle ids ICP aligns against; None means the whole rest boundary"""
    if icp.surface == "boundary":
        return None
    if icp.surface == "matching":
        if not labels.matching:
            raise ConfigurationError("ICP on the matching surface needs a non-empty matching set")
        return labels.matching_array()
    raise ConfigurationError(f"Unknown ICP surface '{icp.surface}' (expected 'matching' or 'boundary')")


def load_transform(path: Path) -> RigidTransform:
    """read transform.json as written by OutputBundle.write_transform"""
    FileManager.validate_file_access(Path(path))
    try:
        with open(path, 'r') as f:
            return RigidTransform.from_list(json.load(f)["transform"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"Malformed transform file {path}: {e}") from e


def target_errors(mesh: TetMesh, u_est: Displacement, u_true: Displacement, targets) -> np.ndarray:
    """distance between predicted and true deformed positions of interior targets"""
    predicted = MeshProcessor.interpolate_displacement(mesh, u_est.values, targets)
    truth = MeshProcessor.interpolate_displacement(mesh, u_true.values, targets)
    return np.linalg.norm(predicted - truth, axis=1)


def audit_gradient(problem: ControlProblem, b: Optional[ForceField], settings: AuditSettings) -> Dict[str, Any]:
    """finite-difference audit; raises when the worst direction exceeds the tolerance"""
    tolerance = settings.tolerance
    if tolerance is None:
        tolerance = AUDIT_TOLERANCE[problem.material.kind.value]
    result = gradient_audit(problem, b, settings.directions, settings.rel_step, settings.seed)
    result["tolerance"] = tolerance
    result["passed"] = result["max_error"] <= tolerance
    if not result["passed"]:
        raise GradientAuditError(
            f"Adjoint gradient disagrees with finite differences: max relative error "
            f"{result['max_error']:.3e} > {tolerance:.1e}", result["errors"])
    return result


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


class OutputBundle:
    """One run's output directory; every file except timings.json is deterministic"""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.timings: Dict[str, Any] = {}

    def path(self, name: str) -> Path:
        return self.directory / name

    def write_json(self, name: str, data: Dict[str, Any]) -> Path:
        target = self.path(name)
        DataValidator.validate_output_path(target)
        with open(target, 'w') as f:
            json.dump(_finite(data), f, indent=2, sort_keys=True)
            f.write("\n")
        return target

    def write_transform(self, transform: RigidTransform) -> Path:
        return self.write_json("transform.json", {"transform": transform.to_list()})

    def write_report(self, report: OptimizationReport, name: str = "report") -> Path:
        self.timings[f"{name}_wall_time"] = report.wall_time
        return self.write_json(f"{name}.json", report.to_dict())

    def write_forces(self, forces: ForceField) -> Path:
        frame = pd.DataFrame(forces.values[forces.support], columns=["fx", "fy", "fz"])
        frame.insert(0, "vertex", forces.support)
        target = self.path("forces.csv")
        frame.to_csv(target, index=False, float_format="%.17g")
        return target

    def write_records(self, records: List[EstimationRecord]) -> Path:
        self.timings["update_times"] = [r.update_time for r in records]
        self.write_json("records.json", {"records": [r.to_dict() for r in records]})
        target = self.path("records.csv")
        records_frame(records).to_csv(target, index=False, float_format="%.17g")
        return target

    def write_case(self, case: SyntheticCase) -> Path:
        FileManager.save_mesh(case.generator_mesh, self.path("generator.tet"))
        clouds = self.directory / "clouds"
        clouds.mkdir(exist_ok=True)
        for step, cloud in enumerate(case.clouds):
            FileManager.save_cloud(cloud, clouds / f"step_{step:03d}.xyz")
        return self.write_json("case.json", case.to_dict())

    def write_mesh(self, mesh: TetMesh, name: str, displacement: Optional[Displacement] = None) -> Path:
        return FileManager.save_mesh(mesh, self.path(name), displacement)

    def write_plot(self, figure_builder: Callable[[ResultViewer], Any], name: str) -> Path:
        viewer = ResultViewer()
        figure_builder(viewer)
        return viewer.save(self.path(name))

    def write_timings(self) -> Path:
        return self.write_json("timings.json", self.timings)


def load_case(directory: Path) -> SyntheticCase:
    """read a bundle written by OutputBundle.write_case"""
    directory = Path(directory)
    case_file = directory / "case.json"
    FileManager.validate_file_access(case_file)
    with open(case_file, 'r') as f:
        data = json.load(f)
    mesh = FileManager.load_mesh(directory / "generator.tet")
    clouds = [FileManager.load_cloud(directory / "clouds" / f"step_{step:03d}.xyz")
              for step in range(int(data["steps"]))]
    return SyntheticCase.from_dict(data, mesh, clouds)


def run_jobs(function: Callable, jobs: List[Any], workers: int = 1) -> List[Any]:
    """map a picklable job function over jobs, in a process pool when workers > 1"""
    if workers <= 1 or len(jobs) <= 1:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
        return list(executor.map(function, jobs))
