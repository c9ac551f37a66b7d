from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Dict, Any, List, Tuple, Iterable
import numpy as np

from validators import DataValidator


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class TetMesh:
    """tetrahedral volume mesh; boundary triangles are derived on first use"""

    def __init__(self, vertices, tets, validate: bool = True):
        self.vertices = _readonly(np.array(vertices, dtype=np.float64).reshape(-1, 3))
        self.tets = _readonly(np.array(tets, dtype=np.int64).reshape(-1, 4))
        self._boundary = None
        if validate:
            DataValidator.validate_mesh(self.vertices, self.tets)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def _census(self):
        if self._boundary is None:
            # local import, the processor module depends on this one
            from mesh_processor import MeshProcessor
            tris, owners, local = MeshProcessor.boundary_census(self.tets)
            self._boundary = (_readonly(tris), _readonly(owners), _readonly(local))
        return self._boundary

    @property
    def boundary_tris(self) -> np.ndarray:
        """outward-oriented boundary triangles, (k, 3)"""
        return self._census()[0]

    @property
    def n_boundary_tris(self) -> int:
        return self.boundary_tris.shape[0]

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_tris)

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diameter(self) -> float:
        lower, upper = self.bounding_box()
        return float(np.linalg.norm(upper - lower))

    def transformed(self, transform: "RigidTransform") -> "TetMesh":
        """copy of the mesh with a rigid motion applied to every vertex"""
        return TetMesh(transform.apply(self.vertices), self.tets, validate=False)

    def __repr__(self):
        return f"TetMesh(vertices={self.n_vertices}, tets={self.n_tets})"


@dataclass(frozen=True)
class RegionLabels:
    """matching / loaded boundary triangle sets and the fixed vertex set"""
    matching: frozenset = frozenset()
    loaded: frozenset = frozenset()
    fixed: frozenset = frozenset()

    def __post_init__(self):
        for name in ("matching", "loaded", "fixed"):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))

    @staticmethod
    def _sorted(ids: Iterable[int]) -> np.ndarray:
        return np.array(sorted(ids), dtype=np.int64)

    def matching_array(self) -> np.ndarray:
        return self._sorted(self.matching)

    def loaded_array(self) -> np.ndarray:
        return self._sorted(self.loaded)

    def fixed_array(self) -> np.ndarray:
        return self._sorted(self.fixed)

    def loaded_vertices(self, mesh: TetMesh) -> np.ndarray:
        if not self.loaded:
            return np.zeros(0, dtype=np.int64)
        return np.unique(mesh.boundary_tris[self.loaded_array()])

    def control_vertices(self, mesh: TetMesh) -> np.ndarray:
        """loaded-surface vertices that are free to carry a force"""
        return np.setdiff1d(self.loaded_vertices(mesh), self.fixed_array())

    def with_updates(self, **changes) -> "RegionLabels":
        data = {"matching": self.matching, "loaded": self.loaded, "fixed": self.fixed}
        data.update(changes)
        return RegionLabels(**data)

    def to_dict(self) -> Dict[str, List[int]]:
        return {
            "matching": sorted(self.matching),
            "loaded": sorted(self.loaded),
            "fixed": sorted(self.fixed),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegionLabels":
        return cls(
            matching=data.get("matching", []),
            loaded=data.get("loaded", []),
            fixed=data.get("fixed", []),
        )


class MaterialKind(str, Enum):
    LINEAR = "linear"
    SVK = "svk"


@dataclass(frozen=True)
class MaterialModel:
    """elastic constitutive law with Young modulus (Pa) and Poisson ratio"""
    kind: MaterialKind = MaterialKind.LINEAR
    young_modulus: float = 1.0
    poisson_ratio: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "kind", MaterialKind(self.kind))
        DataValidator.validate_material(self.young_modulus, self.poisson_ratio)

    @property
    def is_linear(self) -> bool:
        return self.kind is MaterialKind.LINEAR

    def scaled(self, factor: float) -> "MaterialModel":
        return MaterialModel(self.kind, self.young_modulus * factor, self.poisson_ratio)


@dataclass
class Displacement:
    """nodal displacement field, (n, 3) in meters"""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def zeros(cls, n_vertices: int) -> "Displacement":
        return cls(np.zeros((n_vertices, 3)))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class AdjointState:
    """adjoint state p_b, zero on fixed DOFs"""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


@dataclass
class ForceField:
    """consistent nodal forces (N) supported on a set of control vertices"""
    values: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)
        self.support = np.unique(np.asarray(self.support, dtype=np.int64))
        DataValidator.validate_force_support(self.values, self.support)

    @classmethod
    def zeros(cls, n_vertices: int, support) -> "ForceField":
        return cls(np.zeros((n_vertices, 3)), support)

    @classmethod
    def from_control_vector(cls, n_vertices: int, support, x: np.ndarray) -> "ForceField":
        support = np.unique(np.asarray(support, dtype=np.int64))
        values = np.zeros((n_vertices, 3))
        values[support] = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        return cls(values, support)

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def control_vector(self) -> np.ndarray:
        return self.values[self.support].reshape(-1).copy()

    def vertex_norms(self) -> np.ndarray:
        return np.linalg.norm(self.values[self.support], axis=1)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


@dataclass
class PointCloud:
    """observed surface points, (m, 3) in meters"""
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        DataValidator.validate_point_cloud(self.points)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, transform: "RigidTransform") -> "PointCloud":
        return PointCloud(transform.apply(self.points))


@dataclass(frozen=True)
class Projection:
    """closest point r_j on a deformed boundary triangle"""
    triangle_id: int
    barycentric: np.ndarray
    position: np.ndarray

    def distance_to(self, point) -> float:
        return float(np.linalg.norm(self.position - np.asarray(point, dtype=np.float64)))


@dataclass
class ProjectionSet:
    """projections of a whole cloud, stored column-wise"""
    triangle_ids: np.ndarray
    barycentric: np.ndarray
    positions: np.ndarray
    sq_distances: np.ndarray

    def __len__(self):
        return self.triangle_ids.shape[0]

    def __getitem__(self, index: int) -> Projection:
        return Projection(
            triangle_id=int(self.triangle_ids[index]),
            barycentric=self.barycentric[index].copy(),
            position=self.positions[index].copy(),
        )


@dataclass
class RigidTransform:
    """x -> R x + t"""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        DataValidator.validate_rotation(self.rotation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other"""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def rotation_angle(self) -> float:
        cos_angle = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(cos_angle))

    def to_list(self) -> List[float]:
        return self.rotation.reshape(-1).tolist() + self.translation.tolist()

    @classmethod
    def from_list(cls, values) -> "RigidTransform":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (12,):
            raise ValueError(f"A rigid transform has 12 numbers, got {values.size}")
        return cls(values[:9].reshape(3, 3), values[9:])


@dataclass
class OptimizationReport:
    """summary of one minimize call"""
    iterations: int = 0
    evaluations: int = 0
    converged: bool = False
    line_search_failed: bool = False
    message: str = ""
    final_objective: float = float("nan")
    final_functional: float = float("nan")
    initial_gradient_norm: float = float("nan")
    final_gradient_norm: float = float("nan")
    objective_history: List[float] = field(default_factory=list)
    functional_history: List[float] = field(default_factory=list)
    gradient_norm_history: List[float] = field(default_factory=list)
    direct_solves: int = 0
    adjoint_solves: int = 0
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        data = {
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "converged": self.converged,
            "line_search_failed": self.line_search_failed,
            "message": self.message,
            "final_objective": self.final_objective,
            "final_functional": self.final_functional,
            "initial_gradient_norm": self.initial_gradient_norm,
            "final_gradient_norm": self.final_gradient_norm,
            "objective_history": list(self.objective_history),
            "functional_history": list(self.functional_history),
            "gradient_norm_history": list(self.gradient_norm_history),
            "direct_solves": self.direct_solves,
            "adjoint_solves": self.adjoint_solves,
        }
        if include_timing:
            data["wall_time"] = self.wall_time
        return data


@dataclass
class SyntheticCase:
    """a traction sequence on a tool triangle pair, with sampled clouds and truth"""
    generator_mesh: TetMesh
    tool_triangles: Tuple[int, int]
    tractions: np.ndarray
    clouds: List[PointCloud]
    forces_true: np.ndarray
    displacements: List[Displacement]
    nodal_forces: List[ForceField]
    seed: int = 0
    noise_sd: float = 0.0

    def __post_init__(self):
        self.tractions = np.asarray(self.tractions, dtype=np.float64).reshape(-1, 3)
        self.forces_true = np.asarray(self.forces_true, dtype=np.float64).reshape(-1, 3)
        DataValidator.validate_case_lengths(len(self.tractions), len(self.clouds),
                                            len(self.forces_true), len(self.displacements))

    @property
    def steps(self) -> int:
        return len(self.clouds)

    def tool_center(self) -> np.ndarray:
        tris = self.generator_mesh.boundary_tris[list(self.tool_triangles)]
        return self.generator_mesh.vertices[np.unique(tris)].mean(axis=0)

    def to_dict(self) -> Dict[str, Any]:
        """truth of the case; clouds and the generator mesh are stored separately"""
        support = self.nodal_forces[0].support if self.nodal_forces else np.zeros(0, dtype=np.int64)
        return {
            "tool_triangles": [int(t) for t in self.tool_triangles],
            "tractions": self.tractions.tolist(),
            "forces_true": self.forces_true.tolist(),
            "steps": self.steps,
            "seed": int(self.seed),
            "noise_sd": float(self.noise_sd),
            "nodal_force_support": support.tolist(),
            "nodal_forces": [b.values[support].tolist() for b in self.nodal_forces],
            "displacements": [u.values.tolist() for u in self.displacements],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], generator_mesh: TetMesh,
                  clouds: List["PointCloud"]) -> "SyntheticCase":
        n = generator_mesh.n_vertices
        support = data.get("nodal_force_support", [])
        return cls(
            generator_mesh=generator_mesh,
            tool_triangles=tuple(int(t) for t in data["tool_triangles"]),
            tractions=data["tractions"],
            clouds=clouds,
            forces_true=data["forces_true"],
            displacements=[Displacement(np.asarray(u, dtype=np.float64)) for u in data.get("displacements", [])],
            nodal_forces=[ForceField.from_control_vector(n, support, np.asarray(f).reshape(-1))
                          for f in data.get("nodal_forces", [])],
            seed=int(data.get("seed", 0)),
            noise_sd=float(data.get("noise_sd", 0.0)),
        )


@dataclass
class EstimationRecord:
    """force estimate for one sequence step"""
    step: int
    f_est: np.ndarray
    f_true: Optional[np.ndarray] = None
    relative_error: float = float("nan")
    evaluations: int = 0
    iterations: int = 0
    converged: bool = False
    warning: bool = False
    update_time: float = 0.0

    def __post_init__(self):
        self.f_est = np.asarray(self.f_est, dtype=np.float64).reshape(3)
        if self.f_true is not None:
            self.f_true = np.asarray(self.f_true, dtype=np.float64).reshape(3)
            true_norm = float(np.linalg.norm(self.f_true))
            if true_norm > 0.0:
                self.relative_error = float(np.linalg.norm(self.f_est - self.f_true) / true_norm)

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        data = {
            "step": self.step,
            "f_est": self.f_est.tolist(),
            "f_true": None if self.f_true is None else self.f_true.tolist(),
            "relative_error": self.relative_error,
            "evaluations": self.evaluations,
            "iterations": self.iterations,
            "converged": self.converged,
            "warning": self.warning,
        }
        if include_timing:
            data["update_time"] = self.update_time
        return data
