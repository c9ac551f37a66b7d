import json
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Optional
import numpy as np
import meshio

from data_models import TetMesh, PointCloud, RegionLabels, Displacement
from exceptions import DataFormatError, InvalidMeshError
from loggers import get_logger

logger = get_logger(__name__)


def orient_tets(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """swap two indices of negatively oriented tets; zero-volume tets are left for validation"""
    tets = np.array(tets, dtype=np.int64)
    x = vertices[tets]
    dets = np.linalg.det(np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2))
    negative = dets < 0.0
    if negative.any():
        logger.warning(f"Reoriented {int(negative.sum())} negatively oriented tets")
        tets[negative] = tets[negative][:, [0, 1, 3, 2]]
    return tets


class FormatHandler(ABC):
    """Abstract base class for format-specific handlers"""

    @abstractmethod
    def can_handle(self, file_path: Path) -> bool:
        """Check if handler can process this file"""
        pass

    @abstractmethod
    def read(self, file_path: Path) -> Any:
        """Read file using format-specific logic"""
        pass

    @abstractmethod
    def write(self, data: Any, file_path: Path, **kwargs) -> bool:
        """Write data using format-specific logic"""
        pass


class TetFormatHandler(FormatHandler):
    """Minimal ASCII tet mesh: vertex count, vertices, tet count, 0-based tets"""

    def can_handle(self, file_path: Path) -> bool:
        return file_path.suffix.lower() == '.tet'

    def read(self, file_path: Path) -> TetMesh:
        """Read .tet mesh"""
        try:
            with open(file_path, 'r') as f:
                rows = [line.split('#', 1)[0].split() for line in f]
            rows = [row for row in rows if row]
            n_vertices = int(rows[0][0])
            vertices = np.array(rows[1:1 + n_vertices], dtype=np.float64)
            n_tets = int(rows[1 + n_vertices][0])
            tets = np.array(rows[2 + n_vertices:2 + n_vertices + n_tets], dtype=np.int64)
            if len(rows) != 2 + n_vertices + n_tets:
                raise ValueError(f"expected {2 + n_vertices + n_tets} records, found {len(rows)}")
        except (IndexError, ValueError) as e:
            raise DataFormatError(f"Malformed .tet file {file_path}: {e}") from e
        if vertices.shape != (n_vertices, 3) or tets.shape != (n_tets, 4):
            raise DataFormatError(f"Malformed .tet file {file_path}: bad record widths")
        return TetMesh(vertices, orient_tets(vertices, tets))

    def write(self, data: TetMesh, file_path: Path, **kwargs) -> bool:
        """Write .tet mesh; displacement, when given, is added to the vertices"""
        displacement: Optional[Displacement] = kwargs.get('displacement')
        vertices = data.vertices if displacement is None else data.vertices + displacement.values
        with open(file_path, 'w') as f:
            f.write(f"{data.n_vertices}\n")
            # python floats: shortest repr that reads back exactly
            for x, y, z in vertices.tolist():
                f.write(f"{x!r} {y!r} {z!r}\n")
            f.write(f"{data.n_tets}\n")
            for a, b, c, d in data.tets:
                f.write(f"{a} {b} {c} {d}\n")
        return True


class VtkFormatHandler(FormatHandler):
    """Legacy ASCII VTK unstructured grids (tetra cells) via meshio"""

    def can_handle(self, file_path: Path) -> bool:
        return file_path.suffix.lower() == '.vtk'

    def read(self, file_path: Path) -> TetMesh:
        """Read VTK mesh"""
        try:
            mesh = meshio.read(file_path, file_format="vtk")
        except Exception as e:
            raise DataFormatError(f"Cannot read VTK file {file_path}: {e}") from e
        blocks = [c.data for c in mesh.cells if c.type == "tetra"]
        if not blocks:
            raise InvalidMeshError(f"No tetrahedra found in {file_path}")
        vertices = np.asarray(mesh.points, dtype=np.float64)[:, :3]
        tets = np.concatenate(blocks).astype(np.int64)
        return TetMesh(vertices, orient_tets(vertices, tets))

    def write(self, data: TetMesh, file_path: Path, **kwargs) -> bool:
        """Write VTK mesh; a displacement is stored as point data and applied to the points"""
        displacement: Optional[Displacement] = kwargs.get('displacement')
        point_data = {}
        points = data.vertices
        if displacement is not None:
            point_data["displacement"] = displacement.values
            points = data.vertices + displacement.values
        try:
            meshio.write(file_path, meshio.Mesh(points, [("tetra", data.tets)], point_data=point_data),
                         file_format="vtk", binary=False)
        except Exception as e:
            raise DataFormatError(f"Cannot write VTK file {file_path}: {e}") from e
        return True


class XyzFormatHandler(FormatHandler):
    """ASCII point clouds, one 'x y z' per line"""

    def can_handle(self, file_path: Path) -> bool:
        return file_path.suffix.lower() == '.xyz'

    def read(self, file_path: Path) -> PointCloud:
        """Read XYZ point cloud"""
        try:
            points = np.loadtxt(file_path, comments='#', ndmin=2)
        except ValueError as e:
            raise DataFormatError(f"Malformed XYZ file {file_path}: {e}") from e
        if points.shape[1] != 3:
            raise DataFormatError(f"XYZ file {file_path} must have 3 columns, found {points.shape[1]}")
        return PointCloud(points)

    def write(self, data: PointCloud, file_path: Path, **kwargs) -> bool:
        """Write XYZ point cloud"""
        np.savetxt(file_path, data.points, fmt='%.17g')
        return True


class PlyFormatHandler(FormatHandler):
    """PLY point clouds (vertex element only is used) via meshio"""

    def can_handle(self, file_path: Path) -> bool:
        return file_path.suffix.lower() == '.ply'

    def read(self, file_path: Path) -> PointCloud:
        """Read PLY vertices as a point cloud"""
        try:
            mesh = meshio.read(file_path, file_format="ply")
        except Exception as e:
            raise DataFormatError(f"Cannot read PLY file {file_path}: {e}") from e
        return PointCloud(np.asarray(mesh.points, dtype=np.float64)[:, :3])

    def write(self, data: PointCloud, file_path: Path, **kwargs) -> bool:
        """Write ASCII PLY point cloud"""
        try:
            meshio.write(file_path, meshio.Mesh(data.points, []), file_format="ply", binary=False)
        except Exception as e:
            raise DataFormatError(f"Cannot write PLY file {file_path}: {e}") from e
        return True


class LabelsFormatHandler(FormatHandler):
    """Region label sidecar: {"matching": [...], "loaded": [...], "fixed": [...]}"""

    KEYS = {"matching", "loaded", "fixed"}

    def can_handle(self, file_path: Path) -> bool:
        return file_path.suffix.lower() == '.json'

    def read(self, file_path: Path) -> RegionLabels:
        """Read labels JSON"""
        try:
            with open(file_path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"Labels file {file_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict) or not set(data) <= self.KEYS:
            raise DataFormatError(f"Labels file {file_path} may only hold the keys {sorted(self.KEYS)}")
        return RegionLabels.from_dict(data)

    def write(self, data: RegionLabels, file_path: Path, **kwargs) -> bool:
        """Write labels JSON"""
        with open(file_path, 'w') as f:
            json.dump(data.to_dict(), f, indent=2, sort_keys=True)
        return True


class FormatFactory:
    """Factory for creating format handlers"""

    def __init__(self):
        self.handlers = [
            TetFormatHandler(),
            VtkFormatHandler(),
            XyzFormatHandler(),
            PlyFormatHandler(),
            LabelsFormatHandler(),
        ]

    def get_handler(self, file_path: Path) -> FormatHandler:
        """Get appropriate handler for file"""
        for handler in self.handlers:
            if handler.can_handle(file_path):
                return handler

        raise DataFormatError(f"No handler available for {file_path.suffix}")
