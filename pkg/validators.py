from pathlib import Path
import numpy as np
from exceptions import (InvalidMeshError, InvalidArgumentError, ConfigurationError,
                        FileAccessError, DataFormatError)

# relative to the mean |det| of the mesh; below this a tet counts as degenerate
VOLUME_RTOL = 1e-12


class DataValidator:
    """Validates meshes, labels, materials and fields"""

    @staticmethod
    def validate_mesh(vertices: np.ndarray, tets: np.ndarray) -> bool:
        """Indices in range, finite coordinates, strictly positive tet volumes"""
        if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] < 4:
            raise InvalidMeshError(f"Expected at least 4 vertices of dimension 3, got {vertices.shape}")
        if tets.ndim != 2 or tets.shape[1] != 4 or tets.shape[0] == 0:
            raise InvalidMeshError(f"Expected a nonempty (t, 4) tet array, got {tets.shape}")
        if not np.all(np.isfinite(vertices)):
            raise InvalidMeshError("Vertex coordinates must be finite")
        if tets.min() < 0 or tets.max() >= vertices.shape[0]:
            raise InvalidMeshError(
                f"Tet indices must lie in [0, {vertices.shape[0] - 1}], "
                f"got [{tets.min()}, {tets.max()}]")

        x = vertices[tets]
        dets = np.linalg.det(np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2))
        scale = np.abs(dets).mean()
        bad = np.flatnonzero(dets <= VOLUME_RTOL * scale)
        if bad.size:
            raise InvalidMeshError(
                f"{bad.size} tets have non-positive signed volume (first: tet {bad[0]}, "
                f"volume {dets[bad[0]] / 6.0:.3e})")
        return True

    @staticmethod
    def validate_labels(mesh, labels) -> bool:
        """Label ids reference the boundary; loaded vertices avoid the fixed set"""
        n_tris = mesh.n_boundary_tris
        for name in ("matching", "loaded"):
            ids = getattr(labels, name)
            if ids and (min(ids) < 0 or max(ids) >= n_tris):
                raise ConfigurationError(
                    f"'{name}' references triangles outside [0, {n_tris - 1}]")
        if labels.fixed:
            fixed = labels.fixed_array()
            if fixed.min() < 0 or fixed.max() >= mesh.n_vertices:
                raise ConfigurationError("'fixed' references vertices outside the mesh")
            off_boundary = np.setdiff1d(fixed, mesh.boundary_vertices())
            if off_boundary.size:
                raise ConfigurationError(
                    f"{off_boundary.size} fixed vertices are not on the boundary (first: {off_boundary[0]})")
            shared = np.intersect1d(fixed, labels.loaded_vertices(mesh))
            if shared.size:
                raise ConfigurationError(
                    f"Loaded-region vertices and fixed vertices overlap ({shared.size} shared)")
        return True

    @staticmethod
    def validate_material(young_modulus: float, poisson_ratio: float) -> bool:
        """E > 0 and 0 < nu < 0.5"""
        if not np.isfinite(young_modulus) or young_modulus <= 0.0:
            raise InvalidArgumentError(f"Young modulus must be positive, got {young_modulus}")
        if not (0.0 <= poisson_ratio < 0.5):
            raise InvalidArgumentError(f"Poisson ratio must lie in [0, 0.5), got {poisson_ratio}")
        return True

    @staticmethod
    def validate_force_support(values: np.ndarray, support: np.ndarray) -> bool:
        """Nodal forces vanish outside their support"""
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("Force values must be finite")
        if support.size and (support.min() < 0 or support.max() >= values.shape[0]):
            raise InvalidArgumentError("Force support references vertices outside the field")
        outside = np.ones(values.shape[0], dtype=bool)
        outside[support] = False
        if np.any(values[outside] != 0.0):
            raise InvalidArgumentError("Force field is nonzero outside its support")
        return True

    @staticmethod
    def validate_point_cloud(points: np.ndarray) -> bool:
        """Nonempty, finite"""
        if points.shape[0] == 0:
            raise InvalidArgumentError("Point cloud is empty")
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("Point cloud has non-finite coordinates")
        return True

    @staticmethod
    def validate_rotation(rotation: np.ndarray, tol: float = 1e-10) -> bool:
        """Orthogonal with positive determinant"""
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > tol or np.linalg.det(rotation) <= 0.0:
            raise InvalidArgumentError("Rotation must be orthogonal with det = +1")
        return True

    @staticmethod
    def validate_case_lengths(*lengths: int) -> bool:
        """One cloud and one truth record per sequence step"""
        if len(set(lengths)) != 1:
            raise InvalidArgumentError(f"Synthetic case arrays disagree in length: {lengths}")
        return True

    @staticmethod
    def validate_output_path(output_path: Path, overwrite: bool = True) -> bool:
        """Validate output path is writable"""
        # Check parent directory exists and is writable
        parent_dir = output_path.parent
        if not parent_dir.exists():
            try:
                parent_dir.mkdir(parents=True)
            except PermissionError:
                raise FileAccessError(f"Cannot create output directory: {parent_dir}")

        # Check if file exists and overwrite permission
        if output_path.exists() and not overwrite:
            raise FileAccessError(f"Output file already exists: {output_path}")

        if output_path.exists() and output_path.is_dir():
            raise DataFormatError(f"Output path is a directory: {output_path}")

        return True
