from typing import List, Optional, Tuple
import numpy as np

from data_models import TetMesh, PointCloud, RigidTransform
from surface_projection import SurfaceProjector
from exceptions import DegenerateConfigurationError, InvalidArgumentError
from loggers import get_logger

logger = get_logger(__name__)

# singular-value ratio below which centered points count as collinear
RANK_RTOL = 1e-10


class RigidAligner:
    """Kabsch fits and point-to-surface ICP"""

    @staticmethod
    def best_fit_transform(source, target, correspondences=None) -> RigidTransform:
        """R, t minimizing sum |R s_i + t - t_i|^2 over the paired points"""
        source = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
        target = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
        if correspondences is not None:
            pairs = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
            source, target = source[pairs[:, 0]], target[pairs[:, 1]]
        if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
            raise InvalidArgumentError(
                f"Paired point sets must both be (k, 3), got {source.shape} and {target.shape}")
        if source.shape[0] < 3:
            raise DegenerateConfigurationError(f"Need at least 3 correspondences, got {source.shape[0]}")

        source_center = source.mean(axis=0)
        target_center = target.mean(axis=0)
        source_centered = source - source_center
        spread = np.linalg.svd(source_centered, compute_uv=False)
        if spread[0] == 0.0 or spread[1] <= RANK_RTOL * spread[0]:
            raise DegenerateConfigurationError(
                "Source points are coincident or collinear; the rotation is undetermined")

        H = source_centered.T @ (target - target_center)
        U, _, Vt = np.linalg.svd(H)
        V = Vt.T
        # reflection guard
        d = np.sign(np.linalg.det(V @ U.T))
        rotation = V @ np.diag([1.0, 1.0, d]) @ U.T
        translation = target_center - rotation @ source_center
        return RigidTransform(rotation, translation)

    @staticmethod
    def alignment_error(mesh: TetMesh, cloud: PointCloud, transform: RigidTransform,
                        projector: Optional[SurfaceProjector] = None) -> float:
        """mean squared distance from the cloud to the transformed boundary"""
        projector = projector or SurfaceProjector(mesh)
        local = transform.inverse().apply(cloud.points)
        return float(projector.project_cloud(local).sq_distances.mean())

    @staticmethod
    def icp_align(mesh: TetMesh, cloud: PointCloud, max_iters: int = 100, tol: float = 1e-10,
                  centroid_init: bool = False, triangle_ids=None) -> Tuple[RigidTransform, List[float]]:
        """transform T placing the mesh onto the cloud, and the per-iteration MSE history

        The mesh stays in its own frame: every iteration maps the cloud back by
        T^-1, projects onto the rest boundary (or the given triangles of it) and
        refits T to the pairs. history[-1] is always the MSE of the returned T.
        """
        transform = RigidTransform.identity()
        if max_iters <= 0:
            return transform, []

        projector = SurfaceProjector(mesh, triangle_ids=triangle_ids)
        if centroid_init:
            surface = np.unique(projector.triangles)
            offset = cloud.points.mean(axis=0) - mesh.vertices[surface].mean(axis=0)
            transform = RigidTransform(np.eye(3), offset)

        history = []
        for iteration in range(max_iters):
            local = transform.inverse().apply(cloud.points)
            projections = projector.project_cloud(local)
            mse = float(projections.sq_distances.mean())
            history.append(mse)
            if mse == 0.0:
                break
            if len(history) > 1 and history[-2] - mse <= tol * history[-2]:
                break
            transform = RigidAligner.best_fit_transform(projections.positions, cloud.points)
        else:
            history.append(RigidAligner.alignment_error(mesh, cloud, transform, projector))

        logger.info(f"ICP finished after {iteration + 1} iterations (MSE {history[-1]:.3e}, "
                    f"rotation {np.degrees(transform.rotation_angle()):.3f} deg)")
        return transform, history
