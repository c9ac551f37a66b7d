"""
Closest-point projection onto a deformed boundary and the least-squares
discrepancy J(u) = 1/(2m) sum_j |p_u(y_j) - y_j|^2 with its nodal gradient.
"""
from typing import Optional, Tuple
import numpy as np

from data_models import TetMesh, RegionLabels, Displacement, PointCloud, Projection, ProjectionSet
from exceptions import ConfigurationError, ConsistencyError
from loggers import get_logger

logger = get_logger(__name__)

STALE_TOLERANCE = 1e-9


def _dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, y)


def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """barycentric coordinates of the closest point of triangles (a, b, c) to points p

    Voronoi-region classification (vertex, edge, then face regions); all
    arguments are (k, 3) arrays, the result is (k, 3).
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    bary = np.empty((p.shape[0], 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v, w = vb / denom, vc / denom
        bary[:] = np.column_stack([1.0 - v - w, v, w])

        # later assignments win, so regions are applied from lowest to highest priority
        in_bc = (va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        bary[in_bc] = np.column_stack([np.zeros_like(t), 1.0 - t, t])[in_bc]

        in_ac = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
        t = d2 / (d2 - d6)
        bary[in_ac] = np.column_stack([1.0 - t, np.zeros_like(t), t])[in_ac]

        in_c = (d6 >= 0.0) & (d5 <= d6)
        bary[in_c] = (0.0, 0.0, 1.0)

        in_ab = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
        t = d1 / (d1 - d3)
        bary[in_ab] = np.column_stack([1.0 - t, t, np.zeros_like(t)])[in_ab]

        in_b = (d3 >= 0.0) & (d4 <= d3)
        bary[in_b] = (0.0, 1.0, 0.0)

        in_a = (d1 <= 0.0) & (d2 <= 0.0)
        bary[in_a] = (1.0, 0.0, 0.0)
    return bary


class AabbTree:
    """Bounding-box hierarchy over triangles, queried for many points at once"""

    def __init__(self, positions: np.ndarray, triangles: np.ndarray, leaf_size: int = 8):
        self.positions = positions
        self.triangles = triangles
        corners = positions[triangles]
        tri_lower, tri_upper = corners.min(axis=1), corners.max(axis=1)
        centers = 0.5 * (tri_lower + tri_upper)

        self.order = np.arange(triangles.shape[0])
        lower, upper, left, right, start, count = [], [], [], [], [], []

        def build(begin: int, end: int) -> int:
            idx = self.order[begin:end]
            node = len(lower)
            lower.append(tri_lower[idx].min(axis=0))
            upper.append(tri_upper[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(begin)
            count.append(end - begin)
            if end - begin <= leaf_size:
                return node
            spread = centers[idx].max(axis=0) - centers[idx].min(axis=0)
            axis = int(np.argmax(spread))
            self.order[begin:end] = idx[np.argsort(centers[idx, axis], kind="stable")]
            middle = (begin + end) // 2
            left[node] = build(begin, middle)
            right[node] = build(middle, end)
            return node

        build(0, triangles.shape[0])
        self.lower = np.array(lower)
        self.upper = np.array(upper)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)

    def _box_sq_distance(self, points: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        gap = np.maximum(self.lower[nodes] - points, 0.0) + np.maximum(points - self.upper[nodes], 0.0)
        return _dot(gap, gap)

    def _evaluate_leaves(self, points, point_ids, nodes, best):
        counts = self.count[nodes]
        pair_points = np.repeat(point_ids, counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pair_tris = self.order[np.repeat(self.start[nodes], counts) + offsets]

        corners = self.positions[self.triangles[pair_tris]]
        query = points[pair_points]
        bary = closest_point_barycentric(query, corners[:, 0], corners[:, 1], corners[:, 2])
        closest = np.einsum("pk,pkj->pj", bary, corners)
        sq_dist = _dot(query - closest, query - closest)

        # per point: smallest distance, then lowest triangle index
        order = np.lexsort((pair_tris, sq_dist, pair_points))
        _, first = np.unique(pair_points[order], return_index=True)
        pick = order[first]
        owner = pair_points[pick]

        best_d2, best_tri, best_bary = best
        better = (sq_dist[pick] < best_d2[owner]) | (
            (sq_dist[pick] == best_d2[owner]) & (pair_tris[pick] < best_tri[owner]))
        owner, pick = owner[better], pick[better]
        best_d2[owner] = sq_dist[pick]
        best_tri[owner] = pair_tris[pick]
        best_bary[owner] = bary[pick]

    def nearest(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(local triangle index, barycentric, squared distance) of the nearest triangle per point"""
        m = points.shape[0]
        best = (np.full(m, np.inf), np.full(m, np.iinfo(np.int64).max, dtype=np.int64), np.zeros((m, 3)))
        all_points = np.arange(m)

        # greedy descent gives every point an upper bound before pruning
        nodes = np.zeros(m, dtype=np.int64)
        internal = self.left[nodes] >= 0
        while internal.any():
            active = np.flatnonzero(internal)
            lhs, rhs = self.left[nodes[active]], self.right[nodes[active]]
            go_left = (self._box_sq_distance(points[active], lhs)
                       <= self._box_sq_distance(points[active], rhs))
            nodes[active] = np.where(go_left, lhs, rhs)
            internal = self.left[nodes] >= 0
        self._evaluate_leaves(points, all_points, nodes, best)

        frontier_points, frontier_nodes = all_points, np.zeros(m, dtype=np.int64)
        while frontier_points.size:
            sq_box = self._box_sq_distance(points[frontier_points], frontier_nodes)
            keep = sq_box <= best[0][frontier_points]
            frontier_points, frontier_nodes = frontier_points[keep], frontier_nodes[keep]
            is_leaf = self.left[frontier_nodes] < 0
            if is_leaf.any():
                self._evaluate_leaves(points, frontier_points[is_leaf], frontier_nodes[is_leaf], best)
            inner_points, inner_nodes = frontier_points[~is_leaf], frontier_nodes[~is_leaf]
            frontier_points = np.concatenate([inner_points, inner_points])
            frontier_nodes = np.concatenate([self.left[inner_nodes], self.right[inner_nodes]])

        best_d2, best_tri, best_bary = best
        return best_tri, best_bary, best_d2


class SurfaceProjector:
    """Closest-point operator on (a subset of) the deformed boundary"""

    def __init__(self, mesh: TetMesh, u: Optional[Displacement] = None, triangle_ids=None,
                 leaf_size: int = 8):
        self.mesh = mesh
        self.positions = mesh.vertices if u is None else mesh.vertices + u.values
        if triangle_ids is None:
            self.triangle_ids = np.arange(mesh.n_boundary_tris)
        else:
            self.triangle_ids = np.array(sorted(triangle_ids), dtype=np.int64)
        if self.triangle_ids.size == 0:
            raise ConfigurationError("Cannot project onto an empty triangle set")
        self.triangles = mesh.boundary_tris[self.triangle_ids]
        self.tree = AabbTree(self.positions, self.triangles, leaf_size)

    def project_cloud(self, points) -> ProjectionSet:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        local, bary, sq_dist = self.tree.nearest(points)
        positions = np.einsum("pk,pkj->pj", bary, self.positions[self.triangles[local]])
        return ProjectionSet(self.triangle_ids[local], bary, positions, sq_dist)

    def project_point(self, y) -> Projection:
        return self.project_cloud(np.asarray(y, dtype=np.float64).reshape(1, 3))[0]


class SurfaceObjective:
    """Discrepancy functional J and its gradient with respect to nodal displacements"""

    @staticmethod
    def matching_triangles(labels: Optional[RegionLabels], restrict: bool = True):
        """triangle ids the cloud is matched against; None means the whole boundary"""
        if labels is None or not restrict:
            return None
        if not labels.matching:
            raise ConfigurationError("The matching surface is empty")
        return labels.matching_array()

    @staticmethod
    def project_point(mesh: TetMesh, u: Optional[Displacement], y,
                      labels: Optional[RegionLabels] = None, restrict: bool = True) -> Projection:
        ids = SurfaceObjective.matching_triangles(labels, restrict)
        return SurfaceProjector(mesh, u, ids).project_point(y)

    @staticmethod
    def project_cloud(mesh: TetMesh, u: Optional[Displacement], cloud: PointCloud,
                      labels: Optional[RegionLabels] = None, restrict: bool = True) -> ProjectionSet:
        ids = SurfaceObjective.matching_triangles(labels, restrict)
        return SurfaceProjector(mesh, u, ids).project_cloud(cloud.points)

    @staticmethod
    def exhaustive_projection(mesh: TetMesh, u: Optional[Displacement], y, triangle_ids=None) -> Projection:
        """brute-force scan over every candidate triangle"""
        positions = mesh.vertices if u is None else mesh.vertices + u.values
        ids = (np.arange(mesh.n_boundary_tris) if triangle_ids is None
               else np.array(sorted(triangle_ids), dtype=np.int64))
        corners = positions[mesh.boundary_tris[ids]]
        query = np.broadcast_to(np.asarray(y, dtype=np.float64), (ids.size, 3))
        bary = closest_point_barycentric(query, corners[:, 0], corners[:, 1], corners[:, 2])
        closest = np.einsum("pk,pkj->pj", bary, corners)
        sq_dist = _dot(query - closest, query - closest)
        best = int(np.lexsort((ids, sq_dist))[0])
        return Projection(int(ids[best]), bary[best], closest[best])

    @staticmethod
    def functional(mesh: TetMesh, u: Optional[Displacement], cloud: PointCloud,
                   labels: Optional[RegionLabels] = None, restrict: bool = True) -> Tuple[float, ProjectionSet]:
        """J(u) = 1/(2m) sum |r_j - y_j|^2, with the projections for reuse"""
        projections = SurfaceObjective.project_cloud(mesh, u, cloud, labels, restrict)
        residual = projections.positions - cloud.points
        value = 0.5 * float(np.einsum("ij,ij->", residual, residual)) / len(cloud)
        return value, projections

    @staticmethod
    def frozen_functional(mesh: TetMesh, u: Optional[Displacement], cloud: PointCloud,
                          projections: ProjectionSet) -> float:
        """J with each projection's triangle and barycentric weights held fixed"""
        positions = mesh.vertices if u is None else mesh.vertices + u.values
        corners = positions[mesh.boundary_tris[projections.triangle_ids]]
        residual = np.einsum("pk,pkj->pj", projections.barycentric, corners) - cloud.points
        return 0.5 * float(np.einsum("ij,ij->", residual, residual)) / len(cloud)

    @staticmethod
    def functional_gradient(mesh: TetMesh, u: Optional[Displacement], cloud: PointCloud,
                            projections: ProjectionSet) -> np.ndarray:
        """nodal gradient: (r_j - y_j)/m spread on T_j's vertices with barycentric weights"""
        if len(projections) != len(cloud):
            raise ConsistencyError(
                f"{len(projections)} projections for a cloud of {len(cloud)} points")
        positions = mesh.vertices if u is None else mesh.vertices + u.values
        tris = mesh.boundary_tris[projections.triangle_ids]
        recomputed = np.einsum("pk,pkj->pj", projections.barycentric, positions[tris])
        mismatch = np.abs(recomputed - projections.positions).max()
        if mismatch > STALE_TOLERANCE:
            raise ConsistencyError(
                f"Projections are stale: positions moved by {mismatch:.3e} since they were computed")

        weighted = (projections.positions - cloud.points) / len(cloud)
        gradient = np.zeros((mesh.n_vertices, 3))
        for corner in range(3):
            np.add.at(gradient, tris[:, corner], projections.barycentric[:, corner, None] * weighted)
        return gradient
