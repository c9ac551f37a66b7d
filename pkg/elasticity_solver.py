"""
P1 tetrahedral elastostatics.

Internal forces F(u) and tangents dF/du are assembled element by element with
constant strain per tet, in a total Lagrangian description:

    H = grad u,  F = I + H,  E = (H + H^T + H^T H) / 2
    S = lambda tr(E) I + 2 mu E,  P = F S
    f_a = V P grad N_a

The linear material uses the small-strain counterpart (E -> sym(H), P -> S).
Dirichlet conditions are eliminated: every solve works on the free DOFs only.
"""
from typing import Iterable, Optional, Tuple
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, cg

from data_models import TetMesh, MaterialModel, RegionLabels, Displacement, ForceField, AdjointState
from exceptions import ConfigurationError, NewtonConvergenceError, SingularSystemError, SolverError
from loggers import get_logger
from settings import SolverSettings
from mesh_processor import MeshProcessor

logger = get_logger(__name__)

IDENTITY = np.eye(3)


class ElasticityAssembler:
    """Element-level constitutive laws and global assembly"""

    @staticmethod
    def lame_parameters(material: MaterialModel) -> Tuple[float, float]:
        """(lambda, mu) from Young modulus and Poisson ratio"""
        e, nu = material.young_modulus, material.poisson_ratio
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        mu = e / (2.0 * (1.0 + nu))
        return lam, mu

    @staticmethod
    def shape_gradients(mesh: TetMesh) -> Tuple[np.ndarray, np.ndarray]:
        """reference gradients of the 4 hat functions per tet, (t, 4, 3), and volumes"""
        x = mesh.vertices[mesh.tets]
        edges = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=2)
        # rows of edges^-1 are grad N_1..N_3
        inverse = np.linalg.inv(edges)
        grads = np.concatenate([-inverse.sum(axis=1, keepdims=True), inverse], axis=1)
        return grads, np.linalg.det(edges) / 6.0

    @staticmethod
    def _element_kinematics(mesh: TetMesh, grads: np.ndarray, u: np.ndarray):
        u_elem = np.asarray(u, dtype=np.float64).reshape(-1, 3)[mesh.tets]
        return np.einsum("tai,taj->tij", u_elem, grads)

    @staticmethod
    def _stress(material: MaterialModel, displacement_gradient: np.ndarray):
        """(F, S, P) per element"""
        lam, mu = ElasticityAssembler.lame_parameters(material)
        h = displacement_gradient
        if material.is_linear:
            strain = 0.5 * (h + h.transpose(0, 2, 1))
            deformation = np.broadcast_to(IDENTITY, h.shape)
        else:
            deformation = IDENTITY + h
            strain = 0.5 * (np.einsum("tki,tkj->tij", deformation, deformation) - IDENTITY)
        trace = np.trace(strain, axis1=1, axis2=2)
        second_pk = lam * trace[:, None, None] * IDENTITY + 2.0 * mu * strain
        first_pk = second_pk if material.is_linear else np.einsum("tik,tkj->tij", deformation, second_pk)
        return deformation, strain, second_pk, first_pk

    @staticmethod
    def strain_energy(mesh: TetMesh, material: MaterialModel, u, grads=None, volumes=None) -> float:
        """sum over tets of V (lambda/2 tr(E)^2 + mu tr(E^2))"""
        if grads is None:
            grads, volumes = ElasticityAssembler.shape_gradients(mesh)
        lam, mu = ElasticityAssembler.lame_parameters(material)
        h = ElasticityAssembler._element_kinematics(mesh, grads, u)
        _, strain, _, _ = ElasticityAssembler._stress(material, h)
        trace = np.trace(strain, axis1=1, axis2=2)
        density = 0.5 * lam * trace ** 2 + mu * np.einsum("tij,tij->t", strain, strain)
        return float(np.dot(volumes, density))

    @staticmethod
    def residual(mesh: TetMesh, material: MaterialModel, u, grads=None, volumes=None) -> np.ndarray:
        """internal nodal forces F(u), (n, 3)"""
        if grads is None:
            grads, volumes = ElasticityAssembler.shape_gradients(mesh)
        h = ElasticityAssembler._element_kinematics(mesh, grads, u)
        _, _, _, first_pk = ElasticityAssembler._stress(material, h)
        element_forces = volumes[:, None, None] * np.einsum("tiJ,taJ->tai", first_pk, grads)
        forces = np.zeros((mesh.n_vertices, 3))
        np.add.at(forces, mesh.tets, element_forces)
        return forces

    @staticmethod
    def element_tangents(material: MaterialModel, grads: np.ndarray, volumes: np.ndarray,
                         displacement_gradient: Optional[np.ndarray] = None) -> np.ndarray:
        """12x12 element tangents, (t, 12, 12), DOF order (node, component)"""
        lam, mu = ElasticityAssembler.lame_parameters(material)
        n_tets = grads.shape[0]
        if material.is_linear or displacement_gradient is None:
            deformation = np.broadcast_to(IDENTITY, (n_tets, 3, 3))
            second_pk = np.zeros((n_tets, 3, 3))
        else:
            deformation, _, second_pk, _ = ElasticityAssembler._stress(material, displacement_gradient)

        f_grad = np.einsum("tij,taj->tai", deformation, grads)
        grad_dot = np.einsum("taj,tbj->tab", grads, grads)
        f_ft = np.einsum("tim,tkm->tik", deformation, deformation)
        geometric = np.einsum("taj,tjl,tbl->tab", grads, second_pk, grads)

        k = np.einsum("tab,ik->taibk", geometric, IDENTITY)
        k += lam * np.einsum("tai,tbk->taibk", f_grad, f_grad)
        k += mu * np.einsum("tab,tik->taibk", grad_dot, f_ft)
        k += mu * np.einsum("tbi,tak->taibk", f_grad, f_grad)
        k = volumes[:, None, None, None, None] * k
        k = k.reshape(n_tets, 12, 12)
        return 0.5 * (k + k.transpose(0, 2, 1))

    @staticmethod
    def assemble(mesh: TetMesh, element_matrices: np.ndarray) -> sp.csr_matrix:
        dofs = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        rows = np.broadcast_to(dofs[:, :, None], element_matrices.shape)
        cols = np.broadcast_to(dofs[:, None, :], element_matrices.shape)
        n_dofs = 3 * mesh.n_vertices
        return sp.coo_matrix(
            (element_matrices.ravel(), (rows.ravel(), cols.ravel())), shape=(n_dofs, n_dofs)
        ).tocsr()

    @staticmethod
    def tangent(mesh: TetMesh, material: MaterialModel, u=None, grads=None, volumes=None) -> sp.csr_matrix:
        """grad F(u); the constant stiffness K for the linear material"""
        if grads is None:
            grads, volumes = ElasticityAssembler.shape_gradients(mesh)
        h = None
        if not material.is_linear and u is not None:
            h = ElasticityAssembler._element_kinematics(mesh, grads, u)
        return ElasticityAssembler.assemble(
            mesh, ElasticityAssembler.element_tangents(material, grads, volumes, h))

    @staticmethod
    def traction_to_nodal_forces(mesh: TetMesh, triangle_ids: Iterable[int], traction,
                                 support: Optional[Iterable[int]] = None) -> ForceField:
        """uniform (or per-triangle) traction in Pa lumped as area/3 on triangle vertices"""
        ids = np.array(sorted(triangle_ids), dtype=np.int64)
        tris = mesh.boundary_tris[ids]
        areas = MeshProcessor.triangle_areas(mesh.vertices, tris)
        traction = np.broadcast_to(np.asarray(traction, dtype=np.float64), (ids.size, 3))
        values = np.zeros((mesh.n_vertices, 3))
        share = (areas[:, None] * traction) / 3.0
        for corner in range(3):
            np.add.at(values, tris[:, corner], share)
        if support is None:
            support = np.unique(tris)
        return ForceField(values, support)


class EquilibriumSolver:
    """Constrained direct and adjoint solves for one (mesh, material, labels)"""

    def __init__(self, mesh: TetMesh, material: MaterialModel, labels: RegionLabels,
                 settings: Optional[SolverSettings] = None):
        if not labels.fixed:
            raise ConfigurationError("The fixed vertex set is empty: the equilibrium problem is singular")
        self.mesh = mesh
        self.material = material
        self.labels = labels
        self.settings = settings or SolverSettings()

        fixed = labels.fixed_array()
        free = np.ones(3 * mesh.n_vertices, dtype=bool)
        free[(3 * fixed[:, None] + np.arange(3)).ravel()] = False
        self.free_dofs = np.flatnonzero(free)

        self.grads, self.volumes = ElasticityAssembler.shape_gradients(mesh)
        self._stiffness = None
        self._stiffness_solver = None

        # instrumentation
        self.direct_solves = 0
        self.adjoint_solves = 0
        self.factorizations = 0
        self.compliance_solves = 0
        self.last_newton_iterations = 0
        self._compliance = {}

    # -- assembly -----------------------------------------------------------

    def residual(self, u) -> np.ndarray:
        return ElasticityAssembler.residual(self.mesh, self.material, u, self.grads, self.volumes)

    def tangent(self, u=None) -> sp.csr_matrix:
        if self.material.is_linear:
            return self.stiffness()
        return ElasticityAssembler.tangent(self.mesh, self.material, u, self.grads, self.volumes)

    def stiffness(self) -> sp.csr_matrix:
        """small-strain stiffness K, assembled once"""
        if self._stiffness is None:
            linear = self.material if self.material.is_linear else MaterialModel(
                "linear", self.material.young_modulus, self.material.poisson_ratio)
            self._stiffness = ElasticityAssembler.tangent(self.mesh, linear, None, self.grads, self.volumes)
        return self._stiffness

    def reduce(self, matrix: sp.spmatrix) -> sp.csc_matrix:
        matrix = matrix.tocsr()[self.free_dofs]
        return matrix.tocsc()[:, self.free_dofs]

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        full = np.zeros(3 * self.mesh.n_vertices)
        full[self.free_dofs] = free_values
        return full.reshape(-1, 3)

    # -- linear algebra -----------------------------------------------------

    def _factorize(self, matrix: sp.csc_matrix):
        """solve callable: sparse LU below direct_max_dofs, Jacobi-preconditioned CG above"""
        self.factorizations += 1
        if matrix.shape[0] <= self.settings.direct_max_dofs:
            try:
                lu = splu(matrix, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as e:
                raise SingularSystemError(f"Sparse factorization failed: {e}") from e
            logger.debug(f"Factorized {matrix.shape[0]} free DOFs (nnz L+U = {lu.L.nnz + lu.U.nnz})")
            return lu.solve

        diagonal = matrix.diagonal()
        if np.any(diagonal <= 0.0):
            raise SingularSystemError("Non-positive diagonal entry in the reduced system")
        preconditioner = sp.diags(1.0 / diagonal)

        def solve(rhs: np.ndarray) -> np.ndarray:
            x, info = cg(matrix, rhs, rtol=self.settings.cg_rtol,
                         maxiter=self.settings.cg_max_iters, M=preconditioner)
            if info != 0:
                raise SolverError(f"Conjugate gradient did not converge (info={info})")
            return x

        logger.debug(f"Using conjugate gradients for {matrix.shape[0]} free DOFs")
        return solve

    def _solve_checked(self, solve, rhs: np.ndarray) -> np.ndarray:
        x = solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("Linear solve produced non-finite values")
        return x

    def stiffness_solver(self):
        """factorization of the reduced small-strain stiffness, reused across solves"""
        if self._stiffness_solver is None:
            self._stiffness_solver = self._factorize(self.reduce(self.stiffness()))
            logger.info(f"Factorized reduced stiffness ({self.free_dofs.size} free DOFs)")
        return self._stiffness_solver

    def compliance_columns(self, vertices) -> np.ndarray:
        """small-strain response to unit forces on the given vertices, shape (n_vertices, 3, 3k)

        Column 3i+d is the displacement field for a unit force along axis d at
        vertices[i]. Results are cached per vertex list.
        """
        vertices = np.asarray(vertices, dtype=np.int64)
        key = vertices.tobytes()
        if key not in self._compliance:
            dofs = (3 * vertices[:, None] + np.arange(3)).ravel()
            columns = np.searchsorted(self.free_dofs, dofs)
            columns = np.minimum(columns, self.free_dofs.size - 1)
            if not np.array_equal(self.free_dofs[columns], dofs):
                raise ConfigurationError("Compliance columns requested for a fixed vertex")
            rhs = np.zeros((self.free_dofs.size, dofs.size))
            rhs[columns, np.arange(dofs.size)] = 1.0
            solve = self.stiffness_solver()
            response = np.column_stack([self._solve_checked(solve, rhs[:, j]) for j in range(dofs.size)])
            self.compliance_solves += dofs.size
            full = np.zeros((3 * self.mesh.n_vertices, dofs.size))
            full[self.free_dofs] = response
            self._compliance[key] = full.reshape(self.mesh.n_vertices, 3, dofs.size)
            logger.debug(f"Computed {dofs.size} compliance columns")
        return self._compliance[key]

    # -- direct problem -----------------------------------------------------

    def solve_direct(self, b: ForceField, u0: Optional[Displacement] = None) -> Displacement:
        """u_b with F(u_b) = b on free DOFs and u_b = 0 on fixed DOFs"""
        self.direct_solves += 1
        if self.material.is_linear:
            rhs = b.flat[self.free_dofs]
            self.last_newton_iterations = 1
            return Displacement(self.expand(self._solve_checked(self.stiffness_solver(), rhs)))
        return self.newton_solve(b, u0)

    def newton_solve(self, b: ForceField, u0: Optional[Displacement] = None) -> Displacement:
        """Newton iterations on the reduced system with residual-halving line search"""
        settings = self.settings
        b_free = b.flat[self.free_dofs]
        tolerance = settings.newton_tol * (1.0 + np.linalg.norm(b_free))
        u = np.zeros(3 * self.mesh.n_vertices) if u0 is None else u0.flat.copy()
        u[np.setdiff1d(np.arange(u.size), self.free_dofs)] = 0.0

        def free_residual(values: np.ndarray) -> np.ndarray:
            return self.residual(values).reshape(-1)[self.free_dofs] - b_free

        r = free_residual(u)
        r_norm = np.linalg.norm(r)
        for iteration in range(settings.max_newton + 1):
            if r_norm <= tolerance:
                self.last_newton_iterations = iteration
                logger.debug(f"Newton converged in {iteration} iterations (|r| = {r_norm:.3e})")
                return Displacement(u.reshape(-1, 3))
            if iteration == settings.max_newton:
                break

            matrix = self.reduce(self.tangent(u.reshape(-1, 3)))
            step = -self._solve_checked(self._factorize(matrix), r)

            scale = 1.0
            trial = u.copy()
            for _ in range(settings.max_line_search_halvings + 1):
                trial[self.free_dofs] = u[self.free_dofs] + scale * step
                trial_r = free_residual(trial)
                trial_norm = np.linalg.norm(trial_r)
                if trial_norm <= r_norm:
                    break
                scale *= 0.5
            else:
                # no halving reduced the residual: u is left as it was
                raise NewtonConvergenceError(
                    f"Newton line search failed at iteration {iteration} (|r| = {r_norm:.3e})",
                    last_residual=float(r_norm), iterations=iteration)
            u, r, r_norm = trial, trial_r, trial_norm

        raise NewtonConvergenceError(
            f"Newton did not converge in {settings.max_newton} iterations (|r| = {r_norm:.3e})",
            last_residual=float(r_norm), iterations=settings.max_newton)

    # -- adjoint problem ----------------------------------------------------

    def adjoint_solve(self, u_b: Displacement, rhs: np.ndarray) -> AdjointState:
        """p_b solving grad F(u_b)^T p = rhs on free DOFs, zero on fixed DOFs"""
        self.adjoint_solves += 1
        rhs_free = np.asarray(rhs, dtype=np.float64).reshape(-1)[self.free_dofs]
        try:
            if self.material.is_linear:
                p_free = self._solve_checked(self.stiffness_solver(), rhs_free)
            else:
                matrix = self.reduce(self.tangent(u_b.values).T)
                p_free = self._solve_checked(self._factorize(matrix), rhs_free)
        except SingularSystemError as e:
            residual_norm = float(np.linalg.norm(self.residual(u_b.values).reshape(-1)[self.free_dofs]))
            raise SingularSystemError(
                f"Adjoint system is singular at u_b (|F(u_b)| = {residual_norm:.3e}): {e}",
                residual_norm=residual_norm) from e
        return AdjointState(self.expand(p_free))

    def adjoint_defect(self, u_b: Displacement, p: AdjointState, rhs: np.ndarray) -> float:
        """free-DOF norm of tangent^T p - rhs"""
        defect = self.tangent(u_b.values).T @ p.flat - np.asarray(rhs).reshape(-1)
        return float(np.linalg.norm(defect[self.free_dofs]))
