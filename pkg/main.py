import sys
import argparse
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional
import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from settings import SettingsManager, ExperimentSettings, parse_override
from loggers import RegistrationLogger
from data_models import Displacement, ForceField
from mesh_processor import MeshProcessor
from rigid_alignment import RigidAligner
from file_manager import FileManager
from experiment_runner import (ExperimentBuilder, SyntheticCaseGenerator, OutputBundle, control_zone,
                               estimate_sequence, register, audit_gradient, load_case, run_jobs,
                               icp_triangles)
from exceptions import (RegistrationError, ConfigurationError, DataFormatError, FileAccessError,
                        InvalidArgumentError, InvalidMeshError, SolverError, DegenerateConfigurationError,
                        ConsistencyError, GradientAuditError)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIGURATION = 2
EXIT_SOLVER = 3
EXIT_AUDIT = 4

EXIT_CODES = [
    (GradientAuditError, EXIT_AUDIT),
    ((SolverError, DegenerateConfigurationError, ConsistencyError), EXIT_SOLVER),
    ((ConfigurationError, DataFormatError, FileAccessError, InvalidArgumentError, InvalidMeshError),
     EXIT_CONFIGURATION),
]


def exit_code_for(error: BaseException) -> int:
    for types, code in EXIT_CODES:
        if isinstance(error, types):
            return code
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mesh-registration",
        description="Elastic registration of a tetrahedral model onto a point cloud, with force estimation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. optimizer.max_iters=50")
    common.add_argument("--output-dir", help="output directory")
    common.add_argument("--log-level", help="file log level")
    common.add_argument("--workers", type=int, help="worker processes for multi-input runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log INFO to the console")

    sub = parser.add_subparsers(dest="command", required=True)

    gen_mesh = sub.add_parser("gen-mesh", parents=[common], help="generate a phantom mesh and its labels")
    gen_mesh.add_argument("--generator", choices=["box", "ellipsoid"])
    gen_mesh.add_argument("--cells", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    gen_mesh.add_argument("--lengths", type=float, nargs=3, metavar=("LX", "LY", "LZ"))
    gen_mesh.add_argument("--out", type=Path, required=True, help="mesh file (.tet or .vtk)")
    gen_mesh.add_argument("--labels-out", type=Path, help="labels sidecar (default: <out>.labels.json)")

    gen_case = sub.add_parser("gen-case", parents=[common], help="generate a synthetic traction sequence")
    gen_case.add_argument("--steps", type=int)
    gen_case.add_argument("--seed", type=int)
    gen_case.add_argument("--noise-sd", type=float)
    gen_case.add_argument("--sample-count", type=int)
    gen_case.add_argument("--out", type=Path, help="case directory (default: <output-dir>/case)")

    icp = sub.add_parser("icp", parents=[common], help="rigidly align the mesh onto a cloud")
    icp.add_argument("--mesh", help="mesh file (overrides mesh.path)")
    icp.add_argument("--cloud", type=Path, required=True)
    icp.add_argument("--max-iters", type=int)
    icp.add_argument("--tol", type=float)
    icp.add_argument("--labels", help="labels file (overrides mesh.labels_path)")
    icp.add_argument("--surface", choices=["matching", "boundary"], help="surface the cloud is aligned against")

    reg = sub.add_parser("register", parents=[common], help="rigid then elastic registration")
    reg.add_argument("--mesh", help="mesh file (overrides mesh.path)")
    reg.add_argument("--labels", help="labels file (overrides mesh.labels_path)")
    reg.add_argument("--cloud", type=Path, nargs="+", required=True)
    reg.add_argument("--max-iters", type=int)
    reg.add_argument("--transform", help="transform.json from an earlier icp run (skips ICP)")
    reg.add_argument("--plot", action="store_true", help="write optimization history figures")

    seq = sub.add_parser("estimate-seq", parents=[common], help="estimate forces along synthetic cases")
    seq.add_argument("--case", type=Path, nargs="+", required=True, help="case directories from gen-case")
    seq.add_argument("--grad-rtol", type=float)
    seq.add_argument("--plot", action="store_true", help="write force/error figures")

    grad = sub.add_parser("check-grad", parents=[common], help="finite-difference audit of the adjoint gradient")
    grad.add_argument("--cloud", type=Path, help="cloud to audit against (default: synthetic)")
    grad.add_argument("--directions", type=int)
    grad.add_argument("--rel-step", type=float)
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags mapped onto config keys; None means 'not given'"""
    flags = {
        "output_dir": "output_dir", "log_level": "log_level", "workers": "workers",
        "generator": "mesh.generator", "cells": "mesh.cells", "lengths": "mesh.lengths",
        "steps": "case.steps", "seed": "case.seed", "noise_sd": "case.noise_sd",
        "sample_count": "case.sample_count", "mesh": "mesh.path", "labels": "mesh.labels_path",
        "grad_rtol": "optimizer.grad_rtol", "directions": "audit.directions", "rel_step": "audit.rel_step",
    }
    overrides = {key: getattr(args, attr, None) for attr, key in flags.items()}
    if args.command == "icp":
        overrides["icp.max_iters"] = getattr(args, "max_iters", None)
        overrides["icp.tol"] = getattr(args, "tol", None)
        overrides["icp.surface"] = getattr(args, "surface", None)
    elif args.command == "register":
        overrides["optimizer.max_iters"] = getattr(args, "max_iters", None)
        overrides["icp.transform_path"] = getattr(args, "transform", None)
    return overrides


def _register_cloud(job) -> Dict[str, Any]:
    """one registration bundle; runs in a worker process"""
    settings, cloud_path, directory, plot = job
    mesh = ExperimentBuilder.build_mesh(settings.mesh)
    labels = ExperimentBuilder.build_labels(mesh, settings.mesh)
    material = ExperimentBuilder.build_material(settings.material)
    cloud = FileManager.load_cloud(cloud_path)

    result = register(mesh, material, labels, cloud, settings)
    bundle = OutputBundle(directory)
    bundle.write_transform(result.transform)
    bundle.write_report(result.report)
    bundle.write_json("icp.json", {"mse_history": result.icp_history})
    bundle.write_forces(result.forces)
    # deformed mesh in the cloud frame: T(X + u) = R X + t + R u
    rotation = result.transform.rotation
    bundle.write_mesh(mesh.transformed(result.transform), "deformed.vtk",
                      Displacement(result.displacement.values @ rotation.T))
    if plot:
        bundle.write_plot(lambda viewer: viewer.plot_optimization(result.report), "history.png")
    bundle.write_timings()
    return {"cloud": str(cloud_path), "output": str(directory), "converged": result.report.converged,
            "final_functional": result.report.final_functional}


def _estimate_case(job) -> Dict[str, Any]:
    """one estimation bundle; runs in a worker process"""
    settings, case_dir, directory, plot = job
    case = load_case(case_dir)
    recon_settings = settings.recon_mesh or settings.mesh
    recon_mesh = ExperimentBuilder.build_mesh(recon_settings)
    labels = ExperimentBuilder.build_labels(recon_mesh, recon_settings)
    material = ExperimentBuilder.build_material(settings.material)
    zone = control_zone(recon_mesh, labels, case.tool_center(), settings.case.control_zone_size)

    reports = []
    records = estimate_sequence(case, recon_mesh, material, labels, zone, settings, reports)
    bundle = OutputBundle(directory)
    bundle.write_records(records)
    errors = [r.relative_error for r in records if np.isfinite(r.relative_error)]
    summary = {
        "steps": len(records),
        "control_zone": zone.tolist(),
        "mean_relative_error": float(np.mean(errors)) if errors else None,
        "mean_evaluations": float(np.mean([r.evaluations for r in records])),
        "warnings": int(sum(r.warning for r in records)),
    }
    bundle.write_json("summary.json", summary)
    bundle.timings["total_update_time"] = float(sum(r.update_time for r in records))
    if plot:
        bundle.write_plot(lambda viewer: viewer.plot_sequence(records), "sequence.png")
    bundle.write_timings()
    return {"case": str(case_dir), "output": str(directory), **summary}


class MeshRegistrationApp:
    """Command-line application"""

    def __init__(self, argv: Optional[List[str]] = None):
        self.args = build_parser().parse_args(argv)
        self.logger = None
        self.settings: ExperimentSettings = None

    def load_settings(self):
        manager = SettingsManager(self.args.config)
        manager.apply_overrides(_flag_overrides(self.args))
        manager.apply_overrides(dict(parse_override(text) for text in self.args.overrides))
        self.settings = manager.settings

    def setup_logging(self):
        self.logger = RegistrationLogger(level=self.settings.log_level,
                                         console_level="INFO" if self.args.verbose else "WARNING")

    def build_model(self, mesh_settings=None):
        mesh_settings = mesh_settings or self.settings.mesh
        mesh = ExperimentBuilder.build_mesh(mesh_settings)
        labels = ExperimentBuilder.build_labels(mesh, mesh_settings)
        material = ExperimentBuilder.build_material(self.settings.material)
        return mesh, labels, material

    def synthetic_case(self, mesh, material, labels, steps: int):
        settings = self.settings
        center = ExperimentBuilder.tool_center(mesh, labels, settings)
        tool = MeshProcessor.adjacent_pair_near(mesh, center, ExperimentBuilder.tool_candidates(mesh, labels))
        visible = (MeshProcessor.selector_from_config(mesh, settings.case.visible)
                   if settings.case.visible else None)
        return SyntheticCaseGenerator.generate_case(
            mesh, material, labels, tool, steps, settings.case.step_displacement_target,
            settings.case.sample_count, settings.case.seed, settings.case.noise_sd,
            settings.case.traction_direction, visible, settings.solver)

    # -- subcommands --------------------------------------------------------

    def cmd_gen_mesh(self) -> int:
        mesh, labels, _ = self.build_model()
        out = FileManager.save_mesh(mesh, self.args.out)
        labels_out = self.args.labels_out or out.with_name(out.stem + ".labels.json")
        FileManager.save_labels(labels, labels_out)
        print(f"{mesh}: {mesh.n_boundary_tris} boundary triangles -> {out}, {labels_out}")
        return EXIT_OK

    def cmd_gen_case(self) -> int:
        mesh, labels, material = self.build_model()
        case = self.synthetic_case(mesh, material, labels, self.settings.case.steps)
        out = self.args.out or Path(self.settings.output_dir) / "case"
        OutputBundle(out).write_case(case)
        print(f"{case.steps}-step case on triangles {case.tool_triangles} -> {out}")
        return EXIT_OK

    def cmd_icp(self) -> int:
        mesh = ExperimentBuilder.build_mesh(self.settings.mesh)
        cloud = FileManager.load_cloud(self.args.cloud)
        icp = self.settings.icp
        triangles = None
        if icp.surface != "boundary":
            triangles = icp_triangles(ExperimentBuilder.build_labels(mesh, self.settings.mesh), icp)
        transform, history = RigidAligner.icp_align(mesh, cloud, icp.max_iters, icp.tol, icp.centroid_init,
                                                    triangles)
        bundle = OutputBundle(Path(self.settings.output_dir))
        bundle.write_json("icp.json", {"mse_history": history})
        print(f"rotation {np.degrees(transform.rotation_angle()):.4f} deg -> {bundle.write_transform(transform)}")
        return EXIT_OK

    def cmd_register(self) -> int:
        root = Path(self.settings.output_dir)
        clouds = self.args.cloud
        jobs = [(self.settings, cloud, root / cloud.stem if len(clouds) > 1 else root, self.args.plot)
                for cloud in clouds]
        for summary in run_jobs(_register_cloud, jobs, self.settings.workers):
            print(f"{summary['cloud']}: J = {summary['final_functional']:.6e} -> {summary['output']}")
        return EXIT_OK

    def cmd_estimate_seq(self) -> int:
        root = Path(self.settings.output_dir)
        cases = self.args.case
        jobs = [(self.settings, case, root / case.name if len(cases) > 1 else root, self.args.plot)
                for case in cases]
        for summary in run_jobs(_estimate_case, jobs, self.settings.workers):
            error = summary["mean_relative_error"]
            error_text = "n/a" if error is None else f"{error:.2%}"
            print(f"{summary['case']}: mean relative error {error_text}, "
                  f"{summary['mean_evaluations']:.1f} evaluations/update -> {summary['output']}")
        return EXIT_OK

    def cmd_check_grad(self) -> int:
        mesh, labels, material = self.build_model()
        case = self.synthetic_case(mesh, material, labels, steps=1)
        cloud = FileManager.load_cloud(self.args.cloud) if self.args.cloud else case.clouds[0]
        problem = ExperimentBuilder.build_problem(mesh, material, labels, cloud, self.settings)

        # audit away from the optimum: half the generating force on the control support
        values = np.zeros((mesh.n_vertices, 3))
        values[problem.support] = 0.5 * case.nodal_forces[0].values[problem.support]
        b = ForceField(values, problem.support)

        bundle = OutputBundle(Path(self.settings.output_dir))
        try:
            result = audit_gradient(problem, b, self.settings.audit)
        except GradientAuditError as e:
            bundle.write_json("audit.json", {"errors": e.errors, "passed": False})
            raise
        bundle.write_json("audit.json", result)
        print(f"gradient audit passed: max relative error {result['max_error']:.3e} "
              f"(tolerance {result['tolerance']:.1e})")
        return EXIT_OK

    def run(self) -> int:
        """Run the selected subcommand"""
        try:
            self.load_settings()
            self.setup_logging()
            self.logger.info(f"Running {self.args.command}")
            handler = getattr(self, "cmd_" + self.args.command.replace("-", "_"))
            return handler()
        except RegistrationError as e:
            code = exit_code_for(e)
            if self.logger:
                self.logger.error(f"{type(e).__name__}: {e}")
            print(f"error: {e}", file=sys.stderr)
            return code
        except Exception as e:
            error_msg = "".join(traceback.format_exception(type(e), e, e.__traceback__))
            if self.logger:
                self.logger.error(f"Unhandled exception: {error_msg}")
            print(f"unexpected error: {e}", file=sys.stderr)
            return EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    return MeshRegistrationApp(argv).run()


if __name__ == "__main__":
    sys.exit(main())
