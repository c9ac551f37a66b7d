import json
from pathlib import Path
from typing import Any, Dict, List, Optional
from dataclasses import dataclass, asdict, field, fields, is_dataclass

from exceptions import ConfigurationError


@dataclass
class MeshSettings:
    """Mesh source and region labels"""
    path: Optional[str] = None
    # procedural phantom used when no path is given
    generator: str = "box"
    cells: List[int] = field(default_factory=lambda: [6, 6, 6])
    lengths: List[float] = field(default_factory=lambda: [0.1, 0.1, 0.1])
    semi_axes: List[float] = field(default_factory=lambda: [0.08, 0.06, 0.05])
    labels_path: Optional[str] = None
    # geometric selectors, used when no labels file is given
    matching: Dict[str, Any] = field(default_factory=lambda: {"type": "plane", "axis": 2, "side": "max"})
    loaded: Dict[str, Any] = field(default_factory=lambda: {"type": "plane", "axis": 2, "side": "max"})
    fixed: Dict[str, Any] = field(default_factory=lambda: {"type": "plane", "axis": 2, "side": "min"})


@dataclass
class MaterialSettings:
    kind: str = "linear"
    young_modulus: float = 1.0
    poisson_ratio: float = 0.4


@dataclass
class SolverSettings:
    """Equilibrium and adjoint solver parameters"""
    newton_tol: float = 1e-9
    max_newton: int = 50
    max_line_search_halvings: int = 30
    direct_max_dofs: int = 200_000
    cg_rtol: float = 1e-10
    cg_max_iters: int = 10_000


@dataclass
class OptimizerSettings:
    """L-BFGS over the control DOFs"""
    memory: int = 10
    max_iters: int = 200
    grad_rtol: float = 5e-4
    grad_atol: float = 1e-14
    armijo_c1: float = 1e-4
    max_line_search: int = 40
    initial_step: float = 1.0
    regularizer: str = "none"
    regularizer_weight: float = 0.0
    cap: Optional[float] = None
    restrict_to_matching: bool = True
    keep_memory: bool = True
    # initial inverse Hessian: "gauss_newton" or "none" (s.y/y.y scaling)
    preconditioner: str = "gauss_newton"
    preconditioner_damping: float = 1e-6
    preconditioner_max_controls: int = 1500


@dataclass
class IcpSettings:
    enabled: bool = True
    # "matching" aligns against the matching triangles, "boundary" against the whole rest boundary
    surface: str = "matching"
    max_iters: int = 100
    tol: float = 1e-10
    centroid_init: bool = False
    # transform.json from an earlier icp run; replaces ICP in register when set
    transform_path: Optional[str] = None


@dataclass
class CaseSettings:
    """Synthetic traction sequence (generator side)"""
    steps: int = 50
    step_displacement_target: float = 1e-3
    sample_count: int = 500
    seed: int = 0
    noise_sd: float = 0.0
    tool_center: Optional[List[float]] = None
    traction_direction: Optional[List[float]] = None
    visible: Optional[Dict[str, Any]] = None
    control_zone_size: int = 50


@dataclass
class AuditSettings:
    directions: int = 10
    rel_step: float = 1e-4
    tolerance: Optional[float] = None
    seed: int = 0


@dataclass
class ExperimentSettings:
    """One experiment: mesh, material, solver, optimizer, ICP, case and audit settings"""
    mesh: MeshSettings = field(default_factory=MeshSettings)
    recon_mesh: Optional[MeshSettings] = None
    material: MaterialSettings = field(default_factory=MaterialSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    icp: IcpSettings = field(default_factory=IcpSettings)
    case: CaseSettings = field(default_factory=CaseSettings)
    audit: AuditSettings = field(default_factory=AuditSettings)
    output_dir: str = "output"
    workers: int = 1
    log_level: str = "INFO"


SECTION_TYPES = {
    "mesh": MeshSettings,
    "recon_mesh": MeshSettings,
    "material": MaterialSettings,
    "solver": SolverSettings,
    "optimizer": OptimizerSettings,
    "icp": IcpSettings,
    "case": CaseSettings,
    "audit": AuditSettings,
}


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"Unknown keys in '{where}': {', '.join(unknown)}")
    return cls(**data)


def settings_from_dict(data: Dict[str, Any]) -> ExperimentSettings:
    """Strict conversion of a config mapping; unknown keys are errors"""
    data = dict(data)
    sections = {}
    for name, cls in SECTION_TYPES.items():
        if name in data:
            value = data.pop(name)
            sections[name] = None if value is None else _build(cls, value, name)
    settings = _build(ExperimentSettings, data, "<root>")
    for name, value in sections.items():
        setattr(settings, name, value)
    return settings


def parse_override(text: str):
    """'section.key=value' with value parsed as JSON when possible"""
    if "=" not in text:
        raise ConfigurationError(f"Override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class SettingsManager:
    """Manages experiment configuration files"""

    def __init__(self, config_path: Optional[Path] = None):
        self.settings_file = Path(config_path) if config_path else None
        self.settings = self.load_settings()

    def load_settings(self) -> ExperimentSettings:
        """Load settings from file or create defaults"""
        if self.settings_file is None:
            return ExperimentSettings()
        if not self.settings_file.exists():
            raise ConfigurationError(f"Config file not found: {self.settings_file}")
        try:
            with open(self.settings_file, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file is not valid JSON: {e}") from e
        except TypeError as e:
            raise ConfigurationError(f"Invalid config values: {e}") from e
        return settings_from_dict(data)

    def save_settings(self, path: Optional[Path] = None):
        """Save current settings to file"""
        target = Path(path) if path else self.settings_file
        if target is None:
            raise ConfigurationError("No config path to save to")
        with open(target, 'w') as f:
            json.dump(asdict(self.settings), f, indent=2, sort_keys=True)

    def get(self, key: str, default=None):
        """Get setting value by dotted key"""
        target = self.settings
        for part in key.split("."):
            if not hasattr(target, part):
                return default
            target = getattr(target, part)
        return target

    def set(self, key: str, value: Any):
        """Set setting value by dotted key"""
        parts = key.split(".")
        target = self.settings
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise ConfigurationError(f"Unknown config section: {part}")
            child = getattr(target, part)
            if child is None and part in SECTION_TYPES:
                child = SECTION_TYPES[part]()
                setattr(target, part, child)
            target = child
        if not is_dataclass(target) or not hasattr(target, parts[-1]):
            raise ConfigurationError(f"Unknown config key: {key}")
        setattr(target, parts[-1], value)

    def apply_overrides(self, overrides: Dict[str, Any]):
        """CLI flags win over config keys; None means 'not given'"""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
