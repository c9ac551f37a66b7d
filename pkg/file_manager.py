from pathlib import Path
from typing import List, Dict, Optional

from data_models import TetMesh, PointCloud, RegionLabels, Displacement
from format_handlers import FormatFactory
from validators import DataValidator
from exceptions import DataFormatError, FileAccessError


class FileManager:
    """Handles file I/O for meshes, point clouds and region labels"""

    # Supported formats
    MESH_EXTENSIONS = {'.tet', '.vtk'}
    CLOUD_EXTENSIONS = {'.xyz', '.ply'}
    LABEL_EXTENSIONS = {'.json'}

    _factory = FormatFactory()

    @classmethod
    def detect_file_type(cls, file_path: Path) -> str:
        """Detect if file is a mesh, a point cloud or a labels sidecar"""
        suffix = Path(file_path).suffix.lower()

        if suffix in cls.MESH_EXTENSIONS:
            return 'mesh'
        elif suffix in cls.CLOUD_EXTENSIONS:
            return 'cloud'
        elif suffix in cls.LABEL_EXTENSIONS:
            return 'labels'
        else:
            raise DataFormatError(f"Unsupported file format: {suffix}")

    @classmethod
    def validate_file_access(cls, file_path: Path) -> bool:
        """Validate file exists and is accessible"""
        if not file_path.exists():
            raise FileAccessError(f"File not found: {file_path}")

        if not file_path.is_file():
            raise FileAccessError(f"Path is not a file: {file_path}")

        try:
            file_path.open('rb').close()
        except PermissionError:
            raise FileAccessError(f"Permission denied: {file_path}")

        return True

    @classmethod
    def _read(cls, file_path, expected: str):
        file_path = Path(file_path)
        cls.validate_file_access(file_path)
        file_type = cls.detect_file_type(file_path)
        if file_type != expected:
            raise DataFormatError(f"{file_path.name} is a {file_type} file, expected a {expected} file")
        return cls._factory.get_handler(file_path).read(file_path)

    @classmethod
    def load_mesh(cls, file_path) -> TetMesh:
        return cls._read(file_path, 'mesh')

    @classmethod
    def load_cloud(cls, file_path) -> PointCloud:
        return cls._read(file_path, 'cloud')

    @classmethod
    def load_labels(cls, file_path, mesh: Optional[TetMesh] = None) -> RegionLabels:
        """Load labels, validated against the mesh when one is given"""
        labels = cls._read(file_path, 'labels')
        if mesh is not None:
            DataValidator.validate_labels(mesh, labels)
        return labels

    @classmethod
    def _write(cls, data, file_path, expected: str, **kwargs) -> Path:
        file_path = Path(file_path)
        if cls.detect_file_type(file_path) != expected:
            raise DataFormatError(f"Cannot write a {expected} to {file_path.name}")
        DataValidator.validate_output_path(file_path)
        cls._factory.get_handler(file_path).write(data, file_path, **kwargs)
        return file_path

    @classmethod
    def save_mesh(cls, mesh: TetMesh, file_path, displacement: Optional[Displacement] = None) -> Path:
        """Write a mesh, deformed by the displacement when given"""
        return cls._write(mesh, file_path, 'mesh', displacement=displacement)

    @classmethod
    def save_cloud(cls, cloud: PointCloud, file_path) -> Path:
        return cls._write(cloud, file_path, 'cloud')

    @classmethod
    def save_labels(cls, labels: RegionLabels, file_path) -> Path:
        return cls._write(labels, file_path, 'labels')

    @classmethod
    def get_supported_formats(cls) -> Dict[str, List[str]]:
        """Get list of supported file formats"""
        return {
            'mesh': sorted(cls.MESH_EXTENSIONS),
            'cloud': sorted(cls.CLOUD_EXTENSIONS),
            'labels': sorted(cls.LABEL_EXTENSIONS),
        }
