from setuptools import setup
from pathlib import Path

# Read the README file
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

setup(
    name="mesh-registration",
    version="1.0.0",
    description="Optimal-control registration of tetrahedral elastic models onto point clouds, with force estimation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "data_models",
        "elasticity_solver",
        "exceptions",
        "experiment_runner",
        "file_manager",
        "format_handlers",
        "loggers",
        "main",
        "mesh_processor",
        "optimal_control",
        "result_viewer",
        "rigid_alignment",
        "settings",
        "surface_projection",
        "validators",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.21.0",
        "scipy>=1.12.0",
        "meshio>=5.3.0",
        "pandas>=1.5.0",
        "matplotlib>=3.6.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "mesh-registration=main:main",
        ],
    },
    include_package_data=True,
    package_data={
        "": ["*.json", "*.txt", "*.md"],
    },
)
