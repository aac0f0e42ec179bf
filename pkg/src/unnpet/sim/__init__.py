"""Synthetic multi-count-level PET data."""
from .dataset import SimConfig, build_dataset, simulate_subject, subject_spec
from .phantom import Ellipsoid, PhantomError, PhantomSpec, Sphere, generate_phantom, torso_template
from .projector import GeometryError, ParallelBeamProjector, Sinogram, forward_project, get_projector
from .recon import ReconConfig, fwhm_to_sigma_voxels, gaussian_postfilter, osem_reconstruct, poisson_sample, thin_counts

__all__ = [
    "Ellipsoid",
    "GeometryError",
    "ParallelBeamProjector",
    "PhantomError",
    "PhantomSpec",
    "ReconConfig",
    "SimConfig",
    "Sinogram",
    "Sphere",
    "build_dataset",
    "forward_project",
    "fwhm_to_sigma_voxels",
    "gaussian_postfilter",
    "generate_phantom",
    "get_projector",
    "osem_reconstruct",
    "poisson_sample",
    "simulate_subject",
    "subject_spec",
    "thin_counts",
    "torso_template",
]
