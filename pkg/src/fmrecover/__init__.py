"""Point-wise map recovery from functional maps between triangle meshes."""

from .evaluation import ErrorCurve, evaluate_map, rank_sweep
from .fmap import FunctionalMap, PointMap, fmap_from_constraints, fmap_from_pointmap, perturb_fmap
from .mesh import TriangleMesh, load_mesh, save_mesh
from .probabilistic import recover_probabilistic
from .recovery import embed, recover_balanced_nn, recover_lap_oracle, recover_max, recover_nn
from .refine import RefinementConfig, refine_loop
from .spectral import SpectralBasis, build_laplacian, compute_basis, mesh_basis

__version__ = "0.1.0"

__all__ = [
    "ErrorCurve",
    "FunctionalMap",
    "PointMap",
    "RefinementConfig",
    "SpectralBasis",
    "TriangleMesh",
    "build_laplacian",
    "compute_basis",
    "embed",
    "evaluate_map",
    "fmap_from_constraints",
    "fmap_from_pointmap",
    "load_mesh",
    "mesh_basis",
    "perturb_fmap",
    "rank_sweep",
    "recover_balanced_nn",
    "recover_lap_oracle",
    "recover_max",
    "recover_nn",
    "recover_probabilistic",
    "refine_loop",
    "save_mesh",
]
