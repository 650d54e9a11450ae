"""C1-conforming virtual elements for Cahn-Hilliard type problems on polygonal meshes."""

from .polymesh import PolyMesh, make_mesh, make_quad_mesh, make_tri_mesh, make_cvt_mesh
from .c1space import LocalSpace, interpolate

__version__ = "0.1.0"

__all__ = [
    "PolyMesh",
    "make_mesh",
    "make_quad_mesh",
    "make_tri_mesh",
    "make_cvt_mesh",
    "LocalSpace",
    "interpolate",
]
