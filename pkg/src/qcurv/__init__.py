"""qcurv: numerical laboratory for Q curvature, Paneitz operators, and
Green's-function kernel algebra on closed Riemannian manifolds."""

__version__ = "0.1.0"
