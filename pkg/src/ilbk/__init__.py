"""Linear inelastic Boltzmann operator for test particles in a Maxwellian background.

Submodules are imported lazily so that ``ilbk.cli`` can set BLAS thread counts
before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "GasParameters": "ilbk.gas", "DerivedConstants": "ilbk.gas",
    "InvalidParameterError": "ilbk.gas", "Maxwellian": "ilbk.gas",
    "derive_constants": "ilbk.gas", "equilibrium_distribution": "ilbk.gas",
    "KernelContext": "ilbk.kernel", "kernel_K": "ilbk.kernel",
    "symmetrized_G": "ilbk.kernel", "sigma_closed_form": "ilbk.kernel",
    "calibrate": "ilbk.oracle",
    "build_grid": "ilbk.discretization", "build_radial_grid": "ilbk.discretization",
    "assemble_operator": "ilbk.discretization",
    "eigendecompose": "ilbk.spectral", "evolve_homogeneous": "ilbk.evolution",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(_EXPORTS[name]), name)
    raise AttributeError(f"module 'ilbk' has no attribute {name!r}")
