"""geoflow: variational geometric-flow toolkit.

Three energy-variation models built on a shared numerical substrate:

* solvation   -- diffuse-interface solvation free energy (generalized
                 Poisson-Boltzmann equation coupled to a Laplace-Beltrami
                 gradient flow of the surface function)
* patterns    -- geodesic-curvature driven lipid microdomain formation on
                 closed triangulated surfaces
* localization -- curvature-driven drift-diffusion of membrane proteins on
                 a fixed phase-field membrane
"""

__version__ = "0.1.0"

from .errors import ConfigError, GeoflowError, GridError, MeshError, NumericalError

__all__ = [
    "ConfigError",
    "GeoflowError",
    "GridError",
    "MeshError",
    "NumericalError",
    "__version__",
]
