"""berglab: a numerical laboratory for Bergman projections on model domains.

Quasi-metric geometry, Bergman kernel estimates, Bekolle-Bonami weight
characteristics, maximal/regularizing operators, good-lambda experiments,
and necessity probes, all computable at desk scale on the unit disk, the
unit ball, egg domains, and products of disks.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    UnitDisk,
    UnitBall,
    EggDomain,
    ProductDisk,
    make_domain,
    QuasiBall,
    PolydiscFrame,
    GeometryCalibration,
    calibrate,
)
from .quadrature import QuadratureSpec, IntegralEstimate  # noqa: F401
