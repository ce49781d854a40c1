"""Conditional generative models of locations on the sphere.

Diffusion and flow-matching vector fields, iterative samplers, exact
log-densities through the divergence ODE, closed-form vMF baselines and
geolocation metrics.
"""

from .errors import (GeoflowError, InputError, NumericError, ParseError, SingularityError,
                     StiffnessError, UnderConcentrationError)

__version__ = "0.1.0"
