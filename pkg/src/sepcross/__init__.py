"""Slow-variable dynamics across separatrix crossings.

Library layout:

* :mod:`sepcross.exprdsl` -- expression parser and symbolic derivatives;
* :mod:`sepcross.model` -- system catalog and field evaluation;
* :mod:`sepcross.portrait` -- saddle chart, separatrix loops, orbits;
* :mod:`sepcross.coeffs` -- separatrix expansion coefficients;
* :mod:`sepcross.averaging` -- first-order averaged dynamics;
* :mod:`sepcross.jump` -- closed-form crossing predictors;
* :mod:`sepcross.simulate` -- full integration, sweeps, Monte Carlo;
* :mod:`sepcross.cli` -- the ``sepcross`` command line tool.
"""

__version__ = "0.1.0"
