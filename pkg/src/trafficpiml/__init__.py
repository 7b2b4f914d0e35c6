"""Physics-informed traffic state estimation toolkit.

Modules: ``diffengine`` (reverse-mode autodiff), ``networks`` (MLP surrogates),
``physics`` (LWR/ARZ residuals), ``datahub`` (simulation, sampling, IO),
``trainer`` (the ``TrafficPINN`` estimator and beta sweeps), ``diagnostics``
(gradient and landscape probes), ``bounds`` (CFL audit and error bounds) and
``cli``.
"""

__version__ = "0.1.0"
