"""Degeneracy-aware LiDAR-inertial state estimation toolkit.

Front end: error-state iterated Kalman filtering over point-to-plane
registration with eigenanalysis-based localizability detection and
equality-constrained updates along degenerate directions.  Back end:
delay-tolerant sliding-window pose graph with graduated-non-convexity
robust kernels and Schur-complement marginalization.  Built-in sensor
simulators make every estimator claim testable at desk scale.
"""

__version__ = "0.1.0"
