"""Functional autoencoder clustering of multivariate functional data.

Modules
-------
fdata      basis systems, smoothing, functional datasets
metrics    Hilbert, elastic (SRV) and DTW distances; kNN similarity graphs
network    functional autoencoder with analytic gradients
cvxclust   convex clustering homotopy and partition selection
pipeline   alternating train / cluster loop, AMI and ARI
datagen    simulated manifold-valued datasets and random time warps
cli        ``faeclust`` command line tool
"""

__version__ = "0.1.0"
