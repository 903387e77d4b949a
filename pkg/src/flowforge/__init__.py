"""Desk-scale reference implementation of a multi-stage image-editing training pipeline.

Data plumbing (manifests, aspect-ratio buckets, reference collation), timestep
sampling, preference and reward objectives, and a numpy toy trainer that runs
the whole recipe on a 2-D Gaussian mixture.
"""

__version__ = "0.1.0"
