"""Partitioned coupled neural operator for pipeline networks.

Subpackages:

- ``gas_network``: topology, pipe physics, boundary schedules.
- ``transient_solver``: steady + implicit transient gas solver (data generator
  and ground-truth oracle).
- ``field_encoding``: multi-region input encodings, normalization, dataset files.
- ``autodiff``: minimal reverse-mode tensor tape (FFTs, spectral mixes,
  pointwise ops) and the Adam update.
- ``model``: the partitioned coupled operator and its baseline variants.
- ``losses``: data loss and the finite-difference physics loss stack.
- ``trainer``: training loop, relative-error metrics, evaluation.
- ``cli``: command-line pipeline (simulate / gen-data / train / eval / plots).
"""

__version__ = "0.1.0"
