"""Spin-property inference from single MR images by physics-guided reverse diffusion.

Subpackages: ``physics`` (signal models), ``phantom``, ``fitting`` (mSASHA
least squares), ``diffusion`` (schedule, score models, sampler),
``reverse`` (guided inversion), ``synthesis``, ``io``, ``metrics`` and
``cli``.
"""

__version__ = "0.1.0"
