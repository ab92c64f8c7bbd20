"""Non-parallel many-to-many voice conversion with a single conditional generator.

Modules: ``ndgrad`` (autodiff engine), ``dsp`` (analysis and resynthesis),
``models``, ``losses``, ``pipeline`` (data and training), ``convert``
(conversion and evaluation), ``cli``. ``StarGANVC`` is a scikit-learn style
facade over training and conversion.
"""
from .estimator import StarGANVC, check_sequence, check_sequences

__version__ = "0.1.0"

__all__ = ["StarGANVC", "check_sequence", "check_sequences", "__version__"]
