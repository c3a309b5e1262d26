"""Photo-sketch dense correspondence: encoder, warp estimator, benchmark and evaluation."""

__version__ = "0.1.0"
