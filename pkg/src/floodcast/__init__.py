"""Operational-style flood forecasting at desk scale.

Stage forecasting (ridge regression and an encoder/decoder LSTM with a
mixture output), per-pixel inundation models, evaluation tooling, alerting
and a synthetic data generator, tied together by the ``floodcast`` CLI.
"""

__version__ = "0.1.0"
