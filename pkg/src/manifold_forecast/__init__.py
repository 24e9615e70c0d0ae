"""Forecasting high-dimensional time series by embedding, reduced-order modelling and lifting.

Submodules
----------
synthdata
    Synthetic five-dimensional benchmark generators and the panel type.
embedding
    Diffusion maps, locally linear embedding and PCA.
models
    MVAR and Gaussian-process one-step models, iterated forecasting.
lifting
    Radial-power RBF and geometric-harmonics lifting, Nystrom restriction.
pipeline
    Embed-forecast-lift runs and Monte-Carlo RMSE tables.
forex
    Carry-adjusted FX returns and the rolling risk-parity backtest.
"""

__version__ = "0.1.0"
