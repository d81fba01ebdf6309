"""Cross-domain transfer for multivariate time-series forecasting via
contrastive seasonal/trend feature decomposition and per-component
distribution adaptation."""

__version__ = "0.1.0"
