"""One-year-ahead bank capital adequacy projection under macro scenarios.

Three frameworks share one data pipeline: a constant balance sheet, Bayesian
model averaging satellites and multivariate (optionally variational / LWTA)
neural networks.
"""

__version__ = "0.1.0"
