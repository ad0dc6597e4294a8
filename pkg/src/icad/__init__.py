"""In-context anomaly detection for tabular data.

A small transformer is pretrained on synthetic anomaly-detection episodes and
then scores real tables in a single forward pass, with no per-dataset fitting.
Classical baselines (kNN distance, PCA residual, isolation forest) and a
benchmark harness live alongside it for comparison.
"""

__version__ = "0.1.0"
