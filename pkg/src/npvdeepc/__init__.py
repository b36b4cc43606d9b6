"""Neural parameter-varying data-enabled predictive control.

Data-driven predictive control of a synthetic plasma-jet surrogate:
Hankel/behavioral machinery, a hypernetwork-modulated NARX predictor,
dense QP/SQP solvers, four receding-horizon controllers and a benchmark
harness for temperature tracking and thermal-dose delivery.
"""

__version__ = "0.1.0"
