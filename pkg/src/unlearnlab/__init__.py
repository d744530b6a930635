"""Machine-unlearning laboratory: a small autodiff core, desk-scale classifiers,
saliency-masked unlearning with baselines, and forgetting metrics."""

__version__ = "0.1.0"
