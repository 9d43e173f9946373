"""EMOS post-processing of wind speed ensembles with truncated-normal,
log-normal, regime-switching and TN-LN mixture predictive distributions."""

__version__ = "0.1.0"
