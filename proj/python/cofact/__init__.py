"""Python access to the cofact C++ core.

Probability matrices are numpy arrays of shape (n, 5); class order follows
CLASS_NAMES.
"""
import json

from . import _cofact
from ._cofact import (
    CLASS_NAMES,
    FEATURE_WIDTH,
    CofactError,
    blend,
    evaluate,
    f1_report,
    normalize_text,
    raw_features,
    synthesize,
    train,
    tune,
)


def default_config():
    """Default run configuration as a dict."""
    return json.loads(_cofact.default_config())


__all__ = [
    "CLASS_NAMES",
    "FEATURE_WIDTH",
    "CofactError",
    "blend",
    "default_config",
    "evaluate",
    "f1_report",
    "normalize_text",
    "raw_features",
    "synthesize",
    "train",
    "tune",
]
