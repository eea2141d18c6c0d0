"""Attribute a change in a data distribution to changes in individual causal mechanisms."""

__version__ = "0.1.0"

from mechshift.attribution import (  # noqa: E402
    AttributionConfig,
    AttributionReport,
    Functional,
    attribute_joint,
    attribute_marginal,
    bootstrap_intervals,
    estimate_functional,
)
from mechshift.detect import detect_changes  # noqa: E402
from mechshift.graph import Dag, NodeSpec, parse_graph_file, validate_dag  # noqa: E402
from mechshift.tabular import Table, load_csv  # noqa: E402

__all__ = [
    "AttributionConfig",
    "AttributionReport",
    "Dag",
    "Functional",
    "NodeSpec",
    "Table",
    "attribute_joint",
    "attribute_marginal",
    "bootstrap_intervals",
    "detect_changes",
    "estimate_functional",
    "load_csv",
    "parse_graph_file",
    "validate_dag",
]
