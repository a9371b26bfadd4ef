"""Query gateway for secure multiparty computation over peers' sensor data."""

from .canonical import ProtocolError, SerializationError, canonical_serialize
from .model import (
    AccountabilityEntry,
    ComputationRequest,
    Eq,
    Grant,
    GrantRequest,
    In,
    Label,
    Predicate,
    PredicateSyntaxError,
    Preprocessor,
    Preselector,
    Query,
    build_label_superset,
    eval_predicate,
    parse_predicate,
    query_matches,
)
from .reasons import Failure, Reason

__version__ = "0.1.0"
