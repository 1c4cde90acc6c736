"""Input validation helpers used by the estimators and the CLI."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

from .errors import EmptyCorpus, LabelMismatch, MissingTarget
from .graph import CSG, LinkLabels


@dataclass(frozen=True, eq=False)
class LinkSample:
    """One CSG with exactly one target node plus its ground-truth labels."""

    graph: CSG
    labels: LinkLabels
    scene_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def target(self):
        return self.graph.nodes[check_single_target(self.graph)]


def check_single_target(g: CSG) -> int:
    targets = g.target_indices
    if len(targets) != 1:
        raise MissingTarget(f"graph must carry exactly one target node, found {len(targets)}")
    return targets[0]


def check_labels(g: CSG, labels: LinkLabels) -> None:
    t = g.nodes[check_single_target(g)].node_id
    for k in g.non_target_indices:
        if (t, g.nodes[k].node_id) not in labels:
            raise LabelMismatch(f"no label for pair ({t!r}, {g.nodes[k].node_id!r})")


def check_link_corpus(X, y=None, require_labels: bool = True) -> list[LinkSample]:
    """Normalise ``X``/``y`` into a non-empty list of :class:`LinkSample`.

    ``X`` may hold samples already, or bare graphs paired with ``y``.
    """
    X = list(X) if X is not None else []
    if not X:
        raise EmptyCorpus("corpus is empty")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise LabelMismatch(f"{len(X)} graphs but {len(y)} label sets")
    out = []
    for k, item in enumerate(X):
        if isinstance(item, LinkSample):
            sample = item if y is None else LinkSample(item.graph, y[k], item.scene_id, item.meta)
        elif isinstance(item, CSG):
            labels = y[k] if y is not None else {}
            sample = LinkSample(item, labels, scene_id=str(k))
        else:
            raise TypeError(f"corpus item {k} is {type(item).__name__}, expected CSG or LinkSample")
        check_single_target(sample.graph)
        if require_labels:
            check_labels(sample.graph, sample.labels)
        out.append(sample)
    return out


def check_probability(value: float, name: str, open_interval: bool = True) -> float:
    value = float(value)
    ok = 0 < value < 1 if open_interval else 0 <= value <= 1
    if not ok or math.isnan(value):
        raise ValueError(f"{name} must lie in {'(0, 1)' if open_interval else '[0, 1]'}, got {value}")
    return value


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0 or not math.isfinite(value):
        raise ValueError(f"{name} must be > 0, got {value}")
    return value


def check_weights(alpha: float, beta: float, tol: float = 1e-9) -> tuple[float, float]:
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > tol:
        raise ValueError(f"alpha and beta must be non-negative and sum to 1 (got {alpha} + {beta})")
    return float(alpha), float(beta)


def iter_pairs(sample: LinkSample) -> Iterable[tuple[str, str]]:
    g = sample.graph
    t = g.nodes[check_single_target(g)].node_id
    for k in g.non_target_indices:
        yield t, g.nodes[k].node_id
