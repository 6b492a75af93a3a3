"""Forward models: pure maps from a field realization to a data vector.

Every model exposes ``data_dim``, ``evaluate(field) -> z`` (deterministic;
raises ForwardModelError for a failed sample), and ``descriptor()`` with the
observation-plan metadata.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from ..grids import FieldRealization
from .darcy import DarcyModel, DarcyPlan, head_at
from .eikonal import EikonalModel, TomographyPlan, traveltime_field
from .runoff import RainEvent, RunoffModel, default_events, simulate_event
from .truth import coarsen, make_synthetic_truth


@runtime_checkable
class ForwardModel(Protocol):
    @property
    def data_dim(self) -> int: ...

    def evaluate(self, field: FieldRealization) -> np.ndarray: ...

    def descriptor(self) -> dict: ...


@dataclass(frozen=True)
class LinearForwardModel:
    """z = G y; the conjugate test bed where the posterior is known exactly."""

    G: np.ndarray

    @property
    def data_dim(self) -> int:
        return self.G.shape[0]

    def descriptor(self) -> dict:
        return {"kind": "linear", "shape": list(self.G.shape)}

    def evaluate(self, field: FieldRealization) -> np.ndarray:
        return self.G @ field.values


__all__ = [
    "DarcyModel", "DarcyPlan", "EikonalModel", "ForwardModel", "LinearForwardModel",
    "RainEvent", "RunoffModel", "TomographyPlan", "coarsen", "default_events",
    "head_at", "make_synthetic_truth", "simulate_event", "traveltime_field",
]
