"""The standard-form quadratic program ``min r^T M r`` over a lifted rotation domain."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .domains import DomainSpec, embed

SCHEMA_VERSION = 1


class Provenance(str, enum.Enum):
    RANDOM = "Random"
    REGISTRATION = "Registration"
    RESECTIONING = "Resectioning"
    HANDEYE_SO3 = "HandEyeSO3"
    HANDEYE_QUAT = "HandEyeQuat"
    ROTAVG_SO = "RotAvgSO"
    ROTAVG_QUAT = "RotAvgQuat"
    POINTSET_AVG = "PointSetAvg"
    COUNTEREXAMPLE = "Counterexample"


# objectives that are invariant under a common left rotation of all copies
GAUGE_INVARIANT = {Provenance.ROTAVG_SO, Provenance.ROTAVG_QUAT, Provenance.POINTSET_AVG}


@dataclass
class StandardFormProblem:
    """Objective matrix ``M`` over ``spec``.

    The application cost is recovered from the quadratic form as
    ``cost_scale * r^T M r + cost_offset``; builders record the constants they
    drop.  ``flags`` carries non-fatal warnings (disconnected graph, degenerate
    point sets); ``source`` holds a JSON-friendly description of the input data.
    """

    M: np.ndarray
    spec: DomainSpec
    provenance: Provenance = Provenance.RANDOM
    cost_scale: float = 1.0
    cost_offset: float = 0.0
    flags: list[str] = field(default_factory=list)
    source: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        N = self.spec.lifted_dim
        if M.shape != (N, N):
            raise ValueError(f"objective must be {N}x{N} for {self.spec}, got {M.shape}")
        self.M = 0.5 * (M + M.T)
        self.provenance = Provenance(self.provenance)

    def objective(self, r) -> float:
        r = np.asarray(r, dtype=float)
        return float(r @ self.M @ r)

    def evaluate(self, elements) -> float:
        return self.objective(embed(elements, self.spec))

    def application_cost(self, r) -> float:
        return self.cost_scale * self.objective(r) + self.cost_offset

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "spec": self.spec.to_dict(),
            "M": self.M.tolist(),
            "provenance": {
                "kind": self.provenance.value,
                "cost_scale": self.cost_scale,
                "cost_offset": self.cost_offset,
                "flags": list(self.flags),
                "source": self.source,
            },
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')}")
        prov = d.get("provenance", {})
        return cls(
            M=np.array(d["M"], dtype=float),
            spec=DomainSpec.from_dict(d["spec"]),
            provenance=Provenance(prov.get("kind", "Random")),
            cost_scale=float(prov.get("cost_scale", 1.0)),
            cost_offset=float(prov.get("cost_offset", 0.0)),
            flags=list(prov.get("flags", [])),
            source=prov.get("source", {}),
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))
