"""Linearized feeder model: voltages and head power affine in DER injections.

Dropping line losses from the branch-flow equations leaves an affine map

    v   = A p + B q + c        (node voltage magnitudes)
    P_L = M . p + N . q + d    (real power drawn at the substation)

where ``p``, ``q`` are the controllable DER injections at every node and
the fixed base injections are folded into ``c`` and ``d``.  ``A`` and
``B`` are the classic resistance/reactance path matrices: entry (i, j) is
the summed r (or x) over the edges shared by the substation-to-i and
substation-to-j paths, divided by the substation voltage.  Both are
symmetric positive semidefinite by construction.  Losslessness makes every
unit of local injection displace exactly one unit of head draw, so
``M = -1`` and ``N = 0`` elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .network import DistributionFeeder, feeder_topology

__all__ = [
    "LinearFeederModel",
    "build_lindistflow",
    "predict",
]


@dataclass(frozen=True)
class LinearFeederModel:
    """Affine sensitivities of one feeder around its fixed base injections."""

    feeder_id: str
    A: np.ndarray  # dv/dp, n x n, symmetric PSD
    B: np.ndarray  # dv/dq, n x n, symmetric PSD
    c: np.ndarray  # voltages at zero DER output
    M: np.ndarray  # dP_L/dp, all -1
    N: np.ndarray  # dP_L/dq, all 0
    d: float  # head draw at zero DER output

    @property
    def n_nodes(self) -> int:
        return len(self.c)


@lru_cache(maxsize=128)
def build_lindistflow(feeder: DistributionFeeder) -> LinearFeederModel:
    """Assemble the affine model for ``feeder``.

    The path matrices come from the edge-path incidence ``T`` (edge e lies
    on the path to node j), giving ``A = T' diag(r) T / v0``.
    """
    topo = feeder_topology(feeder)
    n = feeder.n_nodes
    T = np.zeros((n, n))
    for j in topo.order:
        pj = topo.parent[j]
        if pj >= 0:
            T[:, j] = T[:, pj]
        T[j, j] = 1.0
    r = np.array(topo.r)
    x = np.array(topo.x)
    A = (T * r[:, None]).T @ T / feeder.v0
    B = (T * x[:, None]).T @ T / feeder.v0

    p0 = np.array([node.p_load for node in feeder.nodes])
    q0 = np.array([node.q_load for node in feeder.nodes])
    c = feeder.v0 + A @ p0 + B @ q0
    M = np.full(n, -1.0)
    N = np.zeros(n)
    d = -float(np.sum(p0))

    for arr in (A, B, c, M, N):
        arr.flags.writeable = False
    return LinearFeederModel(
        feeder_id=feeder.feeder_id, A=A, B=B, c=c, M=M, N=N, d=d
    )


def predict(
    model: LinearFeederModel, p: np.ndarray, q: np.ndarray
) -> tuple[np.ndarray, float]:
    """Voltage profile and head draw for DER injections ``p``, ``q``."""
    v = model.c + model.A @ p + model.B @ q
    P_L = model.d + float(model.M @ p) + float(model.N @ q)
    return v, P_L
