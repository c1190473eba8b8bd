#!/usr/bin/env python3
"""Load a shipped feeder case and inspect its linear voltage model.

The model expresses squared-voltage deviations as an affine map of the
nodal injections: v = c + A p + B q, and the head draw as
P_L = d - sum(p) - (reactive terms).  A and B are dense, symmetric and
positive semidefinite; their entries are shared-path impedance sums.
"""

from pathlib import Path

import numpy as np

from tdcoopt.lindistflow import build_lindistflow, predict
from tdcoopt.network import parse_case

CASES = Path(__file__).resolve().parents[1] / "src" / "tdcoopt" / "cases"


def main() -> None:
    feeder = parse_case((CASES / "feeder4.json").read_text())
    print(f"feeder {feeder.feeder_id!r}: {len(feeder.nodes)} nodes, "
          f"{len(feeder.ders)} DERs, base {feeder.base_mva} MVA")
    for node in feeder.nodes:
        print(f"  node {node.id}: load p={node.p_load:+.4f} "
              f"q={node.q_load:+.4f} p.u.")

    model = build_lindistflow(feeder)
    n = len(feeder.nodes)
    print("\nsensitivity of node voltages to active injections (A):")
    with np.printoptions(precision=4, suppress=True):
        print(model.A)
    print(f"symmetric: {np.allclose(model.A, model.A.T)}; "
          f"eigenvalues >= 0: {np.all(np.linalg.eigvalsh(model.A) >= -1e-12)}")

    v0, head0 = predict(model, np.zeros(n), np.zeros(n))
    print(f"\nno injections: v in [{v0.min():.4f}, {v0.max():.4f}] p.u., "
          f"head draw {head0:.4f} p.u.")

    # inject 1 MW (0.01 p.u.) at the deepest node and watch the lift
    p = np.zeros(n)
    p[-1] = 0.01
    v1, head1 = predict(model, p, np.zeros(n))
    print(f"0.01 p.u. at node {feeder.nodes[-1].id}: "
          f"v in [{v1.min():.4f}, {v1.max():.4f}] p.u., "
          f"head draw {head1:.4f} p.u.")
    print("every injected unit displaces exactly one unit at the head: "
          f"{head0 - head1:.4f} == {p.sum():.4f}")


if __name__ == "__main__":
    main()
