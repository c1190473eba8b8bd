#!/usr/bin/env python3
"""Nine-generator economic dispatch against the closed-form optimum.

With quadratic costs c_k P_k^2, a fixed demand D, and no feeders, the
saddle point equalizes marginal prices: 2 c_k P_k = -lambda for every
unit, so the optimal outputs split D in proportion to 1/c_k.  The solver
finds that point from a cold start; the multiplier converges to the
(negative) system marginal price.
"""

from pathlib import Path

import numpy as np

from tdcoopt.scenario import load_scenario, run_scenario_in_memory

SCENARIOS = Path(__file__).resolve().parents[1] / "src" / "tdcoopt" / "scenarios"


def main() -> None:
    sc = load_scenario(SCENARIOS / "dispatch9.json")
    res = run_scenario_in_memory(sc)

    ts = sc.system.transmission
    c = np.array([g.cost_coefficient for g in ts.generators])
    demand = -sum(b.p0 for b in ts.buses if b.id != ts.slack_bus_id)
    P_star = demand * (1.0 / c) / np.sum(1.0 / c)

    print(f"scenario {sc.name!r}: {len(c)} generators, demand {demand} p.u.")
    print(f"status {res.status} after {res.iterations} iterations\n")
    print("unit   cost c_k   engine P_k   closed-form P_k*")
    for k, gen in enumerate(ts.generators):
        print(f"  {gen.bus_id:>3}   {c[k]:7.2f}   {res.x.P_M[k]:10.6f}   "
              f"{P_star[k]:10.6f}")
    print(f"\nmax |P - P*|      {np.max(np.abs(res.x.P_M - P_star)):.2e}")
    print(f"balance residual  {abs(res.x.P_M.sum() - demand):.2e}")
    print(f"price lambda      {res.y.lam:.6f} "
          f"(equals -2 c_k P_k = {-2 * c[0] * res.x.P_M[0]:.6f})")


if __name__ == "__main__":
    main()
