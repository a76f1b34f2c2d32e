"""Smoke test for the oi_safety_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math
import sys
import tempfile
from pathlib import Path

import oi_safety_py as ois


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    di = ois.Model.double_integrator()
    check(di.state_dim == 2 and di.input_dim == 1, "double integrator dimensions")
    check(di.input_bounds() == ([-1.0], [1.0]), "double integrator input box")
    check(di.h([-0.5, 0.0]) == 0.5, "safe-set barrier")

    s = ois.oi_mu_star([-0.3, 1.0], [0.6, 0.0])
    check(abs(s["mu"] - 0.5) < 1e-15 and s["binding_index"] == 0, "closed-form mu*")
    k = ois.kkt_check([-0.3, 1.0], [0.6, 0.0], s["raw"], s["binding_index"])
    check(k["passed"], "KKT certificate")

    u, mu, status = ois.evaluate_controller(di, "oi", [-1.0, 0.0])
    check(u == [1.0] and mu == 0.0 and status == "closed_form", "OI far from the boundary")

    run = ois.simulate(di, "oi", [-1.0, 0.0], 4.0, 0.005, 0.005)
    m = run["metrics"]
    check(len(run["t"]) == 801, "log length")
    check(m["min_h"] >= -1e-3 and m["input_violations"] == 0, "double integrator safety")
    check(m["u_sign_reversals_after_contact"] == [0], "no oscillation under OI")

    ac = ois.Model.aircraft()
    x0 = ac.trim_state()
    check(len(x0) == 8 and ac.h(x0) == 8000.0, "aircraft trim state")
    u, mu, _ = ois.evaluate_controller(ac, "oi", x0, 20.0, 40, 0.05)
    check(mu == 0.0 and u == ac.primary_control(x0), "aircraft OI at start")
    try:
        ois.Model.aircraft('{"v_t": -1}')
    except ValueError:
        check(True, "invalid parameters rejected")
    else:
        check(False, "invalid parameters rejected")

    results = ois.verify_suite("kkt", 7)
    check(all(r[1] for r in results), "kkt verification suite")

    scenario = Path(__file__).resolve().parent.parent / "crates/core/scenarios/double_integrator_oi.json"
    with tempfile.TemporaryDirectory() as out:
        files = ois.run_scenario(str(scenario), out)
        csv = Path(files[0]).read_text().splitlines()
        check(len(csv) == 1 + 2001, "scenario CSV rows")
        check(not any(math.isnan(float(v)) for v in csv[1].split(",")[:7]), "CSV values")
    print("smoke test passed")


if __name__ == "__main__":
    main()
