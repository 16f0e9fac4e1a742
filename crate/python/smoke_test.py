"""Smoke test for the mlmc_nac extension module.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
copy target/release/libmlmc_nac_py.so to a directory on PYTHONPATH as
mlmc_nac.so.
"""

import json
import math
import os
import sys
import tempfile

import mlmc_nac as m


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    mdp = m.Mdp.random(4, 2, seed=1)
    assert (mdp.n_states, mdp.n_actions, mdp.theta_dim) == (4, 2, 4)
    again = m.Mdp.from_json(mdp.to_json())
    assert again.to_json() == mdp.to_json()

    ev = m.evaluate(mdp)
    assert close(sum(ev["stationary"]), 1.0)
    assert abs(sum(d * v for d, v in zip(ev["stationary"], ev["v"]))) < 1e-10
    j_star = m.optimal_gain(mdp)
    assert j_star >= ev["gain"]

    # Finite-difference check of the exact policy gradient.
    theta = [0.3, -0.2, 0.1, 0.5]
    grad = m.policy_gradient(mdp, theta)
    h = 1e-6
    for i in range(4):
        up = list(theta)
        dn = list(theta)
        up[i] += h
        dn[i] -= h
        fd = (m.evaluate(mdp, up)["gain"] - m.evaluate(mdp, dn)["gain"]) / (2 * h)
        assert abs(fd - grad[i]) < 1e-6, (i, fd, grad[i])

    xi = m.td_fixed_point(mdp, theta, c_beta=2.0)
    assert close(xi[0], m.evaluate(mdp, theta)["gain"])
    report = m.assumption_report(mdp, features=3)
    assert report["lambda_min"] > 0
    assert close(m.c_beta_threshold(2.0), 2.0)
    assert close(m.mlmc_expected_cost(16), 4.0625)

    hp = m.derive_hyperparams(
        mdp, t_budget=1 << 14, features=3, overrides={"lambda": 2.0, "mu": 1.0, "alpha": 1.0}
    )
    assert (hp.k_outer, hp.h_inner, hp.t_max) == (128, 16, 256)
    out = m.run_nac(mdp, hp, seed=4, features=3)
    assert out["error"] is None
    assert len(out["records"]) == hp.k_outer
    assert len(out["thetas"]) == hp.k_outer + 1
    assert out["final_gap"] < out["records"][0]["gap"]
    cum = [r["cum_T"] for r in out["records"]]
    assert all(a < b for a, b in zip(cum, cum[1:]))

    try:
        m.evaluate(mdp, [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("bad theta length accepted")

    with tempfile.TemporaryDirectory() as tmp:
        mdp.save(os.path.join(tmp, "mdp.json"))
        cfg = {
            "mdp": {"kind": "file", "path": "mdp.json"},
            "features": {"kind": "cosine", "dim": 3},
            "k_outer": 8,
            "h_inner": 8,
            "overrides": {"lambda": 2.0, "mu": 1.0, "alpha": 1.0},
            "seeds": [1, 2],
            "output": "out",
        }
        path = os.path.join(tmp, "cfg.json")
        with open(path, "w") as f:
            json.dump(cfg, f)
        summary = json.loads(m.run_experiment(path))
        assert len(summary["seeds"]) == 2
        csvs = [os.path.join(tmp, "out", f"trace_seed{s}.csv") for s in (1, 2)]
        slope, _, r2 = m.rate_fit(csvs, "cum_T", "epoch_transitions")
        assert math.isfinite(slope) and 0.0 <= r2 <= 1.0

    slope, _, r2 = m.fit_power_law([2.0, 4.0, 8.0], [0.5, 0.25, 0.125])
    assert close(slope, -1.0) and close(r2, 1.0)

    ok, text = m.validate_mlmc(t_max=[8], replicas=20000, cost_draws=100000)
    assert ok, text
    ok, text = m.validate_linrec()
    assert ok, text

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
