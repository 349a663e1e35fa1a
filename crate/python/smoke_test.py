"""Smoke test for the metalinreg extension module.

Build and install first:
    pip install maturin
    cd crates/python && maturin build --release -o dist && pip install dist/*.whl
"""

import json
import math

import numpy as np
from scipy import stats

import metalinreg as ml


def check(name, ok):
    print(f"{'PASS' if ok else 'FAIL'} {name}")
    if not ok:
        raise SystemExit(1)


def welch_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ma, mb = rng.normal(size=2)
        va, vb = rng.uniform(0.1, 3.0, size=2)
        na, nb = rng.integers(2, 40, size=2)
        t, dof, p = ml.welch_test(ma, va, int(na), mb, vb, int(nb))
        sa, sb = va / na, vb / nb
        t_ref = (ma - mb) / math.sqrt(sa + sb)
        dof_ref = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
        if not (math.isclose(t, t_ref, rel_tol=1e-12, abs_tol=1e-12)
                and math.isclose(dof, dof_ref, rel_tol=1e-12)
                and abs(p - stats.t.sf(t_ref, dof_ref)) < 1e-9):
            return False
    return True


def lstsq(data, halves):
    xs, ys = [], []
    for task in json.loads(data.to_json())["tasks"]:
        for h in halves:
            xs.extend(np.asarray(task[f"x_{h}"]).T.tolist())
            ys.extend(task[f"y_{h}"])
    return np.linalg.lstsq(np.asarray(xs), np.asarray(ys), rcond=None)[0]


def drs_matches_lstsq():
    data = ml.generate_dataset(6, 5, 11, p=3)
    got = ml.solve_drs(data)["theta_hat"]
    return np.allclose(got, lstsq(data, ["support", "query"]), atol=1e-10)


def zero_step_maml_is_lstsq_on_queries():
    data = ml.generate_dataset(4, 6, 3, p=2)
    got = ml.solve_maml(data, 0.0)["theta_hat"]
    return (data.m, data.n, data.p) == (4, 6, 2) and np.allclose(got, lstsq(data, ["query"]), atol=1e-10)


def population_optima():
    tasks = [ml.TaskParams.scalar(1.0, 0.1, 1.0), ml.TaskParams.scalar(2.0, 0.1, 3.0)]
    dist = ml.FiniteDistribution(tasks)
    # Scalar DRS optimum is the Q-weighted mean of the task optima.
    drs = ml.population_drs_optimum(dist)[0]
    risk_ok = ml.drs_population_risk([drs], dist) <= ml.drs_population_risk([drs + 1e-3], dist)
    maml = ml.population_maml_optimum(dist, 0.1)[0]
    grid = np.linspace(0.0, 3.0, 3001)
    best = grid[np.argmin([ml.maml_population_risk([g], 0.1, dist) for g in grid])]
    return math.isclose(drs, 1.75, rel_tol=1e-12) and risk_ok and abs(maml - best) < 1e-3


def bounds_round_trip():
    task = ml.TaskParams([1.0, -0.5], 0.2, [[1.0, 0.2], [0.2, 0.5]])
    dist = ml.FiniteDistribution([task, ml.TaskParams([0.0, 1.0], 0.1, [[0.8, 0.0], [0.0, 1.2]])])
    inputs = ml.linreg_bound_inputs(dist, 0.1)
    small = ml.drs_statistical_bound(inputs, 400, 400)
    large = ml.drs_statistical_bound(inputs, 100, 100)
    constants = {"delta": 1.0, "lipschitz_l": 1.0, "smooth_mu": 1.0, "hessian_lip": 0.0,
                 "grad_var_data": 1.0, "grad_var_task": 1.0, "hess_var": 0.0}
    schedule = {"t_train": 1, "t_test": 1, "m": 1, "n": 1, "d_hessian": 1,
                "lr_train": 0.0, "lr_test": 0.0, "alpha": 0.5}
    try:
        ml.maml_complexity_bound(constants, 1.0, schedule)
        raised = False
    except ml.AssumptionViolation as e:
        raised = "assumption_violation" in str(e)
    return 0 < small < large and raised


def experiment_cell():
    cell = ml.run_cell(8, 8, 0.0, 20, 5, mc_tasks=200)
    counts = cell["maml_better_pre"] + cell["drs_better_pre"] + cell["ties_pre"] + cell["degenerate"]
    return counts == 20 and cell["p_pre"] == cell["p_post"]


def sgd_verification():
    dist = ml.FiniteDistribution([ml.TaskParams.scalar(1.0, 0.1, 1.0), ml.TaskParams.scalar(-1.0, 0.2, 0.5)])
    report = ml.verify_complexity_bound(
        "drs", dist,
        {"grad_var_data": 0.5, "hess_var": 0.0, "domain_radius": 3.0},
        {"t_train": 20, "t_test": 10, "m": 2, "n": 2, "d_hessian": 1,
         "lr_train": 0.1, "lr_test": 0.1, "alpha": 0.0},
        seeds=8)
    return report["satisfied"] and report["lhs_mean"] <= report["rhs"]


if __name__ == "__main__":
    check("welch matches scipy", welch_matches_scipy())
    check("drs matches numpy lstsq", drs_matches_lstsq())
    check("zero-step maml matches query lstsq", zero_step_maml_is_lstsq_on_queries())
    check("population optima", population_optima())
    check("bounds round trip", bounds_round_trip())
    check("experiment cell", experiment_cell())
    check("sgd verification", sgd_verification())
