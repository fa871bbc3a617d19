import numpy as np
import pytest

from cfmdp.environments import environment_features
from cfmdp.errors import ValidationFailed
from cfmdp.gumbel import build_cf_mdp, build_posterior
from cfmdp.influence import prune_cf_mdp
from cfmdp.mdp import Policy, path_return, sample_path
from cfmdp.solver import (
    check_sweep_monotonicity,
    policy_to_json,
    rollout,
    solve_km,
    sweep,
)

from oracles import km_value_oracle, random_mdp


def small_instance(seed, n_states=4, n_actions=2, horizon=4, n_samples=1000):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n_states, n_actions, support_max=3)
    policy = Policy.constant("a0")
    path = sample_path(mdp, policy, horizon, seed=seed)
    post = build_posterior(mdp, path, n_samples, "topdown", seed=seed + 1)
    cf = build_cf_mdp(post, mdp, path)
    return mdp, path, cf


def test_solve_m0_equals_observed_return(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    policy = solve_km(pruned, path, 0)
    assert policy.v_s0 == path_return(mdp, path) == -38.0


def test_solve_epidemic_headline(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    policy = solve_km(pruned, path, 1)
    assert policy.v_s0 == pytest.approx(-1.0, abs=1e-9)
    # The single change vaccinates the one infected individual at t = 0.
    assert policy.action(path.state(0), 0, 0) == "V_I"


def test_budget_validation(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 2)
    with pytest.raises(ValidationFailed):
        solve_km(pruned, path, path.T + 1)


@pytest.mark.parametrize("seed", range(10))
def test_solver_matches_recursion_oracle(seed):
    mdp, path, cf = small_instance(seed)
    rng = np.random.default_rng(seed + 100)
    k = int(rng.integers(1, path.T + 2))
    m = int(rng.integers(0, path.T + 1))
    pruned = prune_cf_mdp(cf, mdp, path, k)
    got = solve_km(pruned, path, m).v_s0
    want = km_value_oracle(pruned, path, m)
    assert got == want


def test_bellman_consistency_of_budget_recursion(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 4)
    m = 3
    policy = solve_km(pruned, path, m)
    T = pruned.horizon
    for t in range(T):
        obs = path.action(t)
        for s in pruned.layers[t]:
            for r in range(m + 1):
                best = float("-inf")
                for a in pruned.allowed_actions(s, t):
                    cost = 0 if a == obs else 1
                    if cost > r:
                        continue
                    q = mdp.reward(s, a)
                    for s2, p in pruned.kernel(t, s, a).probs.items():
                        nxt = 0.0 if t + 1 == T else float(policy.value_table[t + 1][s2][r - cost])
                        q += p * nxt
                    best = max(best, q)
                assert abs(float(policy.value_table[t][s][r]) - best) < 1e-12


def test_unconstrained_equals_layered_value_iteration(epidemic_demo, epidemic_cf):
    # (k = T+1, m = T) must match plain finite-horizon value iteration over the
    # counterfactual layers.
    mdp, path, _ = epidemic_demo
    T = path.T
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, T + 1)
    got = solve_km(pruned, path, T).v_s0

    memo = {}

    def vi(s, t):
        if t == T:
            return 0.0
        if (s, t) not in memo:
            memo[(s, t)] = max(
                mdp.reward(s, a)
                + sum(p * vi(s2, t + 1) for s2, p in epidemic_cf.kernel(t, s, a).probs.items())
                for a in mdp.available_actions(s)
            )
        return memo[(s, t)]

    assert got == pytest.approx(vi(path.state(0), 0), abs=1e-9)


def test_sweep_reads_all_budgets_off_one_table(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    result = sweep(epidemic_cf, path, ks=[2, 8], ms=[1, 3, 7])
    table = {(k, m): v for k, m, v in result.rows}
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    for m in (1, 3, 7):
        assert table[(8, m)] == solve_km(pruned, path, m).v_s0
    assert check_sweep_monotonicity(result) == []


def test_sweep_rejects_empty_ranges(epidemic_demo, epidemic_cf):
    _, path, _ = epidemic_demo
    with pytest.raises(ValidationFailed):
        sweep(epidemic_cf, path, ks=[], ms=[1])


def test_rollout_m0_replays_observed_path(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    policy = solve_km(pruned, path, 0)
    infected = environment_features("epidemic")["infected"]
    summary = rollout(pruned, policy, 300, infected, seed=2)
    observed = [infected(path.state(t)) for t in range(path.T)]
    # Replay is exact on every observed step; only the unobserved final
    # transition (prior noise) may vary.
    assert summary.means[: path.T].tolist() == observed
    assert summary.stds[: path.T].tolist() == [0.0] * path.T
    assert summary.max_changes == 0


def test_rollout_single_trajectory_has_zero_std(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    policy = solve_km(pruned, path, 1)
    summary = rollout(pruned, policy, 1, environment_features("epidemic")["infected"], seed=3)
    assert np.all(summary.stds == 0.0)


def test_rollout_epidemic_optimal_policy(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 8)
    policy = solve_km(pruned, path, 1)
    summary = rollout(pruned, policy, 500, environment_features("epidemic")["infected"], seed=4)
    assert summary.means.tolist() == [1.0] + [0.0] * path.T
    assert summary.max_changes <= 1


def test_rollout_mean_stability_when_doubling_n():
    mdp, path, cf = small_instance(5, horizon=3)
    pruned = prune_cf_mdp(cf, mdp, path, path.T + 1)
    policy = solve_km(pruned, path, 2)
    feature = lambda s: float(mdp.state_index(s))
    small = rollout(pruned, policy, 2000, feature, seed=6)
    big = rollout(pruned, policy, 4000, feature, seed=7)
    for t in range(path.T + 1):
        band = 3.0 * max(small.stds[t], 1e-12) / np.sqrt(2000) + 1e-9
        assert abs(big.means[t] - small.means[t]) <= band + 3.0 * big.stds[t] / np.sqrt(4000)


def test_rollout_budget_and_containment_bulk(epidemic_demo, epidemic_cf):
    # rollout() itself raises if a trajectory leaves the pruned node set or
    # exceeds the budget; 10^4 trajectories exercise that check.
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 5)
    policy = solve_km(pruned, path, 3)
    summary = rollout(pruned, policy, 10_000, environment_features("epidemic")["infected"], seed=8)
    assert summary.max_changes <= 3
    assert summary.n == 10_000


def test_policy_json_shape(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    pruned = prune_cf_mdp(epidemic_cf, mdp, path, 3)
    policy = solve_km(pruned, path, 2)
    blob = policy_to_json(policy, meta={"samples": 1000})
    assert blob["k"] == 3 and blob["m"] == 2
    assert {"t", "s", "j", "a"} <= set(blob["actions"][0])
    assert blob["v_s0"] == policy.v_s0
