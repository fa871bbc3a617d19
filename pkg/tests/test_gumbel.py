import numpy as np
import pytest
from scipy import stats

from cfmdp.errors import ValidationFailed, ZeroProbabilityObservation
from cfmdp.gumbel import (
    build_cf_mdp,
    build_posterior,
    cf_transition,
    gumbel_max_step,
    load_posterior,
    nominal_cf_mdp,
    posterior_sample_rejection,
    posterior_sample_topdown,
    prior_posterior,
    save_posterior,
)
from cfmdp.mdp import Mdp, ObservedPath

from oracles import categorical_frequencies, random_mdp, tv_distance


def row_mdp(probs: dict, extra_rows: dict | None = None) -> Mdp:
    states = tuple(sorted({"s"} | set(probs) | {s2 for row in (extra_rows or {}).values() for s2 in row}))
    kernel = {("s", "a"): dict(probs)}
    for (s, a), row in (extra_rows or {}).items():
        kernel[(s, a)] = dict(row)
    actions = tuple(sorted({a for _, a in kernel}))
    return Mdp(states, actions, kernel, {}, {"s": 1.0})


def mechanism_frequencies(mdp, s, a, n, seed):
    rng = np.random.default_rng(seed)
    noise = rng.gumbel(size=(n, mdp.num_states))
    counts = {}
    idx, _, logp = mdp.row_arrays(s, a)
    wins = np.argmax(logp[None, :] + noise[:, idx], axis=1)
    for pos, c in zip(*np.unique(wins, return_counts=True)):
        counts[mdp.states[idx[pos]]] = c / n
    return counts


def test_gumbel_max_deterministic_row():
    mdp = row_mdp({"x1": 1.0})
    g = np.random.default_rng(0).gumbel(size=mdp.num_states)
    assert gumbel_max_step(mdp, "s", "a", g) == "x1"


def test_gumbel_max_uniform_row_frequencies():
    mdp = row_mdp({"x1": 0.5, "x2": 0.5})
    freqs = mechanism_frequencies(mdp, "s", "a", 100_000, seed=1)
    assert abs(freqs["x1"] - 0.5) < 0.01
    assert abs(freqs["x2"] - 0.5) < 0.01


def test_gumbel_max_matches_categorical_oracle():
    probs = {"x1": 0.9, "x2": 0.1}
    mdp = row_mdp(probs)
    n = 1_000_000
    freqs = mechanism_frequencies(mdp, "s", "a", n, seed=2)
    oracle = categorical_frequencies(probs, n, seed=3)
    for k in probs:
        assert abs(freqs[k] - probs[k]) < 0.005
        assert abs(freqs[k] - oracle[k]) < 0.005


def test_rejection_deterministic_acceptance():
    mdp = row_mdp({"x1": 1.0})
    samples, attempts = posterior_sample_rejection(mdp, "s", "a", "x1", 1000, seed=0,
                                                   return_attempts=True)
    assert samples.shape[0] == 1000
    assert attempts == 1000  # acceptance rate exactly 1


def test_rejection_acceptance_rate_matches_probability():
    mdp = row_mdp({"x1": 0.9, "x2": 0.1})
    n = 10_000
    samples, attempts = posterior_sample_rejection(mdp, "s", "a", "x2", n, seed=4,
                                                   return_attempts=True)
    rate = n / attempts
    assert abs(rate - 0.1) < 0.01
    # Every accepted vector replays the observation.
    for g in samples[:100]:
        assert gumbel_max_step(mdp, "s", "a", g) == "x2"


def test_rejection_zero_probability_errors():
    mdp = row_mdp({"x1": 0.9, "x2": 0.1}, extra_rows={("x1", "a"): {"x1": 1.0}})
    with pytest.raises(ZeroProbabilityObservation):
        posterior_sample_rejection(mdp, "s", "a", "s", 10, seed=0)
    with pytest.raises(ZeroProbabilityObservation):
        posterior_sample_topdown(mdp, "s", "a", "s", 10, seed=0)


def test_topdown_always_replays():
    mdp = row_mdp({"x1": 0.5, "x2": 0.4, "x3": 0.1})
    samples = posterior_sample_topdown(mdp, "s", "a", "x3", 5000, seed=5)
    idx, _, logp = mdp.row_arrays("s", "a")
    wins = np.argmax(logp[None, :] + samples[:, idx], axis=1)
    assert np.all(idx[wins] == mdp.state_index("x3"))


def test_topdown_matches_rejection_downstream():
    # Same conditioning, both samplers, compared through the counterfactual row
    # of a different action at the same step.
    probs = {"x1": 0.5, "x2": 0.4, "x3": 0.1}
    other = {("s", "b"): {"x1": 0.3, "x2": 0.3, "x3": 0.4}}
    mdp = row_mdp(probs, extra_rows=other)
    n = 100_000
    top = posterior_sample_topdown(mdp, "s", "a", "x3", n, seed=6)
    rej = posterior_sample_rejection(mdp, "s", "a", "x3", n, seed=7)
    idx, _, logp = mdp.row_arrays("s", "b")

    def row_freqs(noise):
        wins = np.argmax(logp[None, :] + noise[:, idx], axis=1)
        counts = np.bincount(wins, minlength=len(idx))
        return {mdp.states[idx[i]]: counts[i] / noise.shape[0] for i in range(len(idx))}

    assert tv_distance(row_freqs(top), row_freqs(rej)) < 0.02


def test_topdown_off_support_marginal_is_prior():
    # The observed row never reaches "z"; its posterior must equal the prior.
    mdp = row_mdp({"x1": 0.7, "x2": 0.3}, extra_rows={("z", "a"): {"z": 1.0}})
    samples = posterior_sample_topdown(mdp, "s", "a", "x2", 100_000, seed=8)
    z_col = samples[:, mdp.state_index("z")]
    ks = stats.kstest(z_col, stats.gumbel_r.cdf)
    assert ks.statistic < 0.01


def test_build_posterior_replays_and_final_step_prior(tinychain):
    path = ObservedPath((("x0", "a"), ("x1", "a"), ("x1", "a")))
    post = build_posterior(tinychain, path, 500, "topdown", seed=1)
    assert post.T == 3
    # Conditioned steps replay exactly.
    for t in range(2):
        est = cf_transition(post, tinychain, t, path.state(t), path.action(t))
        assert est.probs == {path.state(t + 1): 1.0}
    # The final step carries prior noise: its cf row tracks the nominal row.
    est = cf_transition(post, tinychain, 2, "x0", "a")
    assert tv_distance(est.probs, tinychain.kernel[("x0", "a")]) < 0.1


def test_build_posterior_single_step_is_prior(tinychain):
    path = ObservedPath((("x0", "a"),))
    post = build_posterior(tinychain, path, 20_000, "topdown", seed=2)
    est = cf_transition(post, tinychain, 0, "x0", "a")
    assert tv_distance(est.probs, {"x1": 0.9, "x2": 0.1}) < 0.02


def test_build_posterior_steps_independent(tinychain):
    path = ObservedPath((("x0", "a"), ("x1", "a"), ("x1", "a")))
    post = build_posterior(tinychain, path, 10_000, "topdown", seed=9)
    for s in tinychain.states:
        i = tinychain.state_index(s)
        for t1, t2 in ((0, 1), (0, 2), (1, 2)):
            corr = np.corrcoef(post.vectors(t1)[:, i], post.vectors(t2)[:, i])[0, 1]
            assert abs(corr) < 0.02


def test_cf_transition_tinychain_analytic(tinychain):
    # Conditioning (x0, a) on the 0.1 outcome x2 forces the counterfactual of
    # action b to x2 with probability exactly 1 (G_x2 - G_x1 > log 9).
    path = ObservedPath((("x0", "a"), ("x2", "a")))
    post = build_posterior(tinychain, path, 5000, "topdown", seed=4)
    est = cf_transition(post, tinychain, 0, "x0", "b")
    assert est.probs == {"x2": 1.0}
    rej = build_posterior(tinychain, path, 100_000, "rejection", seed=5)
    est_rej = cf_transition(rej, tinychain, 0, "x0", "b")
    assert est_rej.probs == {"x2": 1.0}


def test_cf_transition_disjoint_support_is_interventional():
    # Proposition check: disjoint-support query tracks the nominal row.
    kernel = {
        ("s", "a"): {"x1": 0.6, "x2": 0.4},
        ("s", "b"): {"y1": 0.2, "y2": 0.5, "y3": 0.3},
    }
    states = ("s", "x1", "x2", "y1", "y2", "y3")
    mdp = Mdp(states, ("a", "b"), kernel, {}, {"s": 1.0})
    path = ObservedPath((("s", "a"), ("x2", "a")))
    # pad rows so the path validates
    kernel[("x2", "a")] = {"x2": 1.0}
    post = build_posterior(mdp, path, 100_000, "topdown", seed=6)
    est = cf_transition(post, mdp, 0, "s", "b")
    nominal = kernel[("s", "b")]
    assert tv_distance(est.probs, nominal) < 0.02
    assert tv_distance(est.probs, nominal) < 3.0 * np.sqrt(len(nominal) / 100_000)


def test_cf_support_containment():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng, 5, 2, support_max=3)
    from cfmdp.mdp import Policy, sample_path

    path = sample_path(mdp, Policy.constant("a0"), 3, seed=1)
    post = build_posterior(mdp, path, 2000, "topdown", seed=2)
    for t in range(3):
        for s in mdp.states:
            for a in mdp.available_actions(s):
                est = cf_transition(post, mdp, t, s, a)
                assert set(est.support) <= set(mdp.kernel[(s, a)])
                assert abs(sum(est.probs.values()) - 1.0) < 1e-9


def test_counterfactual_stability_on_samples(tinychain):
    # If an intervention flips the outcome away from the observation, it must
    # have raised that outcome's relative probability.
    rng = np.random.default_rng(10)
    path = ObservedPath((("x0", "a"), ("x2", "a")))
    post = build_posterior(tinychain, path, 2000, "topdown", seed=11)
    obs_row = tinychain.kernel[("x0", "a")]
    noise = post.vectors(0)
    for _ in range(200):
        raw = rng.uniform(0.05, 1.0, size=2)
        p_int = dict(zip(("x1", "x2"), raw / raw.sum()))
        inter = Mdp(tinychain.states, ("q",), {("x0", "q"): p_int}, {}, {"x0": 1.0})
        idx, _, logp = inter.row_arrays("x0", "q")
        wins = np.argmax(logp[None, :] + noise[:, idx], axis=1)
        for pos in np.unique(wins):
            s2 = inter.states[idx[pos]]
            if s2 == "x2":
                continue
            assert p_int[s2] / obs_row[s2] > p_int["x2"] / obs_row["x2"]


def test_cf_mdp_layers_and_replay(epidemic_demo, epidemic_cf):
    mdp, path, _ = epidemic_demo
    cf = epidemic_cf
    assert cf.layer_count == path.T + 1
    # Replaying the observed actions reproduces the observed path w.p. 1.
    s = cf.initial_state
    for t in range(path.T - 1):
        est = cf.kernel(t, s, path.action(t))
        assert est.probs == {path.state(t + 1): 1.0}
        s = path.state(t + 1)


def test_cf_mdp_fig2_counterfactual_edge(fig2_toy):
    # The full CF MDP keeps the counterfactual branch s3 -> s5 under a0 open.
    mdp, path = fig2_toy
    post = build_posterior(mdp, path, 500, "topdown", seed=12)
    cf = build_cf_mdp(post, mdp, path)
    est = cf.kernel(1, "s3", "a0")
    assert est.probs.get("s5", 0.0) > 0.0


def test_nominal_cf_mdp_rows_exact(fig2_toy):
    mdp, path = fig2_toy
    cf = nominal_cf_mdp(mdp, path)
    assert cf.kernel(0, "s0", "a0").probs == {"s2": 0.5, "s3": 0.5}


def test_prior_posterior_matches_nominal(tinychain):
    path = ObservedPath((("x0", "a"), ("x2", "a")))
    post = prior_posterior(tinychain, path, 50_000, seed=13)
    est = cf_transition(post, tinychain, 0, "x0", "a")
    assert tv_distance(est.probs, tinychain.kernel[("x0", "a")]) < 0.02


def test_cf_mdp_kernel_memoized(epidemic_cf):
    built = epidemic_cf.rows_built
    est1 = epidemic_cf.kernel(0, epidemic_cf.initial_state, "NIL")
    est2 = epidemic_cf.kernel(0, epidemic_cf.initial_state, "NIL")
    assert est1 is est2
    assert epidemic_cf.rows_built <= built + 1


def test_posterior_save_load_round_trip(tmp_path, tinychain):
    path = ObservedPath((("x0", "a"), ("x2", "a")))
    post = build_posterior(tinychain, path, 100, "topdown", seed=14)
    file = tmp_path / "posterior.npz"
    save_posterior(post, file)
    loaded = load_posterior(file)
    assert loaded.n == post.n and loaded.sampler == post.sampler
    assert loaded.path.steps == post.path.steps
    for t in range(post.T):
        np.testing.assert_array_equal(loaded.vectors(t), post.vectors(t))


def test_build_posterior_rejects_unknown_sampler(tinychain):
    path = ObservedPath((("x0", "a"),))
    with pytest.raises(ValidationFailed):
        build_posterior(tinychain, path, 10, "bogus", seed=0)


def test_rejection_attempt_cap_fails_loudly():
    from cfmdp.errors import RejectionBudgetExceeded

    # Observation probability 1e-9 needs ~1e9 proposals per sample; the cap of
    # 1e7 per requested sample trips first.
    mdp = row_mdp({"x1": 1.0 - 1e-9, "x2": 1e-9})
    with pytest.raises(RejectionBudgetExceeded):
        posterior_sample_rejection(mdp, "s", "a", "x2", 1, seed=0)


def test_cf_mdp_rejects_mismatched_posterior(tinychain):
    path = ObservedPath((("x0", "a"), ("x2", "a")))
    other = ObservedPath((("x0", "a"), ("x1", "a")))
    post = build_posterior(tinychain, path, 50, "topdown", seed=0)
    with pytest.raises(ValidationFailed):
        build_cf_mdp(post, tinychain, other)
    other_mdp = row_mdp({"x1": 0.5, "x2": 0.5})
    with pytest.raises(ValidationFailed):
        build_cf_mdp(post, other_mdp, path)
