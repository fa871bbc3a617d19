"""Gumbel-max SCM mechanism, posterior noise inference, and the time-layered
counterfactual MDP built from Monte-Carlo posterior samples.

The mechanism draws one standard Gumbel per state per time step and picks the
next state as argmax over log-probability-shifted noise. Conditioning on an
observed transition is done either by rejection (draw priors, keep vectors
that replay the observation) or by exact top-down sampling (place the maximum
at the observed state, truncate the rest below it). States outside the
observed row's support keep their prior noise, which is exactly why disjoint
supports make counterfactual and interventional rows coincide.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    RejectionBudgetExceeded,
    ValidationFailed,
    ZeroProbabilityObservation,
)
from .mdp import Action, Mdp, ObservedPath, State, mdp_hash, path_hash

REJECTION_ATTEMPT_CAP = 10**7  # proposals per requested sample before failing loudly

SAMPLER_TOPDOWN = "topdown"
SAMPLER_REJECTION = "rejection"
SAMPLER_PRIOR = "prior"


@dataclass(frozen=True)
class GumbelVector:
    """One exogenous noise vector: a Gumbel value per state, at time t."""

    t: int
    values: np.ndarray  # shape (|S|,), aligned with mdp.states


def _as_values(g) -> np.ndarray:
    return g.values if isinstance(g, GumbelVector) else np.asarray(g, dtype=np.float64)


def gumbel_max_step(mdp: Mdp, s: State, a: Action, g) -> State:
    """Apply the mechanism: argmax over support of log P(s''|s,a) + g(s'').

    Zero-probability states are excluded outright (their log-probability is a
    -inf sentinel conceptually; they can never win). Ties break to the lowest
    state index.
    """
    idx, _, logp = mdp.row_arrays(s, a)
    vals = _as_values(g)
    return mdp.states[idx[int(np.argmax(logp + vals[idx]))]]


def _winners(mdp: Mdp, s: State, a: Action, noise: np.ndarray) -> np.ndarray:
    """Vectorized mechanism over rows of `noise`; returns support positions."""
    idx, _, logp = mdp.row_arrays(s, a)
    return np.argmax(logp[None, :] + noise[:, idx], axis=1)


def _check_observation(mdp: Mdp, s: State, a: Action, s_next: State) -> int:
    row = mdp.row(s, a)
    p = row.get(s_next, 0.0)
    if p <= 0.0:
        raise ZeroProbabilityObservation(
            f"P({s_next} | {s}, {a}) = 0; cannot condition on this transition"
        )
    idx, _, _ = mdp.row_arrays(s, a)
    return int(np.searchsorted(idx, mdp.state_index(s_next)))


def _rejection_noise(mdp: Mdp, s: State, a: Action, s_next: State, n: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Accepted prior vectors and total proposal count."""
    obs_pos = _check_observation(mdp, s, a, s_next)
    idx, probs, logp = mdp.row_arrays(s, a)
    num_states = mdp.num_states
    out = np.empty((n, num_states))
    got = 0
    attempts = 0
    cap = REJECTION_ATTEMPT_CAP * n
    # Batch size adapts to the acceptance rate (= observation probability).
    batch = max(256, min(int(2 * n / max(probs[obs_pos], 1e-6)), 4_000_000))
    while got < n:
        if attempts >= cap:
            raise RejectionBudgetExceeded(
                f"no {n} acceptances within {cap} proposals for ({s},{a})->{s_next}"
            )
        m = min(batch, cap - attempts)
        g = rng.gumbel(size=(m, num_states))
        keep = np.argmax(logp[None, :] + g[:, idx], axis=1) == obs_pos
        accept_rows = np.flatnonzero(keep)
        need = n - got
        if accept_rows.shape[0] >= need:
            # Count only proposals up to and including the final acceptance, so
            # the reported attempt count reflects true rejection-sampling cost.
            attempts += int(accept_rows[need - 1]) + 1
            accept_rows = accept_rows[:need]
        else:
            attempts += m
        take = g[accept_rows]
        out[got: got + take.shape[0]] = take
        got += take.shape[0]
    return out, attempts


def _topdown_noise(mdp: Mdp, s: State, a: Action, s_next: State, n: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Exact posterior vectors without rejection (top-down construction).

    The maximum of the probability-shifted Gumbels is sampled first and
    assigned to the observed state; the remaining support states get Gumbels
    truncated below that maximum; off-support states keep fresh priors.
    """
    obs_pos = _check_observation(mdp, s, a, s_next)
    idx, _, logp = mdp.row_arrays(s, a)
    # Prior draws double as the off-support posterior (it equals the prior).
    out = rng.gumbel(size=(n, mdp.num_states))
    top = rng.gumbel(size=n) + float(np.logaddexp.reduce(logp))
    shifted = logp[None, :] + rng.gumbel(size=(n, idx.shape[0]))
    trunc = -np.logaddexp(-shifted, -top[:, None])
    out[:, idx] = trunc - logp[None, :]
    out[:, idx[obs_pos]] = top - logp[obs_pos]
    return out


def posterior_sample_rejection(mdp: Mdp, s: State, a: Action, s_next: State,
                               n: int, seed: int, return_attempts: bool = False):
    """n posterior noise vectors via rejection; expected cost n / P(s_next|s,a)."""
    rng = np.random.default_rng(seed)
    samples, attempts = _rejection_noise(mdp, s, a, s_next, n, rng)
    return (samples, attempts) if return_attempts else samples


def posterior_sample_topdown(mdp: Mdp, s: State, a: Action, s_next: State,
                             n: int, seed: int) -> np.ndarray:
    """n exact posterior noise vectors; distributionally equal to rejection."""
    rng = np.random.default_rng(seed)
    return _topdown_noise(mdp, s, a, s_next, n, rng)


@dataclass(frozen=True)
class GumbelPosterior:
    """Per-time-step posterior noise samples conditioned on an observed path.

    noise[t] has shape (n, |S|). Steps t < T-1 are conditioned on the observed
    transition (s_t, a_t, s_{t+1}); the final step has no observed successor
    and carries prior samples. Per-step RNG streams are derived from
    (seed, t), so construction is order-independent and parallelizable.
    """

    noise: tuple[np.ndarray, ...]
    n: int
    sampler: str
    seed: int
    path: ObservedPath
    source_mdp_hash: str

    @property
    def T(self) -> int:
        return len(self.noise)

    def vectors(self, t: int) -> np.ndarray:
        return self.noise[t]


def _step_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))


def build_posterior(mdp: Mdp, path: ObservedPath, n: int, sampler: str = SAMPLER_TOPDOWN,
                    seed: int = 0) -> GumbelPosterior:
    """Infer posterior noise for every step of the path (Markov factorization).

    Each step is conditioned independently on its own observed transition.
    Every returned sample provably replays the observed successor; this is
    asserted at build time so downstream replay determinism is exact.
    """
    if sampler not in (SAMPLER_TOPDOWN, SAMPLER_REJECTION, SAMPLER_PRIOR):
        raise ValidationFailed(f"unknown sampler {sampler!r}")
    layers: list[np.ndarray] = []
    for t in range(path.T):
        rng = _step_rng(seed, t)
        if t == path.T - 1 or sampler == SAMPLER_PRIOR:
            layers.append(rng.gumbel(size=(n, mdp.num_states)))
            continue
        s, a = path.steps[t]
        s_next = path.state(t + 1)
        if sampler == SAMPLER_TOPDOWN:
            g = _topdown_noise(mdp, s, a, s_next, n, rng)
        else:
            g, _ = _rejection_noise(mdp, s, a, s_next, n, rng)
        obs_pos = _check_observation(mdp, s, a, s_next)
        if not np.all(_winners(mdp, s, a, g) == obs_pos):
            raise RuntimeError(f"posterior sample at t={t} fails to replay the observation")
        layers.append(g)
    return GumbelPosterior(tuple(layers), n, sampler, seed, path, mdp_hash(mdp))


def prior_posterior(mdp: Mdp, path: ObservedPath, n: int, seed: int = 0) -> GumbelPosterior:
    """Unconditioned noise for every step: the interventional counterpart."""
    return build_posterior(mdp, path, n, sampler=SAMPLER_PRIOR, seed=seed)


@dataclass(frozen=True)
class CfKernelEstimate:
    """Empirical counterfactual transition row at (t, s, a)."""

    t: int
    s: State
    a: Action
    probs: dict[State, float]
    n: int

    @property
    def support(self) -> tuple[State, ...]:
        return tuple(s for s, p in self.probs.items() if p > 0.0)

    def as_arrays(self, mdp: Mdp) -> tuple[np.ndarray, np.ndarray]:
        items = sorted(((mdp.state_index(s), p) for s, p in self.probs.items() if p > 0.0))
        idx = np.array([i for i, _ in items], dtype=np.int64)
        return idx, np.array([p for _, p in items], dtype=np.float64)


def cf_transition(posterior: GumbelPosterior, mdp: Mdp, t: int, s: State, a: Action) -> CfKernelEstimate:
    """Counterfactual row: the mechanism's empirical law over posterior samples.

    Support is always contained in the nominal support of P(.|s,a). Prefer
    CfMdp.kernel for repeated queries; it memoizes per (t, s, a).
    """
    if t >= posterior.T:
        raise ValidationFailed(f"time {t} outside posterior horizon {posterior.T}")
    idx, _, _ = mdp.row_arrays(s, a)
    wins = _winners(mdp, s, a, posterior.vectors(t))
    counts = np.bincount(wins, minlength=idx.shape[0])
    probs = {mdp.states[idx[i]]: counts[i] / posterior.n
             for i in range(idx.shape[0]) if counts[i] > 0}
    return CfKernelEstimate(t, s, a, probs, posterior.n)


@dataclass
class CfMdp:
    """Time-layered counterfactual MDP over nodes (state, t), t = 0..T.

    Initial mass sits entirely on (s_0, 0). Layer kernels are produced lazily
    through the posterior and memoized, since pruning and dynamic programming
    only touch a small fraction of (t, s, a) triples. With posterior=None the
    rows are the exact nominal kernel at every layer (the interventional MDP),
    which is useful for structural analysis and baselines.

    The memo table behaves as a thread-safe cache under CPython: entries are
    computed deterministically, so concurrent duplicate work yields identical
    values and dict assignment is atomic.
    """

    mdp: Mdp
    path: ObservedPath
    posterior: GumbelPosterior | None
    _cache: dict = field(default_factory=dict, repr=False)
    rows_built: int = 0

    def __post_init__(self):
        if self.posterior is not None:
            if self.posterior.path.steps != self.path.steps:
                raise ValidationFailed("posterior was built from a different path")
            if self.posterior.source_mdp_hash != mdp_hash(self.mdp):
                raise ValidationFailed("posterior was built from a different MDP")

    @property
    def horizon(self) -> int:
        return self.path.T

    @property
    def layer_count(self) -> int:
        return self.path.T + 1

    @property
    def initial_state(self) -> State:
        return self.path.state(0)

    def kernel(self, t: int, s: State, a: Action) -> CfKernelEstimate:
        key = (t, s, a)
        est = self._cache.get(key)
        if est is None:
            if t >= self.horizon:
                raise ValidationFailed(f"time {t} outside horizon {self.horizon}")
            if self.posterior is None:
                row = self.mdp.row(s, a)
                est = CfKernelEstimate(t, s, a, dict(row), 0)
            else:
                est = cf_transition(self.posterior, self.mdp, t, s, a)
            self._cache[key] = est
            self.rows_built += 1
        return est

    def support(self, t: int, s: State, a: Action) -> tuple[State, ...]:
        return self.kernel(t, s, a).support


def build_cf_mdp(posterior: GumbelPosterior, mdp: Mdp, path: ObservedPath) -> CfMdp:
    """Counterfactual MDP backed by the given posterior."""
    return CfMdp(mdp, path, posterior)


def nominal_cf_mdp(mdp: Mdp, path: ObservedPath) -> CfMdp:
    """Interventional layered MDP: nominal rows at every layer, no posterior."""
    return CfMdp(mdp, path, None)


# ---------------------------------------------------------------------------
# Posterior persistence (one artifact per (mdp, path, n, sampler, seed) key)
# ---------------------------------------------------------------------------

def posterior_cache_key(mdp: Mdp, path: ObservedPath, n: int, sampler: str, seed: int) -> str:
    blob = json.dumps(
        {"mdp": mdp_hash(mdp), "path": path_hash(path), "n": n,
         "sampler": sampler, "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_posterior(posterior: GumbelPosterior, file) -> None:
    from .mdp import path_to_json

    meta = {
        "n": posterior.n,
        "sampler": posterior.sampler,
        "seed": posterior.seed,
        "mdp_hash": posterior.source_mdp_hash,
        "path": path_to_json(posterior.path),
    }
    arrays = {f"g{t}": posterior.noise[t] for t in range(posterior.T)}
    np.savez_compressed(file, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_posterior(file) -> GumbelPosterior:
    from .mdp import path_from_json

    with np.load(file) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        noise = tuple(data[f"g{t}"] for t in range(len(meta["path"]["steps"])))
    return GumbelPosterior(
        noise=noise,
        n=int(meta["n"]),
        sampler=str(meta["sampler"]),
        seed=int(meta["seed"]),
        path=path_from_json(meta["path"]),
        source_mdp_hash=str(meta["mdp_hash"]),
    )
