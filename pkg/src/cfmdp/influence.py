"""Influence sets and pruning of the counterfactual MDP.

A transition is 1-step influenced at time t when its nominal support overlaps
the support of the observed transition at t. The k-step relaxation admits a
pair when some nominal continuation of at most k-1 further steps contains an
influenced pair. Pairs in the last k-1 decision steps (t >= T-k+1) are always
admitted: the remaining path is too short to decide influence, so it is
granted conservatively.

Two admission modes are provided:

* "strict" (default): influence is checked per time layer, exactly as the
  1-step definition is stated. This reproduces the worked toy example
  (S-sets and pruned sets) exactly.
* "pooled": the union S^tau of all observed supports replaces the per-layer
  sets; a pair is admitted when its source and entire nominal support lie in
  the reverse-BFS set S^{tau,k}. This is the coarser formulation the reverse
  BFS suggests, kept for comparison.

After admission, the counterfactual MDP is reduced to a closed, reachable
sub-MDP: actions whose counterfactual successors can leak outside are deleted,
dead nodes cascade backwards, and only nodes forward-reachable from (s_0, 0)
remain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyPrunedMdp, ValidationFailed
from .gumbel import CfKernelEstimate, CfMdp
from .mdp import Action, Mdp, ObservedPath, State

MODE_STRICT = "strict"
MODE_POOLED = "pooled"


@dataclass(frozen=True)
class InfluenceSets:
    """Observed-support sets S^tau_t, their union, and the reachback set."""

    per_time: tuple[frozenset[State], ...]
    pooled: frozenset[State]
    path_states: frozenset[State]
    k: int | None = None
    reachback_states: frozenset[State] | None = None


def one_step_influenced(mdp: Mdp, path: ObservedPath, t: int, s: State, a: Action) -> bool:
    """Whether supp P(.|s,a) overlaps supp P(.|s_t,a_t) (time-indexed form)."""
    if t >= path.T:
        raise ValidationFailed(f"time {t} outside path horizon {path.T}")
    obs_s, obs_a = path.steps[t]
    obs = mdp.row(obs_s, obs_a)
    return any(s2 in obs for s2 in mdp.row(s, a))


def influenced_states(mdp: Mdp, path: ObservedPath) -> InfluenceSets:
    """S^tau_t = support of the observed row at t; pooled union across t."""
    per_time = tuple(frozenset(mdp.row(s, a)) for s, a in path.steps)
    pooled = frozenset().union(*per_time) if per_time else frozenset()
    return InfluenceSets(per_time, pooled, path.visited_states)


def _predecessors(mdp: Mdp) -> dict[State, set[State]]:
    pred: dict[State, set[State]] = {s: set() for s in mdp.states}
    for (s, _a), row in mdp.kernel.items():
        for s2 in row:
            pred[s2].add(s)
    return pred


def reachback(mdp: Mdp, sets: InfluenceSets, k: int) -> InfluenceSets:
    """S^{tau,k}: S^tau plus states within k reverse-BFS steps of it.

    States already on the observed path are not added by the BFS: every
    non-initial path state sits in S^tau anyway (it is the realized successor
    of the previous step), and the worked example counts the sets this way.
    The pruner re-admits observed path nodes explicitly regardless.
    """
    if k < 1:
        raise ValidationFailed("reachback requires k >= 1")
    pred = _predecessors(mdp)
    frontier = set(sets.pooled)
    found: set[State] = set()
    for _ in range(k):
        frontier = {p for s in frontier for p in pred[s]} - found - sets.pooled
        if not frontier:
            break
        found |= frontier
    added = frozenset(found - sets.path_states)
    return InfluenceSets(sets.per_time, sets.pooled, sets.path_states,
                         k=k, reachback_states=sets.pooled | added)


@dataclass(frozen=True)
class SizeReport:
    """Pruned-MDP size figures, one row of the Table-1-style CSV."""

    k: int
    nodes_all_layers: int
    nodes_reachable: int
    distinct_states: int


@dataclass
class PrunedCfMdp:
    """Closed, reachable restriction of a counterfactual MDP.

    `layers[t]` lists the allowed states of decision layer t (t = 0..T-1); the
    terminal layer T is implicit and unrestricted (influence is always granted
    at the horizon boundary). `actions[(s, t)]` is the allowed action tuple at
    an allowed node: every counterfactual successor of an allowed action is
    itself allowed (no probability mass leaks outside).
    """

    cf: CfMdp
    k: int
    mode: str
    layers: tuple[frozenset[State], ...]
    actions: dict[tuple[State, int], tuple[Action, ...]]
    nodes_all_layers: int

    @property
    def horizon(self) -> int:
        return self.cf.horizon

    @property
    def initial_state(self) -> State:
        return self.cf.initial_state

    def allowed_node(self, s: State, t: int) -> bool:
        return t < self.horizon and s in self.layers[t]

    def allowed_actions(self, s: State, t: int) -> tuple[Action, ...]:
        return self.actions.get((s, t), ())

    def kernel(self, t: int, s: State, a: Action) -> CfKernelEstimate:
        return self.cf.kernel(t, s, a)

    @property
    def allowed_states(self) -> frozenset[State]:
        return frozenset().union(*self.layers) if self.layers else frozenset()


class _Admission:
    """Pair admission test for one (path, k, mode) pruning run."""

    def __init__(self, mdp: Mdp, path: ObservedPath, k: int, mode: str):
        self.mdp = mdp
        self.path = path
        self.k = k
        self.mode = mode
        self.T = path.T
        self.free_from = self.T - k + 1  # steps t >= free_from are always admitted
        sets = influenced_states(mdp, path)
        n = mdp.num_states
        self._stau_t = []
        for t in range(self.T):
            mask = np.zeros(n, dtype=bool)
            mask[[mdp.state_index(s) for s in sets.per_time[t]]] = True
            self._stau_t.append(mask)
        if mode == MODE_POOLED:
            rb = reachback(mdp, sets, k)
            mask = np.zeros(n, dtype=bool)
            allowed = set(rb.reachback_states) | set(sets.path_states)
            mask[[mdp.state_index(s) for s in allowed]] = True
            self._pooled = mask
        elif mode == MODE_STRICT:
            self._frontiers = self._influence_frontiers()
        else:
            raise ValidationFailed(f"unknown pruning mode {mode!r}")

    def _influence_frontiers(self) -> list[list[np.ndarray]]:
        """M[d][t]: states at layer t with an influenced pair within d steps."""
        mdp, T = self.mdp, self.T
        n = mdp.num_states
        i1 = []
        for t in range(T):
            mask = np.zeros(n, dtype=bool)
            for s in mdp.states:
                for a in mdp.available_actions(s):
                    idx, _, _ = mdp.row_arrays(s, a)
                    if self._stau_t[t][idx].any():
                        mask[mdp.state_index(s)] = True
                        break
            i1.append(mask)
        frontiers: list[list[np.ndarray]] = [[np.zeros(n, dtype=bool)] * T, i1]
        for d in range(2, self.k):
            prev = frontiers[d - 1]
            layer = []
            for t in range(T):
                mask = i1[t].copy()
                if t + 1 < T:
                    nxt = prev[t + 1]
                    for s in mdp.states:
                        si = mdp.state_index(s)
                        if mask[si]:
                            continue
                        for a in mdp.available_actions(s):
                            idx, _, _ = mdp.row_arrays(s, a)
                            if nxt[idx].any():
                                mask[si] = True
                                break
                layer.append(mask)
            frontiers.append(layer)
        return frontiers

    def admitted(self, s: State, a: Action, t: int) -> bool:
        if t >= self.free_from:
            return True
        idx, _, _ = self.mdp.row_arrays(s, a)
        if self.mode == MODE_POOLED:
            return bool(self._pooled[self.mdp.state_index(s)] and self._pooled[idx].all())
        if self._stau_t[t][idx].any():
            return True
        if self.k >= 2 and t + 1 < self.T:
            return bool(self._frontiers[self.k - 1][t + 1][idx].any())
        return False


def prune_cf_mdp(cf: CfMdp, mdp: Mdp, path: ObservedPath, k: int,
                 mode: str = MODE_STRICT) -> PrunedCfMdp:
    """Restrict `cf` to k-step-influenced transitions, then close and trim.

    Admission is decided on the nominal transition graph (the influence
    definitions live there); closure and reachability run on the
    counterfactual supports, which are subsets of the nominal ones.
    """
    if k < 1:
        raise ValidationFailed("pruning requires k >= 1")
    T = path.T
    adm = _Admission(mdp, path, k, mode)

    # Forward sweep: candidate nodes reachable through admitted pairs.
    candidates: list[set[State]] = [set() for _ in range(T + 1)]
    candidates[0] = {path.state(0)}
    admitted_pairs: dict[int, list[tuple[State, Action]]] = {t: [] for t in range(T)}
    for t in range(T):
        for s in sorted(candidates[t], key=mdp.state_index):
            for a in mdp.available_actions(s):
                if adm.admitted(s, a, t):
                    admitted_pairs[t].append((s, a))
                    candidates[t + 1].update(cf.support(t, s, a))

    # Backward closure: drop actions that can leak onto dead nodes; a node with
    # no surviving action is dead and cascades to its predecessors.
    alive: list[set[State]] = [set() for _ in range(T + 1)]
    alive[T] = set(mdp.states)  # horizon boundary: influence always granted
    usable: dict[tuple[State, int], list[Action]] = {}
    for t in range(T - 1, -1, -1):
        for s, a in admitted_pairs[t]:
            if all(s2 in alive[t + 1] for s2 in cf.support(t, s, a)):
                usable.setdefault((s, t), []).append(a)
                alive[t].add(s)

    if (path.state(0), 0) not in usable:
        raise EmptyPrunedMdp(
            f"k={k} pruning left no usable action at the initial node; "
            "the counterfactual kernel is inconsistent with the path"
        )

    # Forward reachability over usable pairs; successors are alive by closure.
    reach: list[set[State]] = [set() for _ in range(T)]
    reach[0] = {path.state(0)}
    for t in range(T - 1):
        for s in reach[t]:
            for a in usable.get((s, t), ()):
                reach[t + 1].update(s2 for s2 in cf.support(t, s, a) if s2 in alive[t + 1])

    actions = {
        (s, t): tuple(sorted(usable[(s, t)], key=mdp.action_index))
        for t in range(T) for s in reach[t] if (s, t) in usable
    }
    layers = tuple(frozenset(reach[t]) for t in range(T))

    return PrunedCfMdp(
        cf=cf, k=k, mode=mode, layers=layers, actions=actions,
        nodes_all_layers=_count_all_layers(mdp, adm, T),
    )


def _count_all_layers(mdp: Mdp, adm: _Admission, T: int) -> int:
    """Admitted (state, layer) count before reachability, terminal layer included.

    This is the Table-1 convention: at k = T+1 it equals |S| * (T+1).
    """
    total = 0
    terminal: set[int] = set()
    for t in range(T):
        for s in mdp.states:
            acts = [a for a in mdp.available_actions(s) if adm.admitted(s, a, t)]
            if acts:
                total += 1
                if t == T - 1:
                    for a in acts:
                        idx, _, _ = mdp.row_arrays(s, a)
                        terminal.update(int(i) for i in idx)
    return total + len(terminal)


def pruned_size_report(pruned: PrunedCfMdp) -> SizeReport:
    nodes = sum(len(layer) for layer in pruned.layers)
    return SizeReport(
        k=pruned.k,
        nodes_all_layers=pruned.nodes_all_layers,
        nodes_reachable=nodes,
        distinct_states=len(pruned.allowed_states),
    )
