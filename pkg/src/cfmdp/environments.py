"""Built-in MDPs: grid world, hypergeometric epidemic, and a documented
sepsis-lite patient model, with the sub-optimal observed policies used to
generate observed paths.

Sepsis-lite is an original model honoring the published constraints (four
three-level vitals, three binary treatments in the state, 8 actions, death at
three abnormal vitals, rewards scaled to [-1000, 1000]); it does not claim
equivalence to any other simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

from .errors import InvalidConfig, UnknownEnvironment
from .mdp import Action, Mdp, ObservedPath, Policy, State, sample_path

# Seeds frozen so the shipped observed paths match the documented trajectories
# (epidemic: infected counts 1,2,3,6,8,9,9; sepsis: one dead-end path and one
# surviving suboptimal path).
GRIDWORLD_OBSERVED_SEED = 0
EPIDEMIC_OBSERVED_SEED = 10
SEPSIS_CATASTROPHIC_SEED = 0
SEPSIS_SUBOPTIMAL_SEED = 3


# ---------------------------------------------------------------------------
# Grid world
# ---------------------------------------------------------------------------

MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
_PERP = {"up": ("left", "right"), "down": ("left", "right"),
         "left": ("up", "down"), "right": ("up", "down")}


@dataclass(frozen=True)
class GridWorldConfig:
    width: int = 4
    height: int = 4
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (3, 3)
    danger: tuple[int, int] = (1, 2)
    # Movement is deterministic by default; with slip > 0 the agent deviates to
    # a perpendicular direction with probability slip (split evenly).
    slip: float = 0.0
    # Per-step penalty per Manhattan distance unit. Steep enough that loitering
    # next to the danger cell never beats heading for the goal.
    shaping_scale: float = 4.0
    goal_reward: float = 100.0
    danger_penalty: float = 100.0
    horizon: int = 11


def _cell_label(r: int, c: int) -> State:
    return f"r{r}c{c}"


def _parse_cell(label: State) -> tuple[int, int]:
    r, c = label[1:].split("c")
    return int(r), int(c)


def build_gridworld(cfg: GridWorldConfig = GridWorldConfig()) -> Mdp:
    """4x4-style grid: shaping toward the goal, +goal/-danger entry bonuses.

    Goal and danger cells are absorbing with a dedicated no-op action and zero
    post-terminal reward. Entry bonuses are folded into R(s, a) in expectation
    over the slip outcomes.
    """
    if not (0.0 <= cfg.slip < 1.0):
        raise InvalidConfig(f"slip must be in [0, 1), got {cfg.slip}")
    if cfg.danger in (cfg.goal, cfg.start) or cfg.goal == cfg.start:
        raise InvalidConfig("start, goal and danger cells must be distinct")
    for cell in (cfg.start, cfg.goal, cfg.danger):
        if not (0 <= cell[0] < cfg.height and 0 <= cell[1] < cfg.width):
            raise InvalidConfig(f"cell {cell} outside the grid")

    cells = [(r, c) for r in range(cfg.height) for c in range(cfg.width)]
    states = tuple(_cell_label(r, c) for r, c in cells)
    actions = ("up", "down", "left", "right", "stay")
    terminal = {cfg.goal, cfg.danger}

    def step(cell, direction):
        r, c = cell
        dr, dc = MOVES[direction]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < cfg.height and 0 <= c2 < cfg.width:
            return (r2, c2)
        return cell  # bump against the wall

    def dist_to_goal(cell):
        return abs(cell[0] - cfg.goal[0]) + abs(cell[1] - cfg.goal[1])

    kernel: dict[tuple[State, Action], dict[State, float]] = {}
    rewards: dict[tuple[State, Action], float] = {}
    for cell in cells:
        label = _cell_label(*cell)
        if cell in terminal:
            kernel[(label, "stay")] = {label: 1.0}
            rewards[(label, "stay")] = 0.0
            continue
        for a in MOVES:
            row: dict[State, float] = {}
            outcomes = [(step(cell, a), 1.0 - cfg.slip)]
            for perp in _PERP[a]:
                outcomes.append((step(cell, perp), cfg.slip / 2.0))
            for dest, p in outcomes:
                if p <= 0.0:
                    continue
                row[_cell_label(*dest)] = row.get(_cell_label(*dest), 0.0) + p
            kernel[(label, a)] = row
            bonus = 0.0
            for dest, p in outcomes:
                if dest == cfg.goal:
                    bonus += p * cfg.goal_reward
                elif dest == cfg.danger:
                    bonus -= p * cfg.danger_penalty
            rewards[(label, a)] = -cfg.shaping_scale * dist_to_goal(cell) + bonus

    return Mdp(states, actions, kernel, rewards,
               initial={_cell_label(*cfg.start): 1.0}, name="gridworld")


def gridworld_observed_policy(cfg: GridWorldConfig = GridWorldConfig()) -> Policy:
    """Scripted walk that enters the danger cell at step 3, then idles.

    Off-script states fall back to a greedy move toward the goal so the policy
    is defined wherever slippage might lead.
    """
    script = {0: "right", 1: "right", 2: "down"}

    def fn(s: State, t: int) -> Action:
        cell = _parse_cell(s)
        if cell in (cfg.goal, cfg.danger):
            return "stay"
        if t in script:
            return script[t]
        gr, gc = cfg.goal
        r, c = cell
        if r < gr:
            return "down"
        if c < gc:
            return "right"
        return "up" if r > gr else "left"

    return Policy(fn)


def gridworld_features(cfg: GridWorldConfig = GridWorldConfig()):
    def dist_to_goal(s: State) -> float:
        r, c = _parse_cell(s)
        return float(abs(r - cfg.goal[0]) + abs(c - cfg.goal[1]))

    def in_danger(s: State) -> float:
        return 1.0 if _parse_cell(s) == cfg.danger else 0.0

    return {"dist_to_goal": dist_to_goal, "in_danger": in_danger}


# ---------------------------------------------------------------------------
# Epidemic (hypergeometric infection model)
# ---------------------------------------------------------------------------

NIL, V_I, V_S = "NIL", "V_I", "V_S"


@dataclass(frozen=True)
class EpidemicConfig:
    population: int = 10
    initial_infected: int = 1
    horizon: int = 7


def _hypergeom_pmf(k: int, M: int, n: int, N: int) -> float:
    """P[X = k] for X ~ Hypergeometric(M, n, N); exact integer arithmetic."""
    if k < 0 or k > n or N - k > M - n or N - k < 0:
        return 0.0
    return math.comb(n, k) * math.comb(M - n, N - k) / math.comb(M, N)


def _epi_label(s: int, i: int, v: int) -> State:
    return f"S{s}I{i}V{v}"


def epidemic_counts(label: State) -> tuple[int, int, int]:
    s, rest = label[1:].split("I")
    i, v = rest.split("V")
    return int(s), int(i), int(v)


def build_epidemic(cfg: EpidemicConfig = EpidemicConfig()) -> Mdp:
    """Exact transition rows of the vaccination MDP.

    Doing nothing keeps the vaccine stock and infects k ~ Hypergeom(S+I,
    min(S, I), S) susceptibles; vaccinating removes the vaccinated individual
    from the population permanently and draws infections from the reduced
    pool. Vaccination actions exist only while stock and targets remain.
    Reward is -I for every action.
    """
    P = cfg.population
    if P < 1 or not (0 <= cfg.initial_infected <= P):
        raise InvalidConfig("population must be >= 1 and 0 <= I0 <= population")
    states = tuple(
        _epi_label(s, i, v)
        for s in range(P + 1) for i in range(P + 1 - s) for v in range(2 * P + 1)
    )
    kernel: dict[tuple[State, Action], dict[State, float]] = {}
    rewards: dict[tuple[State, Action], float] = {}
    for label in states:
        S, I, V = epidemic_counts(label)
        rows: dict[Action, dict[State, float]] = {}
        rows[NIL] = {
            _epi_label(S - k, I + k, V): p
            for k in range(S + 1)
            if (p := _hypergeom_pmf(k, S + I, min(S, I), S)) > 0.0
        }
        if I >= 1 and V >= 1:
            rows[V_I] = {
                _epi_label(S - k, I - 1 + k, V - 1): p
                for k in range(S + 1)
                if (p := _hypergeom_pmf(k, S + I - 1, min(S, I - 1), S)) > 0.0
            }
        if S >= 1 and V >= 1:
            rows[V_S] = {
                _epi_label(S - 1 - k, I + k, V - 1): p
                for k in range(S)
                if (p := _hypergeom_pmf(k, S + I - 1, min(S - 1, I), S - 1)) > 0.0
            }
        for a, row in rows.items():
            kernel[(label, a)] = row
            rewards[(label, a)] = float(-I)

    s0 = _epi_label(P - cfg.initial_infected, cfg.initial_infected, 2 * P)
    return Mdp(states, (NIL, V_I, V_S), kernel, rewards, initial={s0: 1.0}, name="epidemic")


def epidemic_observed_policy() -> Policy:
    """The do-nothing policy used to generate the observed epidemic path."""
    return Policy.constant(NIL)


def epidemic_features():
    return {
        "infected": lambda s: float(epidemic_counts(s)[1]),
        "susceptible": lambda s: float(epidemic_counts(s)[0]),
        "vaccines": lambda s: float(epidemic_counts(s)[2]),
    }


# ---------------------------------------------------------------------------
# Sepsis-lite
# ---------------------------------------------------------------------------

LOW, NORMAL, HIGH = 0, 1, 2
_LEVEL_CHARS = "lnh"
VITALS = ("hr", "bp", "o2", "glu")
TREATMENTS = ("abx", "vaso", "vent")  # treatment j targets vital j; glucose drifts


@dataclass(frozen=True)
class SepsisLiteConfig:
    # Probability that an active treatment moves its target vital one level
    # toward normal in a step; normal vitals are held normal while treated.
    treat_effect: tuple[float, float, float] = (0.8, 0.8, 0.8)
    # Probability that an untreated normal vital leaves normal (split evenly
    # between low and high). Abnormal untreated vitals do not recover.
    flux: float = 0.22
    death_threshold: int = 3
    reward_scale: float = 1000.0
    horizon: int = 10
    start_vitals: tuple[int, int, int, int] = (NORMAL, LOW, NORMAL, NORMAL)


def _sepsis_label(vitals, flags) -> State:
    return "".join(_LEVEL_CHARS[v] for v in vitals) + "-" + "".join(str(b) for b in flags)


def sepsis_state_parts(label: State) -> tuple[tuple[int, ...], tuple[int, ...]]:
    vit_s, flag_s = label.split("-")
    return (tuple(_LEVEL_CHARS.index(ch) for ch in vit_s),
            tuple(int(b) for b in flag_s))


def abnormal_vitals(label: State) -> int:
    vitals, _ = sepsis_state_parts(label)
    return sum(1 for v in vitals if v != NORMAL)


def _action_label(bits) -> Action:
    return "t" + "".join(str(b) for b in bits)


def build_sepsis_lite(cfg: SepsisLiteConfig = SepsisLiteConfig()) -> Mdp:
    """Patient model over (4 vitals x 3 levels, 3 treatment flags); 8 actions.

    An action sets the treatment flags for the next state and its active
    treatments act on their target vitals immediately. Death (>= 3 abnormal
    vitals) and discharge (all normal, all treatments off) are absorbing under
    every action. Per-step reward is the end-scale divided by the horizon, so
    a full trajectory spans exactly [-1000, 1000]: constant death pays -1000,
    constant discharge +1000.
    """
    if not all(0.0 < p <= 1.0 for p in cfg.treat_effect):
        raise InvalidConfig("treatment effects must lie in (0, 1]")
    if not (0.0 <= cfg.flux < 1.0):
        raise InvalidConfig("flux must lie in [0, 1)")
    if sum(1 for v in cfg.start_vitals if v != NORMAL) >= cfg.death_threshold:
        raise InvalidConfig("start state would be dead on arrival")

    all_vitals = list(product((LOW, NORMAL, HIGH), repeat=4))
    all_flags = list(product((0, 1), repeat=3))
    states = tuple(_sepsis_label(v, f) for v in all_vitals for f in all_flags)
    action_bits = list(product((0, 1), repeat=3))
    actions = tuple(_action_label(b) for b in action_bits)

    def vital_dist(level: int, treated: bool, p_treat: float) -> dict[int, float]:
        if treated:
            if level == NORMAL:
                return {NORMAL: 1.0}
            return {NORMAL: p_treat, level: 1.0 - p_treat}
        if level == NORMAL and cfg.flux > 0.0:
            return {NORMAL: 1.0 - cfg.flux, LOW: cfg.flux / 2.0, HIGH: cfg.flux / 2.0}
        return {level: 1.0}

    def step_reward(vitals) -> float:
        abn = sum(1 for v in vitals if v != NORMAL)
        if abn >= cfg.death_threshold:
            return -cfg.reward_scale / cfg.horizon
        return (cfg.reward_scale - 500.0 * abn) / cfg.horizon

    kernel: dict[tuple[State, Action], dict[State, float]] = {}
    rewards: dict[tuple[State, Action], float] = {}
    for vitals in all_vitals:
        abn = sum(1 for v in vitals if v != NORMAL)
        dead = abn >= cfg.death_threshold
        for flags in all_flags:
            label = _sepsis_label(vitals, flags)
            discharged = abn == 0 and flags == (0, 0, 0)
            for bits in action_bits:
                a = _action_label(bits)
                if dead or discharged:
                    kernel[(label, a)] = {label: 1.0}
                    rewards[(label, a)] = step_reward(vitals)
                    continue
                dists = [
                    vital_dist(v, i < 3 and bits[i] == 1,
                               cfg.treat_effect[i] if i < 3 else 0.0)
                    for i, v in enumerate(vitals)
                ]
                row: dict[State, float] = {}
                for combo in product(*(d.items() for d in dists)):
                    nxt = tuple(lv for lv, _ in combo)
                    p = math.prod(pr for _, pr in combo)
                    dest = _sepsis_label(nxt, bits)
                    row[dest] = row.get(dest, 0.0) + p
                kernel[(label, a)] = row
                rewards[(label, a)] = step_reward(vitals)

    s0 = _sepsis_label(cfg.start_vitals, (0, 0, 0))
    return Mdp(states, actions, kernel, rewards, initial={s0: 1.0}, name="sepsis-lite")


def sepsis_observed_policy(preset: str) -> Policy:
    """Sub-optimal fixed policies behind the two documented regimes.

    "catastrophic" withholds all treatment, so the patient usually dies;
    "suboptimal" applies antibiotics only, which keeps the patient alive but
    untreated on the failing vital, ending neither dead nor discharged.
    """
    if preset == "catastrophic":
        return Policy.constant("t000")
    if preset == "suboptimal":
        return Policy.constant("t100")
    raise UnknownEnvironment(f"unknown sepsis preset {preset!r}")


def sepsis_features():
    return {"abnormal_vitals": lambda s: float(abnormal_vitals(s))}


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

ENVIRONMENTS = ("gridworld", "epidemic", "sepsis")


def build_environment(name: str, **overrides) -> Mdp:
    if name == "gridworld":
        return build_gridworld(GridWorldConfig(**overrides))
    if name == "epidemic":
        return build_epidemic(EpidemicConfig(**overrides))
    if name == "sepsis":
        return build_sepsis_lite(SepsisLiteConfig(**overrides))
    raise UnknownEnvironment(f"unknown environment {name!r}")


def observed_policy(env: str, preset: str | None = None) -> Policy:
    """The deliberately sub-optimal policy each experiment observes."""
    if env == "gridworld":
        return gridworld_observed_policy()
    if env == "epidemic":
        return epidemic_observed_policy()
    if env == "sepsis":
        return sepsis_observed_policy(preset or "catastrophic")
    raise UnknownEnvironment(f"unknown environment {env!r}")


def default_observation_seed(env: str, preset: str | None = None) -> int:
    if env == "gridworld":
        return GRIDWORLD_OBSERVED_SEED
    if env == "epidemic":
        return EPIDEMIC_OBSERVED_SEED
    if env == "sepsis":
        return SEPSIS_SUBOPTIMAL_SEED if preset == "suboptimal" else SEPSIS_CATASTROPHIC_SEED
    raise UnknownEnvironment(f"unknown environment {env!r}")


def default_horizon(env: str) -> int:
    horizons = {"gridworld": 11, "epidemic": 7, "sepsis": 10}
    if env not in horizons:
        raise UnknownEnvironment(f"unknown environment {env!r}")
    return horizons[env]


def environment_features(env: str) -> dict:
    if env == "gridworld":
        return gridworld_features()
    if env == "epidemic":
        return epidemic_features()
    if env == "sepsis":
        return sepsis_features()
    raise UnknownEnvironment(f"unknown environment {env!r}")


def default_feature(env: str) -> str:
    return {"gridworld": "dist_to_goal", "epidemic": "infected",
            "sepsis": "abnormal_vitals"}[env]


def demo_observation(env: str, preset: str | None = None,
                     seed: int | None = None) -> tuple[Mdp, ObservedPath, Policy]:
    """Default environment, observed policy and frozen-seed observed path."""
    mdp = build_environment(env)
    policy = observed_policy(env, preset)
    seed = default_observation_seed(env, preset) if seed is None else seed
    path = sample_path(mdp, policy, default_horizon(env), seed)
    return mdp, path, policy
