"""Desk-scale task families with hidden multi-stage goal schedules.

Four kinematic families: 2-D point-robot navigation (single goal, optionally
Dirichlet-interpolated between the half-circle endpoints), 1-D velocity
tracking, 2-D direction following, and 2-D multi-goal navigation. Goals and
switch schedules are hidden from the agent; they reach observations only
through rewards. Episodes run exactly ``horizon`` steps; none of the families
terminates early, so bootstrap targets are never masked at truncation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TASKS_VERSION = "contextrl-tasks-v1"

FAMILIES = ("point_robot", "velocity", "direction", "goal")

POS_STEP = 0.1   # max per-dim position change per step (point_robot / goal)
VEL_STEP = 0.2   # max velocity change per step (velocity family)


@dataclass
class TaskSpec:
    """A sampled task: goal sequence, hidden switch schedule, family parameters."""

    family: str
    goals: list
    switch_steps: list[int]
    horizon: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if len(self.switch_steps) != len(self.goals) - 1:
            raise ValueError("need exactly len(goals)-1 switch steps")
        if any(not (0 < s < self.horizon) for s in self.switch_steps):
            raise ValueError("switch steps must lie strictly inside the episode")
        if sorted(set(self.switch_steps)) != list(self.switch_steps):
            raise ValueError("switch steps must be strictly increasing")

    def goal_at(self, t: int):
        """Active goal for step index t (switches when t crosses a switch step)."""
        idx = int(np.searchsorted(self.switch_steps, t, side="right"))
        return self.goals[idx]

    def goal_index_at(self, t: int) -> int:
        return int(np.searchsorted(self.switch_steps, t, side="right"))


@dataclass
class EnvState:
    """Kinematic state plus step counter; the active goal index stays hidden."""

    task: TaskSpec
    kin: np.ndarray
    t: int

    @property
    def active_goal_index(self) -> int:
        return self.task.goal_index_at(min(self.t, self.task.horizon - 1))


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    clipped: bool = False


def obs_dim(family: str) -> int:
    return 1 if family == "velocity" else 2


def action_dim(family: str) -> int:
    return 1 if family == "velocity" else 2


def _velocity_bounds(task: TaskSpec):
    a = task.params.get("min_goal", -1.0)
    b = task.params.get("max_goal", 3.0)
    return min(a, 0.0), max(b, 0.0)


def _reach(task: TaskSpec) -> float:
    return 2.0 * task.params.get("radius", 1.0)


def reset(task: TaskSpec, rng: np.random.Generator | None = None):
    """Initial state: origin / zero velocity; returns (state, observation)."""
    kin = np.zeros(obs_dim(task.family))
    state = EnvState(task=task, kin=kin, t=0)
    return state, kin.copy()


def step(state: EnvState, action: np.ndarray):
    """Advance one step; reward is evaluated at the post-update state against
    the goal active at the current step index."""
    task = state.task
    if state.t >= task.horizon:
        raise ValueError("episode already finished")
    action = np.asarray(action, float)
    if action.shape != (action_dim(task.family),):
        raise ValueError(f"action shape {action.shape} invalid for {task.family}")
    clipped = bool(np.any(np.abs(action) > 1.0 + 1e-12))
    a = np.clip(action, -1.0, 1.0)
    goal = task.goal_at(state.t)

    if task.family == "velocity":
        lo, hi = _velocity_bounds(task)
        v = float(np.clip(state.kin[0] + VEL_STEP * a[0], lo, hi))
        kin = np.array([v])
        reward = -abs(v - goal)
    elif task.family in ("point_robot", "goal"):
        reach = _reach(task)
        kin = np.clip(state.kin + POS_STEP * a, -reach, reach)
        reward = -float(np.linalg.norm(kin - np.asarray(goal)))
    else:  # direction
        speed = np.linalg.norm(a)
        vel = a / max(1.0, speed)
        kin = vel
        reward = float(vel @ np.asarray(goal))

    t = state.t + 1
    new_state = EnvState(task=task, kin=kin, t=t)
    return new_state, StepResult(kin.copy(), float(reward), t == task.horizon, clipped)


def greedy_action(state: EnvState) -> np.ndarray:
    """Goal-aware scripted policy: move straight at the active goal."""
    task = state.task
    goal = task.goal_at(state.t)
    if task.family == "velocity":
        return np.clip(np.array([(goal - state.kin[0]) / VEL_STEP]), -1.0, 1.0)
    if task.family in ("point_robot", "goal"):
        return np.clip((np.asarray(goal) - state.kin) / POS_STEP, -1.0, 1.0)
    return np.asarray(goal, float)


# ---------------------------------------------------------------------------
# task sampling
# ---------------------------------------------------------------------------

def _sample_switches(horizon: int, n_goals: int, rng: np.random.Generator) -> list[int]:
    if n_goals == 1:
        return []
    lo, hi = horizon // 5, 4 * horizon // 5
    if hi - lo + 1 < n_goals - 1:
        raise ValueError("horizon too short for the requested number of sub-tasks")
    picks = rng.choice(np.arange(lo, hi + 1), size=n_goals - 1, replace=False)
    return sorted(int(s) for s in picks)


def _sample_one(family: str, horizon: int, params: dict, rng: np.random.Generator) -> TaskSpec:
    n_lo = params.get("n_subtasks_min", 1 if family == "point_robot" else 2)
    n_hi = params.get("n_subtasks_max", 1 if family == "point_robot" else 3)
    if not (1 <= n_lo <= n_hi):
        raise ValueError("invalid sub-task count range")
    n_goals = int(rng.integers(n_lo, n_hi + 1))

    if family == "velocity":
        a, b = params.get("min_goal", -1.0), params.get("max_goal", 3.0)
        if a >= b:
            raise ValueError(f"need min_goal < max_goal, got ({a}, {b})")
        choices = params.get("goal_choices")
        if choices is not None:
            arr = np.asarray(choices, float)
            goals = []
            for _ in range(n_goals):
                g = float(rng.choice(arr))
                while len(arr) > 1 and goals and g == goals[-1]:
                    g = float(rng.choice(arr))  # the goal must actually shift
                goals.append(g)
        else:
            goals = [float(rng.uniform(a, b)) for _ in range(n_goals)]
    elif family == "direction":
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_goals)
        goals = [np.array([np.cos(t), np.sin(t)]) for t in angles]
    elif family == "goal":
        r = params.get("radius", 1.0)
        if r <= 0:
            raise ValueError(f"radius must be > 0, got {r}")
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n_goals)
        goals = [r * np.array([np.cos(t), np.sin(t)]) for t in angles]
    else:  # point_robot: single goal on (or interpolated across) the half circle
        r = params.get("radius", 1.0)
        if r <= 0:
            raise ValueError(f"radius must be > 0, got {r}")
        n_goals = 1
        if params.get("goal_mode", "arc") == "dirichlet":
            w = rng.dirichlet([0.2, 0.2])
            goals = [dirichlet_interpolated_goal(w, r)]
        else:
            t = rng.uniform(0.0, np.pi)
            goals = [r * np.array([np.cos(t), np.sin(t)])]

    return TaskSpec(family=family, goals=goals,
                    switch_steps=_sample_switches(horizon, len(goals), rng),
                    horizon=horizon, params=dict(params))


def dirichlet_interpolated_goal(weights, radius: float = 1.0) -> np.ndarray:
    """Interpolation between the half-circle endpoints (r,0) and (-r,0)."""
    w = np.asarray(weights, float)
    e1 = np.array([radius, 0.0])
    e2 = np.array([-radius, 0.0])
    return w[0] * e1 + w[1] * e2


def sample_tasks(family: str, n_train: int, n_test: int, horizon: int,
                 params: dict | None = None, rng: np.random.Generator | None = None):
    """Fixed train and test task sets drawn once before training.

    With a finite ``goal_choices`` set whose size equals the requested count,
    goals are enumerated instead of sampled (the two-task forward/backward
    setup); test tasks then repeat the same finite family.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test task")
    params = dict(params or {})
    rng = rng or np.random.default_rng(0)

    choices = params.get("goal_choices")
    single = params.get("n_subtasks_min", 2) == 1 and params.get("n_subtasks_max", 2) == 1
    if family == "velocity" and choices is not None and single and len(choices) == n_train:
        train = [TaskSpec("velocity", [float(g)], [], horizon, dict(params)) for g in choices]
        test = [TaskSpec("velocity", [float(g)], [], horizon, dict(params))
                for g in list(choices)[:n_test]]
        return train, test

    train = [_sample_one(family, horizon, params, rng) for _ in range(n_train)]
    test = [_sample_one(family, horizon, params, rng) for _ in range(n_test)]
    return train, test


# ---------------------------------------------------------------------------
# oracle upper bound
# ---------------------------------------------------------------------------

def oracle_return(task: TaskSpec) -> float:
    """Return of the goal-aware optimal play, via an exact convex program.

    Greedy per-sub-task play is a feasible point but not always optimal (it
    cannot pre-position before a switch), so the bound is computed as the
    exact optimum over all dynamically feasible trajectories; every policy's
    realized return is <= this value.
    """
    if task.family == "direction":
        # per-step reward is velocity . unit-goal <= 1 for every step
        return float(task.horizon)
    goals = np.array([np.atleast_1d(np.asarray(task.goal_at(t), float)) for t in range(task.horizon)])
    if task.family == "velocity":
        return -_velocity_opt(goals[:, 0], *_velocity_bounds(task))
    return -_position_opt(goals, _reach(task))


def _velocity_opt(goal_per_step: np.ndarray, lo: float, hi: float) -> float:
    """min sum |v_t - g_t| s.t. |v_{t+1}-v_t| <= VEL_STEP, v in [lo,hi], v_0=0."""
    from scipy.optimize import linprog

    H = len(goal_per_step)
    n = 2 * H  # [v_1..v_H, e_1..e_H]
    c = np.concatenate([np.zeros(H), np.ones(H)])
    rows, cols, vals, rhs = [], [], [], []

    def add(row_entries, b):
        r = len(rhs)
        for col, v in row_entries:
            rows.append(r)
            cols.append(col)
            vals.append(v)
        rhs.append(b)

    for t in range(H):
        add([(t, 1.0), (H + t, -1.0)], goal_per_step[t])      # v_t - e_t <= g_t
        add([(t, -1.0), (H + t, -1.0)], -goal_per_step[t])    # -v_t - e_t <= -g_t
        # |v_t - v_{t-1}| <= VEL_STEP with v_0 = 0
        add([(t, 1.0)] + ([(t - 1, -1.0)] if t else []), VEL_STEP)
        add([(t, -1.0)] + ([(t - 1, 1.0)] if t else []), VEL_STEP)
    from scipy.sparse import coo_matrix

    A = coo_matrix((vals, (rows, cols)), shape=(len(rhs), n))
    bounds = [(lo, hi)] * H + [(0, None)] * H
    res = linprog(c, A_ub=A, b_ub=np.array(rhs), bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"velocity oracle LP failed: {res.message}")
    return float(res.fun)


def _position_opt(goal_per_step: np.ndarray, reach: float) -> float:
    """min sum ||p_t - g_t||_2 with per-dim step <= POS_STEP, |p| <= reach, p_0 = 0."""
    import cvxpy as cp

    H = goal_per_step.shape[0]
    p = cp.Variable((H, 2))
    cons = [cp.abs(p[0]) <= POS_STEP, cp.abs(p) <= reach]
    if H > 1:
        cons.append(cp.abs(p[1:] - p[:-1]) <= POS_STEP)
    obj = cp.Minimize(cp.sum(cp.norm(p - goal_per_step, 2, axis=1)))
    prob = cp.Problem(obj, cons)
    prob.solve()
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"position oracle failed: {prob.status}")
    return float(prob.value)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _task_to_dict(task: TaskSpec) -> dict:
    return {
        "family": task.family,
        "goals": [np.asarray(g, float).tolist() for g in task.goals],
        "switch_steps": list(task.switch_steps),
        "horizon": task.horizon,
        "params": {k: v for k, v in task.params.items() if v is not None},
    }


def _task_from_dict(d: dict) -> TaskSpec:
    goals = [g if isinstance(g, float) else np.asarray(g, float) for g in d["goals"]]
    if d["family"] == "velocity":
        goals = [float(np.asarray(g).reshape(-1)[0]) for g in d["goals"]]
    return TaskSpec(d["family"], goals, [int(s) for s in d["switch_steps"]],
                    int(d["horizon"]), dict(d.get("params", {})))


def save_tasks(path, train: Sequence[TaskSpec], test: Sequence[TaskSpec], seed: int) -> None:
    doc = {
        "version": TASKS_VERSION,
        "seed": int(seed),
        "train": [_task_to_dict(t) for t in train],
        "test": [_task_to_dict(t) for t in test],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_tasks(path):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != TASKS_VERSION:
        raise ValueError(f"unsupported task file version {doc.get('version')!r}")
    return ([_task_from_dict(d) for d in doc["train"]],
            [_task_from_dict(d) for d in doc["test"]],
            int(doc["seed"]))
