"""Tabletop block world with an enumerable action-legality structure.

Eight token types drive a gripper over a unit desk.  Each action token is a
4-vector: entry 0 encodes the token type on a uniform grid of levels in
(-1, 1), entries 1..3 are type-specific parameters (absolute targets for
``approach``/``place``, bounded deltas for ``move``/``push``, unused
otherwise).

Legality of consecutive token types is governed by a six-state abstract
machine over (holding, near).  The same predicates back the concrete
simulator, so the enumerated pair table is exactly the set of transitions
the simulator can ever accept.  Tasks are loaded from small declarative
``.task`` files shipped with the package.
"""

import hashlib
import importlib.resources
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import FusionSystem, Projector, fusion_system_from_transitions

TOKEN_TYPES = (
    "approach",
    "grasp",
    "lift",
    "move",
    "place",
    "release",
    "push",
    "noop",
)
APPROACH, GRASP, LIFT, MOVE, PLACE, RELEASE, PUSH, NOOP = range(8)
N_TYPES = len(TOKEN_TYPES)
D_ACTION = 4

# type t is encoded as level (2t + 1) / 8 - 1, a uniform grid spaced 0.25
TYPE_LEVELS = (2.0 * np.arange(N_TYPES) + 1.0) / N_TYPES - 1.0
TYPE_LEVELS.flags.writeable = False

NEAR_RADIUS = 0.05
MOVE_LIMIT = 0.25

_ZERO3 = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
_TARGET3 = ((0.0, 1.0), (0.0, 1.0), (0.0, 0.0))
_DELTA3 = ((-MOVE_LIMIT, MOVE_LIMIT), (-MOVE_LIMIT, MOVE_LIMIT), (0.0, 0.0))
PARAM_BOUNDS = np.array(
    [
        _TARGET3,  # approach
        _ZERO3,  # grasp
        _ZERO3,  # lift
        _DELTA3,  # move
        _TARGET3,  # place
        _ZERO3,  # release
        _DELTA3,  # push
        _ZERO3,  # noop
    ]
)
PARAM_BOUNDS.flags.writeable = False


class TaskSpecError(ValueError):
    pass


class DemoPlanningError(RuntimeError):
    pass


def type_level(type_id):
    return float(TYPE_LEVELS[type_id])


def nearest_type(x):
    """Nearest encoded type for a level value; ties resolve to the lower id."""
    raw = math.ceil(4.0 * (x + 1.0) - 1.0)
    return int(min(max(raw, 0), N_TYPES - 1))


def decode_types(params):
    """Unconstrained type ids from the level channel of an (H, 4) array."""
    params = np.asarray(params, dtype=np.float64)
    raw = np.ceil(4.0 * (params[:, 0] + 1.0) - 1.0)
    return np.clip(raw, 0, N_TYPES - 1).astype(int)


def clamp_params(type_id, params):
    params = np.asarray(params, dtype=np.float64).reshape(3)
    b = PARAM_BOUNDS[type_id]
    return np.clip(params, b[:, 0], b[:, 1])


@dataclass(frozen=True)
class Action:
    type_id: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0 <= self.type_id < N_TYPES:
            raise ValueError("unknown token type id %r" % (self.type_id,))
        p = np.array(self.params, dtype=np.float64).reshape(3)
        p.flags.writeable = False
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "type_id", int(self.type_id))

    @property
    def name(self):
        return TOKEN_TYPES[self.type_id]


def encode_actions(actions, horizon):
    """Pack actions into an (horizon, 4) array, padding with noop tokens."""
    if len(actions) > horizon:
        raise ValueError(
            "%d actions exceed horizon %d" % (len(actions), horizon)
        )
    out = np.zeros((horizon, D_ACTION))
    out[:, 0] = TYPE_LEVELS[NOOP]
    for i, a in enumerate(actions):
        out[i, 0] = TYPE_LEVELS[a.type_id]
        out[i, 1:] = a.params
    return out


def decode_actions(params, mask=None):
    """Decode an (H, 4) array into actions, honouring a transition mask.

    For every position the decoded type is the allowed type whose level is
    nearest to the encoded value; a type is allowed when the mask entry from
    the previously decoded type is positive.  The first token and the
    mask-free case are unconstrained.  Parameters are clamped to the decoded
    type's bounds, so decoded actions are always in-range.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != D_ACTION:
        raise ValueError("expected (H, %d) action array, got %s" % (D_ACTION, params.shape))
    m = None
    if mask is not None:
        m = mask.values if hasattr(mask, "values") else np.asarray(mask, dtype=np.float64)
        if m.shape != (N_TYPES, N_TYPES):
            raise ValueError("mask shape %s does not cover %d token types" % (m.shape, N_TYPES))
    actions = []
    prev = None
    for row in params:
        if m is None or prev is None:
            allowed = np.arange(N_TYPES)
        else:
            allowed = np.flatnonzero(m[prev] > 0.0)
        t = int(allowed[np.argmin(np.abs(row[0] - TYPE_LEVELS[allowed]))])
        actions.append(Action(t, clamp_params(t, row[1:])))
        prev = t
    labels = np.array([a.type_id for a in actions], dtype=int)
    return actions, labels


# ---------------------------------------------------------------------------
# abstract legality machine: states are (holding, near) with
# holding in {empty, lowered, lifted}


H_EMPTY, H_LOWERED, H_LIFTED = range(3)
ABSTRACT_STATES = tuple((h, n) for h in range(3) for n in range(2))


def abstract_legal(type_id, holding, near):
    if type_id == APPROACH:
        return holding != H_LOWERED
    if type_id == GRASP:
        return holding == H_EMPTY and bool(near)
    if type_id == LIFT:
        return holding == H_LOWERED
    if type_id == MOVE:
        return holding != H_LOWERED
    if type_id == PLACE:
        return holding == H_LIFTED
    if type_id == RELEASE:
        return holding == H_LOWERED
    if type_id == PUSH:
        return holding == H_EMPTY and bool(near)
    return True  # noop


def abstract_results(type_id, holding, near):
    """Possible successor states; nondeterministic where parameters decide."""
    if type_id in (APPROACH, MOVE):
        return [(holding, 0), (holding, 1)]
    if type_id == GRASP:
        return [(H_LOWERED, 0), (H_LOWERED, 1)]
    if type_id == LIFT:
        return [(H_LIFTED, near)]
    if type_id == PLACE:
        return [(H_LOWERED, 0), (H_LOWERED, 1)]
    if type_id in (RELEASE, PUSH):
        return [(H_EMPTY, 1)]
    return [(holding, near)]  # noop


def enumerate_legal_pairs():
    """0/1 table L[a, b]: some reachable state allows b right after a."""
    legal = np.zeros((N_TYPES, N_TYPES))
    for a in range(N_TYPES):
        for h, n in ABSTRACT_STATES:
            if not abstract_legal(a, h, n):
                continue
            for h2, n2 in abstract_results(a, h, n):
                for b in range(N_TYPES):
                    if abstract_legal(b, h2, n2):
                        legal[a, b] = 1.0
    return legal


def enumerate_continuations():
    """0/1 tensor N[c, a, b]: c can follow the consecutive pair (a, b).

    For pairs that can never occur legally the continuation set falls back
    to conditioning on ``b`` alone, so every pair keeps at least one valid
    continuation (``noop`` follows anything).
    """
    cont = np.zeros((N_TYPES, N_TYPES, N_TYPES))
    for a in range(N_TYPES):
        for h, n in ABSTRACT_STATES:
            if not abstract_legal(a, h, n):
                continue
            for h2, n2 in abstract_results(a, h, n):
                for b in range(N_TYPES):
                    if not abstract_legal(b, h2, n2):
                        continue
                    for h3, n3 in abstract_results(b, h2, n2):
                        for c in range(N_TYPES):
                            if abstract_legal(c, h3, n3):
                                cont[c, a, b] = 1.0
    after_b = np.zeros((N_TYPES, N_TYPES))
    for b in range(N_TYPES):
        for h, n in ABSTRACT_STATES:
            if not abstract_legal(b, h, n):
                continue
            for h2, n2 in abstract_results(b, h, n):
                for c in range(N_TYPES):
                    if abstract_legal(c, h2, n2):
                        after_b[c, b] = 1.0
    dead = cont.sum(axis=0) == 0.0
    for a, b in np.argwhere(dead):
        cont[:, a, b] = after_b[:, b]
    return cont


def type_channel_basis(horizon, d_action=D_ACTION):
    """Orthonormal rows selecting the type channel of each action token."""
    basis = np.zeros((horizon, horizon * d_action))
    for r in range(horizon):
        basis[r, r * d_action] = 1.0
    return basis


def build_fusion_system(horizon=20, d_action=D_ACTION):
    """Fusion system for the block world's transition structure.

    The fusion tensor is the delta-channel lift of the enumerated pair
    table; the single sector projector spans the type channel of the
    flattened (horizon, d_action) action array.
    """
    legal = enumerate_legal_pairs()
    cont = enumerate_continuations()
    proj = Projector(0, type_channel_basis(horizon, d_action).T)
    return fusion_system_from_transitions(legal, cont, projectors=[proj])


# ---------------------------------------------------------------------------
# concrete simulator


@dataclass
class WorldState:
    positions: np.ndarray  # (n_objects, 2)
    gripper: np.ndarray  # (2,)
    held: int | None = None
    lifted: bool = False
    steps: int = 0

    def copy(self):
        return WorldState(
            positions=self.positions.copy(),
            gripper=self.gripper.copy(),
            held=self.held,
            lifted=self.lifted,
            steps=self.steps,
        )

    @property
    def n_objects(self):
        return self.positions.shape[0]


def _nearest_free(state, radius):
    best, best_d = None, radius
    for i in range(state.n_objects):
        if i == state.held:
            continue
        d = float(np.linalg.norm(state.positions[i] - state.gripper))
        if d <= best_d:
            best, best_d = i, d
    return best


def oracle_step(state, action, near_radius=NEAR_RADIUS):
    """Apply one action; returns (new_state, violation_reason_or_None).

    On a violation the returned state is an unchanged copy.  Reasons are
    stable strings naming the broken precondition.
    """
    s = state.copy()
    t = action.type_id
    p = action.params

    if t == APPROACH:
        if s.held is not None and not s.lifted:
            return state.copy(), "drag-held-object"
        target = np.clip(p[:2], 0.0, 1.0)
        s.gripper = target.copy()
        if s.held is not None:
            s.positions[s.held] = target
    elif t == GRASP:
        if s.held is not None:
            return state.copy(), "grasp-while-holding"
        idx = _nearest_free(s, near_radius)
        if idx is None:
            return state.copy(), "grasp-nothing-near"
        s.held = idx
        s.lifted = False
        s.gripper = s.positions[idx].copy()
    elif t == LIFT:
        if s.held is None:
            return state.copy(), "lift-without-grasp"
        if s.lifted:
            return state.copy(), "lift-while-lifted"
        s.lifted = True
    elif t == MOVE:
        if s.held is not None and not s.lifted:
            return state.copy(), "drag-held-object"
        delta = np.clip(p[:2], -MOVE_LIMIT, MOVE_LIMIT)
        s.gripper = np.clip(s.gripper + delta, 0.0, 1.0)
        if s.held is not None:
            s.positions[s.held] = s.gripper.copy()
    elif t == PLACE:
        if s.held is None:
            return state.copy(), "place-without-hold"
        if not s.lifted:
            return state.copy(), "place-without-lift"
        if (p[:2] < 0.0).any() or (p[:2] > 1.0).any():
            return state.copy(), "place-out-of-bounds"
        s.gripper = p[:2].copy()
        s.positions[s.held] = p[:2].copy()
        s.lifted = False
    elif t == RELEASE:
        if s.held is None:
            return state.copy(), "release-without-hold"
        if s.lifted:
            return state.copy(), "release-while-lifted"
        s.held = None
    elif t == PUSH:
        if s.held is not None:
            return state.copy(), "push-while-holding"
        idx = _nearest_free(s, near_radius)
        if idx is None:
            return state.copy(), "push-nothing-near"
        delta = np.clip(p[:2], -MOVE_LIMIT, MOVE_LIMIT)
        s.positions[idx] = np.clip(s.positions[idx] + delta, 0.0, 1.0)
        s.gripper = s.positions[idx].copy()
    # noop falls through with no effect

    s.steps += 1
    return s, None


@dataclass(frozen=True)
class Observation:
    grid: np.ndarray  # (8, 8) occupancy image
    task_id: int
    proprio: np.ndarray  # (4,): gripper x, y, held flag, lifted flag


def observe(state, task):
    grid = np.zeros((8, 8))
    for pos in state.positions:
        col = min(int(pos[0] * 8.0), 7)
        row = min(int(pos[1] * 8.0), 7)
        grid[row, col] += 1.0
    gc = min(int(state.gripper[0] * 8.0), 7)
    gr = min(int(state.gripper[1] * 8.0), 7)
    grid[gr, gc] += 0.5
    proprio = np.array(
        [
            state.gripper[0],
            state.gripper[1],
            0.0 if state.held is None else 1.0,
            1.0 if state.lifted else 0.0,
        ]
    )
    return Observation(grid=grid, task_id=task.task_id, proprio=proprio)


# ---------------------------------------------------------------------------
# tasks

ON_TOL = 0.06
AT_TOL = 0.10


@dataclass(frozen=True)
class Stage:
    kind: str
    args: tuple


@dataclass(frozen=True)
class Task:
    name: str
    task_id: int
    kind: str
    horizon: int
    objects: np.ndarray  # nominal (n, 2) start positions
    stages: tuple

    def sample_start(self, rng):
        jitter = np.array(
            [rng.uniform() * 0.1 - 0.05 for _ in range(self.objects.size)]
        ).reshape(self.objects.shape)
        positions = np.clip(self.objects + jitter, 0.05, 0.95)
        gripper = np.array(
            [0.1 + rng.uniform() * 0.04 - 0.02, 0.1 + rng.uniform() * 0.04 - 0.02]
        )
        return WorldState(positions=positions, gripper=gripper)

    def stage_satisfied(self, stage, state):
        if stage.kind == "hold":
            return state.held == stage.args[0]
        if stage.kind == "lifted":
            return state.held == stage.args[0] and state.lifted
        if stage.kind == "on":
            i, j = stage.args
            if state.held == i:
                return False
            return float(np.linalg.norm(state.positions[i] - state.positions[j])) <= ON_TOL
        if stage.kind == "at":
            i, x, y = stage.args
            if state.held == i:
                return False
            return float(np.linalg.norm(state.positions[i] - np.array([x, y]))) <= AT_TOL
        if stage.kind == "out":
            i, x, y, r = stage.args
            return float(np.linalg.norm(state.positions[i] - np.array([x, y]))) >= r
        if stage.kind == "empty":
            return state.held is None
        raise TaskSpecError("unknown stage kind %r" % (stage.kind,))

    def progress_of_trace(self, trace):
        """Fraction of stages achieved in order over a state trace."""
        idx = 0
        for state in trace:
            while idx < len(self.stages) and self.stage_satisfied(self.stages[idx], state):
                idx += 1
        return idx / len(self.stages)


_STAGE_ARITY = {"hold": 1, "lifted": 1, "on": 2, "at": 3, "out": 4, "empty": 0}
_STAGE_INT_ARGS = {"hold": 1, "lifted": 1, "on": 2, "at": 1, "out": 1, "empty": 0}
TASK_KINDS = ("stack", "sort", "clear")


def parse_task_text(text):
    header = {}
    objects = []
    stages = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in ("objects", "stages"):
                raise TaskSpecError("line %d: unknown section [%s]" % (lineno, section))
            continue
        if section is None:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise TaskSpecError("line %d: expected 'key value'" % lineno)
            header[parts[0]] = parts[1].strip()
        elif section == "objects":
            parts = line.split()
            if len(parts) != 2:
                raise TaskSpecError("line %d: object needs two coordinates" % lineno)
            try:
                objects.append([float(parts[0]), float(parts[1])])
            except ValueError:
                raise TaskSpecError("line %d: malformed coordinate" % lineno) from None
        else:
            parts = line.split()
            kind = parts[0]
            if kind not in _STAGE_ARITY:
                raise TaskSpecError("line %d: unknown stage kind %r" % (lineno, kind))
            if len(parts) - 1 != _STAGE_ARITY[kind]:
                raise TaskSpecError(
                    "line %d: stage %r takes %d arguments"
                    % (lineno, kind, _STAGE_ARITY[kind])
                )
            args = []
            try:
                for pos, tok in enumerate(parts[1:]):
                    args.append(int(tok) if pos < _STAGE_INT_ARGS[kind] else float(tok))
            except ValueError:
                raise TaskSpecError("line %d: malformed stage argument" % lineno) from None
            stages.append(Stage(kind=kind, args=tuple(args)))

    for key in ("name", "task_id", "kind", "horizon"):
        if key not in header:
            raise TaskSpecError("missing required key %r" % key)
    if header["kind"] not in TASK_KINDS:
        raise TaskSpecError("unknown task kind %r" % (header["kind"],))
    try:
        task_id = int(header["task_id"])
        horizon = int(header["horizon"])
    except ValueError:
        raise TaskSpecError("task_id and horizon must be integers") from None
    if horizon < 1:
        raise TaskSpecError("horizon must be positive")
    if not objects:
        raise TaskSpecError("at least one object is required")
    if not stages:
        raise TaskSpecError("at least one stage is required")
    obj = np.array(objects)
    for st in stages:
        if _STAGE_INT_ARGS[st.kind] and not all(
            0 <= a < len(objects) for a in st.args[: _STAGE_INT_ARGS[st.kind]]
        ):
            raise TaskSpecError("stage %r references a missing object" % (st.kind,))
    obj.flags.writeable = False
    return Task(
        name=header["name"],
        task_id=task_id,
        kind=header["kind"],
        horizon=horizon,
        objects=obj,
        stages=tuple(stages),
    )


def list_tasks():
    root = importlib.resources.files("topoflow").joinpath("tasks")
    return sorted(p.name[: -len(".task")] for p in root.iterdir() if p.name.endswith(".task"))


def load_task(spec):
    path = Path(spec)
    if path.suffix == ".task":
        if not path.exists():
            raise TaskSpecError("task file %s does not exist" % path)
        return parse_task_text(path.read_text())
    res = importlib.resources.files("topoflow").joinpath("tasks", spec + ".task")
    if not res.is_file():
        raise TaskSpecError(
            "unknown task %r; bundled tasks: %s" % (spec, ", ".join(list_tasks()))
        )
    return parse_task_text(res.read_text())


# ---------------------------------------------------------------------------
# scripted demonstrations


class _PlanFailed(Exception):
    pass


def _plan_pick_place(sim, actions, obj_idx, target, rng):
    def do(action):
        nonlocal sim
        sim, reason = oracle_step(sim, action)
        if reason is not None:
            raise _PlanFailed(reason)
        actions.append(action)

    jitter = rng.standard_normal(2) * 0.01
    goto = np.clip(sim.positions[obj_idx] + jitter, 0.0, 1.0)
    do(Action(APPROACH, [goto[0], goto[1], 0.0]))
    do(Action(GRASP, np.zeros(3)))
    do(Action(LIFT, np.zeros(3)))
    moves = 0
    while float(np.linalg.norm(target - sim.gripper)) > 0.45 and moves < 3:
        delta = np.clip(target - sim.gripper, -MOVE_LIMIT, MOVE_LIMIT)
        do(Action(MOVE, [delta[0], delta[1], 0.0]))
        moves += 1
    settle = np.clip(target + rng.standard_normal(2) * 0.005, 0.0, 1.0)
    do(Action(PLACE, [settle[0], settle[1], 0.0]))
    do(Action(RELEASE, np.zeros(3)))
    return sim


def _plan_once(task, start, rng):
    sim = start.copy()
    actions = []
    if task.kind == "stack":
        for st in task.stages:
            if st.kind != "on":
                continue
            i, j = st.args
            sim = _plan_pick_place(sim, actions, i, sim.positions[j].copy(), rng)
    elif task.kind == "sort":
        for st in task.stages:
            if st.kind != "at":
                continue
            i, x, y = st.args
            sim = _plan_pick_place(sim, actions, i, np.array([x, y]), rng)
    else:  # clear
        def do(action):
            nonlocal sim
            sim, reason = oracle_step(sim, action)
            if reason is not None:
                raise _PlanFailed(reason)
            actions.append(action)

        for st in task.stages:
            if st.kind != "out":
                continue
            i, cx, cy, r = st.args
            center = np.array([cx, cy])
            jitter = rng.standard_normal(2) * 0.01
            goto = np.clip(sim.positions[i] + jitter, 0.0, 1.0)
            do(Action(APPROACH, [goto[0], goto[1], 0.0]))
            pushes = 0
            while float(np.linalg.norm(sim.positions[i] - center)) < r + 0.03 and pushes < 4:
                radial = sim.positions[i] - center
                norm = float(np.linalg.norm(radial))
                direction = radial / norm if norm > 1e-9 else np.array([1.0, 0.0])
                delta = np.clip(direction * 0.2, -MOVE_LIMIT, MOVE_LIMIT)
                do(Action(PUSH, [delta[0], delta[1], 0.0]))
                pushes += 1
    if len(actions) > task.horizon:
        raise _PlanFailed("plan exceeds horizon")
    return actions


def script_demo(task, start, rng, max_retries=5):
    """Plan a legal demonstration reaching full task progress.

    Approach targets are jittered, so marginal geometry can occasionally
    break a plan; planning is retried with fresh jitter a bounded number of
    times before giving up.
    """
    for _ in range(max_retries):
        try:
            actions = _plan_once(task, start, rng)
        except _PlanFailed:
            continue
        result = replay(task, start, actions)
        if not result.violations and result.progress == 1.0:
            return actions
    raise DemoPlanningError("could not plan a clean demo for task %s" % task.name)


# ---------------------------------------------------------------------------
# episodes and metrics


@dataclass(frozen=True)
class Episode:
    task_name: str
    task_id: int
    index: int
    start: WorldState
    observation: Observation
    tokens: np.ndarray  # (horizon, 4)
    labels: np.ndarray  # (horizon,) int type ids

    @property
    def horizon(self):
        return self.tokens.shape[0]


def gen_episodes(task, count, seed):
    """Deterministic demo episodes; episode i uses stream(i) of the seed."""
    from .numcore import Rng

    base = Rng(seed)
    episodes = []
    for i in range(count):
        rng = base.stream(i)
        start = task.sample_start(rng)
        actions = script_demo(task, start, rng)
        tokens = encode_actions(actions, task.horizon)
        labels = decode_types(tokens)
        episodes.append(
            Episode(
                task_name=task.name,
                task_id=task.task_id,
                index=i,
                start=start,
                observation=observe(start, task),
                tokens=tokens,
                labels=labels,
            )
        )
    return episodes


@dataclass(frozen=True)
class ReplayResult:
    final_state: WorldState
    trace: list
    violations: list  # (index, reason) pairs
    progress: float


def replay(task, start, actions):
    """Run actions through the simulator, skipping illegal ones."""
    state = start.copy()
    trace = [state]
    violations = []
    for idx, action in enumerate(actions):
        nxt, reason = oracle_step(state, action)
        if reason is None:
            state = nxt
        else:
            violations.append((idx, reason))
        trace.append(state)
    return ReplayResult(
        final_state=state,
        trace=trace,
        violations=violations,
        progress=task.progress_of_trace(trace),
    )


def atp(task, start, actions):
    return replay(task, start, actions).progress


def violation_rate(task, start, actions):
    if not actions:
        return 0.0
    return len(replay(task, start, actions).violations) / len(actions)


def transition_violations(labels, mask):
    """Count consecutive label pairs forbidden (exactly zero) in the mask."""
    m = mask.values if hasattr(mask, "values") else np.asarray(mask, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    return int(sum(m[a, b] == 0.0 for a, b in zip(labels[:-1], labels[1:])))


def d_phys(task, start, actions):
    """Greedy repair distance to a physically executable sequence.

    Walking the sequence, an action the simulator rejects is replaced by the
    first legal type in the canonical type order with parameters clamped to
    that type's bounds; each substitution costs 1 plus the parameter
    distance moved.  Zero exactly when the sequence replays clean.
    """
    state = start.copy()
    total = 0.0
    for action in actions:
        nxt, reason = oracle_step(state, action)
        if reason is None:
            state = nxt
            continue
        for t in range(N_TYPES):
            repaired = Action(t, clamp_params(t, action.params))
            nxt, reason = oracle_step(state, repaired)
            if reason is None:
                total += 1.0 + float(np.linalg.norm(action.params - repaired.params))
                state = nxt
                break
    return total


def invariant_profile(task, start, actions):
    """Bookkeeping trace used by evaluation diagnostics."""
    result = replay(task, start, actions)
    held = [0 if s.held is None else 1 for s in result.trace]
    progress = []
    idx = 0
    for state in result.trace:
        while idx < len(task.stages) and task.stage_satisfied(task.stages[idx], state):
            idx += 1
        progress.append(idx / len(task.stages))
    return {
        "object_count": int(start.n_objects),
        "object_count_conserved": all(
            s.n_objects == start.n_objects for s in result.trace
        ),
        "held_profile": held,
        "progress_profile": progress,
        "progress_monotone": all(
            a <= b for a, b in zip(progress[:-1], progress[1:])
        ),
        "violations": len(result.violations),
    }


# ---------------------------------------------------------------------------
# dataset serialization

SCHEMA_VERSION = 1


def episode_to_dict(ep):
    return {
        "schema_version": SCHEMA_VERSION,
        "task": ep.task_name,
        "task_id": ep.task_id,
        "index": ep.index,
        "objects": ep.start.positions.tolist(),
        "gripper": ep.start.gripper.tolist(),
        "held": -1 if ep.start.held is None else ep.start.held,
        "lifted": bool(ep.start.lifted),
        "grid": ep.observation.grid.tolist(),
        "proprio": ep.observation.proprio.tolist(),
        "tokens": ep.tokens.tolist(),
        "labels": ep.labels.tolist(),
    }


def episode_from_dict(d, task=None):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            "unsupported episode schema %r" % (d.get("schema_version"),)
        )
    start = WorldState(
        positions=np.array(d["objects"], dtype=np.float64),
        gripper=np.array(d["gripper"], dtype=np.float64),
        held=None if d["held"] < 0 else int(d["held"]),
        lifted=bool(d["lifted"]),
    )
    return Episode(
        task_name=d["task"],
        task_id=int(d["task_id"]),
        index=int(d["index"]),
        start=start,
        observation=Observation(
            grid=np.array(d["grid"], dtype=np.float64),
            task_id=int(d["task_id"]),
            proprio=np.array(d["proprio"], dtype=np.float64),
        ),
        tokens=np.array(d["tokens"], dtype=np.float64),
        labels=np.array(d["labels"], dtype=int),
    )


def write_episodes(path, episodes):
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), sort_keys=True))
            fh.write("\n")


def read_episodes(path):
    episodes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(episode_from_dict(json.loads(line)))
    return episodes


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
