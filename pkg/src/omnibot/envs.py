"""Four toy embodiments with scripted experts.

Each environment matches its action head exactly in dimension and
chunking:

  arm1      single-arm head, 7-D: dx dy dz (clamped +-0.1), 3 inert
            rotation dims, gripper. Vision task: object/goal positions
            appear only in the rendered workspace image.
  nav       navigation head, 2-D relative waypoint (norm clamped 0.2),
            walls block and slide. Goal-image conditioned.
  bimanual  bimanual head, 14 joint targets, rate-limited tracking of a
            smooth instruction-keyed reference.
  quad      quadruped head, 12 joint targets tracking a central-pattern
            generator; proprioception-only, language-conditioned.

nav-shifted reuses the nav interface with a smaller step clamp and a
constant lateral drift; it exists only for zero-shot evaluation and never
appears in training mixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembler import ObservationFrame
from .datapipe import GOAL_VIEWS, ShardSchema, TrajectoryRecord, write_shard
from .errors import ExecutionError
from .heads import EMBODIMENT_HEADS  # noqa: F401  (re-exported for callers)
from .rng import derive_seed, generator

IMG = 24  # rendered resolution


@dataclass(frozen=True)
class EmbodimentSpec:
    name: str
    observation_groups: tuple[str, ...]
    head: str
    action_dim: int
    horizon: int
    instructions: tuple[int, ...]  # template ids drawn at reset (0 = none)


SPECS = {
    "arm1": EmbodimentSpec("arm1", ("workspace",), "single-arm", 7, 40, (1, 2, 3, 4)),
    "nav": EmbodimentSpec("nav", ("navigation",), "navigation", 2, 30, (0,)),
    "bimanual": EmbodimentSpec(
        "bimanual",
        ("workspace", "wrist-left", "wrist-right", "bimanual-proprio"),
        "bimanual",
        14,
        60,
        (5, 6, 7),
    ),
    "quad": EmbodimentSpec("quad", ("quad-proprio",), "quadruped", 12, 50, (8, 9)),
    "nav-shifted": EmbodimentSpec("nav-shifted", ("navigation",), "navigation", 2, 40, (0,)),
}

INSTRUCTION_TEMPLATES = {
    0: "",
    1: "put the block on the target",
    2: "move the object to the goal",
    3: "bring the block to the marker",
    4: "place the object on the goal pad",
    5: "fold the towel corners together",
    6: "uncap the pen and set it down",
    7: "hand the block between grippers",
    8: "walk with the steady gait",
    9: "walk with the quick gait",
}

# ------------------------------------------------------------------ rendering


def _draw_square(img: np.ndarray, channel: int, x: float, y: float, half: int, value: float) -> None:
    cx = int(round(x * (IMG - 1)))
    cy = int(round(y * (IMG - 1)))
    x0, x1 = max(0, cx - half), min(IMG, cx + half + 1)
    y0, y1 = max(0, cy - half), min(IMG, cy + half + 1)
    img[channel, y0:y1, x0:x1] = value


def render_arm1(ee: np.ndarray, grip: float, obj: np.ndarray, goal: np.ndarray) -> np.ndarray:
    img = np.zeros((3, IMG, IMG), dtype=np.float32)
    _draw_square(img, 2, goal[0], goal[1], 2, 0.7)
    _draw_square(img, 1, obj[0], obj[1], 1, 1.0)
    _draw_square(img, 0, ee[0], ee[1], 1, 1.0 if grip >= 0.5 else 0.5)
    return img


def render_nav(pos: np.ndarray, walls: list[tuple[float, float, float, float]]) -> np.ndarray:
    img = np.zeros((3, IMG, IMG), dtype=np.float32)
    for x0, y0, x1, y1 in walls:
        a0, a1 = int(x0 * (IMG - 1)), int(math.ceil(x1 * (IMG - 1)))
        b0, b1 = int(y0 * (IMG - 1)), int(math.ceil(y1 * (IMG - 1)))
        img[0, b0 : b1 + 1, a0 : a1 + 1] = 0.8
    _draw_square(img, 1, pos[0], pos[1], 1, 1.0)
    return img


def _joint_bars(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    img = np.zeros((3, IMG, IMG), dtype=np.float32)
    n = len(values)
    width = IMG // n
    for j, v in enumerate(values):
        frac = (np.clip(v, lo, hi) - lo) / (hi - lo)
        row = int(round((1.0 - frac) * (IMG - 3)))
        col = j * width
        img[0, row : row + 3, col : col + max(1, width - 1)] = 1.0
        img[1, IMG - 2 :, col : col + max(1, width - 1)] = 0.3 + 0.05 * j  # joint index key
    return img


def render_bimanual_workspace(joints: np.ndarray) -> np.ndarray:
    return _joint_bars(joints, -2.0, 2.0)


def render_bimanual_wrist(joints7: np.ndarray) -> np.ndarray:
    return _joint_bars(joints7, -2.0, 2.0)


# ------------------------------------------------------------------ arm1


@dataclass
class Arm1State:
    ee: np.ndarray  # xyz in [0, 1]
    grip: float
    obj: np.ndarray
    goal: np.ndarray
    attached: bool
    t: int


class Arm1Env:
    name = "arm1"
    spec = SPECS["arm1"]
    GRASP_EPS = 0.05
    STEP_CLAMP = 0.1

    def reset(self, seed: int):
        rng = generator(seed, "arm1", "reset")
        while True:
            obj = rng.uniform(0.15, 0.85, 3)
            goal = rng.uniform(0.15, 0.85, 3)
            obj[2] = goal[2] = 0.5
            if np.linalg.norm(obj - goal) >= 0.15:
                break
        ee = rng.uniform(0.15, 0.85, 3)
        ee[2] = 0.5
        state = Arm1State(ee, 0.0, obj, goal, False, 0)
        instruction = int(rng.choice(self.spec.instructions))
        return state, self.frame(state, instruction), instruction

    def goal_frame_image(self, state: Arm1State) -> np.ndarray:
        """Final-state rendering: object delivered, gripper open at the goal."""
        return render_arm1(state.goal, 0.0, state.goal, state.goal)

    def frame(self, state: Arm1State, instruction: int, goal_img: np.ndarray | None = None) -> ObservationFrame:
        return ObservationFrame(
            embodiment="arm1",
            observations={"workspace": render_arm1(state.ee, state.grip, state.obj, state.goal)},
            instruction=instruction,
            goal=goal_img,
            goal_view="workspace" if goal_img is not None else None,
        )

    def step(self, state: Arm1State, action: np.ndarray) -> Arm1State:
        if not np.all(np.isfinite(action)) or action.shape != (7,):
            raise ExecutionError(f"bad arm1 action {action!r}")
        delta = np.clip(action[:3], -self.STEP_CLAMP, self.STEP_CLAMP)
        ee = np.clip(state.ee + delta, 0.0, 1.0)
        grip = float(action[6])
        attached = state.attached
        obj = state.obj.copy()
        if grip >= 0.5:
            if not attached and np.linalg.norm(ee - state.obj) <= self.GRASP_EPS:
                attached = True
        else:
            attached = False
        if attached:
            obj = ee.copy()
        return Arm1State(ee, grip, obj, state.goal, attached, state.t + 1)

    def success(self, state: Arm1State) -> bool:
        return bool(np.linalg.norm(state.obj - state.goal) <= 0.05 and state.grip < 0.5)

    def expert_chunk(self, state: Arm1State, chunk: int) -> np.ndarray:
        actions = np.zeros((chunk, 7), dtype=np.float32)
        sim = state
        for i in range(chunk):
            a = np.zeros(7, dtype=np.float32)
            if not sim.attached and not self.success(sim):
                to_obj = sim.obj - sim.ee
                if np.linalg.norm(to_obj) > self.GRASP_EPS * 0.6:
                    a[:3] = np.clip(to_obj, -self.STEP_CLAMP, self.STEP_CLAMP)
                    a[6] = 0.0
                else:
                    a[6] = 1.0  # close on the object
            elif sim.attached:
                to_goal = sim.goal - sim.ee
                if np.linalg.norm(to_goal) > 0.02:
                    a[:3] = np.clip(to_goal, -self.STEP_CLAMP, self.STEP_CLAMP)
                    a[6] = 1.0
                else:
                    a[6] = 0.0  # release at the goal
            actions[i] = a
            sim = self.step(sim, a)
        return actions


# ------------------------------------------------------------------ nav


NAV_MAPS = {
    0: [],
    1: [(0.45, 0.0, 0.55, 0.6)],  # vertical wall, gap at the top
    2: [(0.4, 0.45, 1.0, 0.55)],  # horizontal wall, gap at the left
}


def _in_walls(p: np.ndarray, walls) -> bool:
    return any(x0 <= p[0] <= x1 and y0 <= p[1] <= y1 for x0, y0, x1, y1 in walls)


def _blocked(a: np.ndarray, b: np.ndarray, walls) -> bool:
    for f in np.linspace(0.0, 1.0, 9):
        if _in_walls(a + f * (b - a), walls):
            return True
    return False


@dataclass
class NavState:
    pos: np.ndarray
    map_id: int
    goal: np.ndarray
    t: int
    drift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    step_clamp: float = 0.2


class NavEnv:
    name = "nav"
    spec = SPECS["nav"]
    SUCCESS_RADIUS = 0.1

    step_clamp = 0.2
    drift = np.zeros(2)

    def reset(self, seed: int):
        rng = generator(seed, "nav", "reset")
        map_id = int(rng.integers(0, 3))
        walls = NAV_MAPS[map_id]
        while True:
            if map_id == 0:
                start = rng.uniform(0.05, 0.95, 2)
                goal = rng.uniform(0.05, 0.95, 2)
            elif map_id == 1:
                start = np.array([rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.5)])
                goal = np.array([rng.uniform(0.65, 0.95), rng.uniform(0.7, 0.95)])
            else:
                start = np.array([rng.uniform(0.45, 0.95), rng.uniform(0.65, 0.95)])
                goal = np.array([rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.35)])
            if np.linalg.norm(start - goal) >= 0.5 and not _in_walls(start, walls) and not _in_walls(goal, walls):
                break
        state = NavState(start, map_id, goal, 0, self.drift.copy(), self.step_clamp)
        return state, self.frame(state, 0), 0

    def goal_frame_image(self, state: NavState) -> np.ndarray:
        return render_nav(state.goal, NAV_MAPS[state.map_id])

    def frame(self, state: NavState, instruction: int, goal_img: np.ndarray | None = None) -> ObservationFrame:
        return ObservationFrame(
            embodiment=self.name,
            observations={"navigation": render_nav(state.pos, NAV_MAPS[state.map_id])},
            instruction=instruction,
            goal=goal_img,
            goal_view="navigation" if goal_img is not None else None,
        )

    def _move(self, pos: np.ndarray, delta: np.ndarray, walls) -> np.ndarray:
        target = np.clip(pos + delta, 0.0, 1.0)
        if not _blocked(pos, target, walls):
            return target
        slide_x = np.clip(pos + np.array([delta[0], 0.0]), 0.0, 1.0)
        if abs(delta[0]) > 1e-9 and not _blocked(pos, slide_x, walls):
            return slide_x
        slide_y = np.clip(pos + np.array([0.0, delta[1]]), 0.0, 1.0)
        if abs(delta[1]) > 1e-9 and not _blocked(pos, slide_y, walls):
            return slide_y
        return pos.copy()

    def step(self, state: NavState, action: np.ndarray) -> NavState:
        if not np.all(np.isfinite(action)) or action.shape != (2,):
            raise ExecutionError(f"bad nav action {action!r}")
        delta = np.asarray(action, dtype=np.float64)
        norm = np.linalg.norm(delta)
        if norm > state.step_clamp:
            delta = delta * (state.step_clamp / norm)
        walls = NAV_MAPS[state.map_id]
        pos = self._move(state.pos, delta, walls)
        if np.linalg.norm(state.drift) > 0:
            pos = self._move(pos, state.drift, walls)
        return NavState(pos, state.map_id, state.goal, state.t + 1, state.drift, state.step_clamp)

    def success(self, state: NavState) -> bool:
        return bool(np.linalg.norm(state.pos - state.goal) <= self.SUCCESS_RADIUS)

    def expert_chunk(self, state: NavState, chunk: int) -> np.ndarray:
        actions = np.zeros((chunk, 2), dtype=np.float32)
        sim = state
        for i in range(chunk):
            to_goal = sim.goal - sim.pos
            norm = np.linalg.norm(to_goal)
            if norm > self.step_clamp:
                to_goal = to_goal * (self.step_clamp / norm)
            actions[i] = to_goal
            sim = self.step(sim, actions[i].astype(np.float64))
        return actions


class NavShiftedEnv(NavEnv):
    """Zero-shot variant: smaller steps plus a constant lateral drift."""

    name = "nav-shifted"
    spec = SPECS["nav-shifted"]
    step_clamp = 0.12
    drift = np.array([0.0, 0.02])


# ------------------------------------------------------------------ bimanual


def _reference_params(instruction: int, joints: int = 14):
    rng = generator(instruction, "bimanual", "reference")
    offsets = rng.uniform(-0.5, 0.5, joints)
    amps = np.stack(
        [rng.uniform(0.15, 0.3, joints), rng.uniform(0.03, 0.08, joints), rng.uniform(0.01, 0.03, joints)]
    )
    periods = np.array([80.0, 40.0, 26.0])
    phases = rng.uniform(0, 2 * np.pi, (3, joints))
    return offsets, amps, periods, phases


def bimanual_reference(instruction: int, t: float) -> np.ndarray:
    offsets, amps, periods, phases = _reference_params(instruction)
    ref = offsets.copy()
    for i in range(3):
        ref += amps[i] * np.sin(2 * np.pi * t / periods[i] + phases[i])
    return ref.astype(np.float64)


@dataclass
class BimanualState:
    joints: np.ndarray  # 14
    instruction: int
    t: int
    errors: list = field(default_factory=list)  # per-step mean |joints - ref|


class BimanualEnv:
    name = "bimanual"
    spec = SPECS["bimanual"]
    RATE_LIMIT = 0.15
    SUCCESS_ERR = 0.05

    def reset(self, seed: int):
        rng = generator(seed, "bimanual", "reset")
        instruction = int(rng.choice(self.spec.instructions))
        joints = bimanual_reference(instruction, 0.0) + rng.normal(0, 0.02, 14)
        state = BimanualState(joints, instruction, 0)
        state.errors.append(float(np.abs(joints - bimanual_reference(instruction, 0.0)).mean()))
        return state, self.frame(state, instruction), instruction

    def goal_frame_image(self, state: BimanualState) -> np.ndarray:
        ref_end = bimanual_reference(state.instruction, float(self.spec.horizon))
        return render_bimanual_workspace(ref_end)

    def frame(self, state: BimanualState, instruction: int, goal_img: np.ndarray | None = None) -> ObservationFrame:
        j = state.joints
        return ObservationFrame(
            embodiment="bimanual",
            observations={
                "workspace": render_bimanual_workspace(j),
                "wrist-left": render_bimanual_wrist(j[:7]),
                "wrist-right": render_bimanual_wrist(j[7:]),
                "bimanual-proprio": j.astype(np.float32),
            },
            instruction=instruction,
            goal=goal_img,
            goal_view="workspace" if goal_img is not None else None,
        )

    def step(self, state: BimanualState, action: np.ndarray) -> BimanualState:
        if not np.all(np.isfinite(action)) or action.shape != (14,):
            raise ExecutionError(f"bad bimanual action {action!r}")
        delta = np.clip(action - state.joints, -self.RATE_LIMIT, self.RATE_LIMIT)
        joints = np.clip(state.joints + delta, -2.0, 2.0)
        t = state.t + 1
        nxt = BimanualState(joints, state.instruction, t, state.errors)
        nxt.errors.append(float(np.abs(joints - bimanual_reference(state.instruction, float(t))).mean()))
        return nxt

    def success(self, state: BimanualState) -> bool:
        if state.t < 10:
            return False
        return bool(np.mean(state.errors[-10:]) < self.SUCCESS_ERR)

    def expert_chunk(self, state: BimanualState, chunk: int) -> np.ndarray:
        return np.stack(
            [bimanual_reference(state.instruction, float(state.t + 1 + i)) for i in range(chunk)]
        ).astype(np.float32)


# ------------------------------------------------------------------ quad


QUAD_STANCE = np.array([0.9, -0.9, 0.9, -0.9, 1.4, 1.4, 1.4, 1.4, -1.8, -1.8, -1.8, -1.8])
QUAD_AMP = np.array([0.1, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25, 0.3, 0.3, 0.3, 0.3])
QUAD_PHASE = np.array([0.0, np.pi, np.pi, 0.0] * 3)
QUAD_FREQ = {8: 1.0 / 40.0, 9: 1.0 / 25.0}  # cycles per control step
GRAVITY = np.array([0.0, 0.0, -1.0])


def quad_reference(instruction: int, t: float) -> np.ndarray:
    theta = 2 * np.pi * QUAD_FREQ[instruction] * t
    return QUAD_STANCE + QUAD_AMP * np.sin(theta + QUAD_PHASE)


@dataclass
class QuadState:
    joints: np.ndarray  # 12 positions
    velocities: np.ndarray  # 12, per-step deltas
    prev_action: np.ndarray  # 12
    instruction: int
    t: int
    rewards: list = field(default_factory=list)


class QuadEnv:
    name = "quad"
    spec = SPECS["quad"]
    RATE_LIMIT = 0.15

    def reset(self, seed: int):
        rng = generator(seed, "quad", "reset")
        instruction = int(rng.choice(self.spec.instructions))
        joints = quad_reference(instruction, 0.0) + rng.normal(0, 0.01, 12)
        state = QuadState(joints, np.zeros(12), joints.copy(), instruction, 0)
        state.rewards.append(self.reward(state))
        return state, self.frame(state, instruction), instruction

    def proprio(self, state: QuadState) -> np.ndarray:
        theta = 2 * np.pi * QUAD_FREQ[state.instruction] * state.t
        clock = np.array([np.sin(theta), np.cos(theta), np.sin(2 * theta), np.cos(2 * theta)])
        obs = np.concatenate(
            [state.joints, state.velocities, state.prev_action, GRAVITY, clock, np.zeros(16)]
        )
        return obs.astype(np.float32)

    def frame(self, state: QuadState, instruction: int, goal_img=None) -> ObservationFrame:
        return ObservationFrame(
            embodiment="quad",
            observations={"quad-proprio": self.proprio(state)},
            instruction=instruction,
        )

    def step(self, state: QuadState, action: np.ndarray) -> QuadState:
        if not np.all(np.isfinite(action)) or action.shape != (12,):
            raise ExecutionError(f"bad quad action {action!r}")
        delta = np.clip(action - state.joints, -self.RATE_LIMIT, self.RATE_LIMIT)
        joints = state.joints + delta
        nxt = QuadState(joints, delta, np.asarray(action, dtype=np.float64), state.instruction,
                        state.t + 1, state.rewards)
        nxt.rewards.append(self.reward(nxt))
        return nxt

    def reward(self, state: QuadState) -> float:
        ref = quad_reference(state.instruction, float(state.t))
        return float(np.exp(-np.abs(state.joints - ref).sum() / 12.0))

    def episode_reward(self, state: QuadState) -> float:
        return float(np.mean(state.rewards))

    def expert_chunk(self, state: QuadState, chunk: int) -> np.ndarray:
        return np.stack(
            [quad_reference(state.instruction, float(state.t + 1 + i)) for i in range(chunk)]
        ).astype(np.float32)


# ------------------------------------------------------------------ registry


ENVS = {
    "arm1": Arm1Env,
    "nav": NavEnv,
    "bimanual": BimanualEnv,
    "quad": QuadEnv,
    "nav-shifted": NavShiftedEnv,
}


def make_env(name: str):
    if name not in ENVS:
        raise KeyError(f"unknown embodiment {name!r}")
    return ENVS[name]()


def run_expert_episode(env, seed: int, chunk: int):
    """Roll the scripted expert; returns (frames, actions, instruction, success, final_state)."""
    state, frame, instruction = env.reset(seed)
    frames, actions = [frame], []
    horizon = env.spec.horizon
    while len(actions) < horizon:
        plan = env.expert_chunk(state, chunk)
        for row in plan:
            state = env.step(state, row.astype(np.float64))
            actions.append(row)
            frames.append(env.frame(state, instruction))
            if len(actions) >= horizon or _done(env, state):
                break
        if _done(env, state):
            break
    # frames has one more entry (the terminal observation); drop it so
    # observations and actions align per step
    frames = frames[: len(actions)]
    return frames, np.stack(actions), instruction, _succeeded(env, state), state


def _done(env, state) -> bool:
    if env.name == "quad":
        return state.t >= env.spec.horizon
    if env.name == "bimanual":
        return state.t >= env.spec.horizon
    return env.success(state)


def _succeeded(env, state) -> bool:
    if env.name == "quad":
        return True  # quad quality is measured by normalized reward instead
    return env.success(state)


def generate_dataset(name: str, n_trajectories: int, seed: int, out_path: str, cfg) -> ShardSchema:
    """Seeded expert rollouts serialized as one XEDS1 shard."""
    env = make_env(name)
    spec = SPECS[name]
    chunk = cfg.head(spec.head).chunk_size
    trajectories = []
    for i in range(n_trajectories):
        episode_seed = derive_seed(seed, "episode", name, i)
        frames, actions, instruction, _, _ = run_expert_episode(env, episode_seed, chunk)
        streams = {
            g: np.stack([f.observations[g] for f in frames]).astype(np.float32)
            for g in spec.observation_groups
        }
        trajectories.append(TrajectoryRecord(name, streams, actions.astype(np.float32), instruction))
    stream_shapes = [
        (g, trajectories[0].observations[g].shape[1:] if trajectories else _group_shape(g))
        for g in spec.observation_groups
    ]
    schema = ShardSchema(
        dataset=name,
        embodiment=name,
        head=spec.head,
        action_dim=spec.action_dim,
        instruction_vocab=cfg.encoders.language_vocab,
        streams=[(g, tuple(int(x) for x in s)) for g, s in stream_shapes],
    )
    write_shard(schema, trajectories, out_path)
    return schema


def _group_shape(group: str) -> tuple[int, ...]:
    if group == "quad-proprio":
        return (59,)
    if group == "bimanual-proprio":
        return (14,)
    return (3, IMG, IMG)
