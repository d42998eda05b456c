"""Toy 2D block-room environment with scripted play/demo generators.

A point effector moves in the unit square among 3 blocks, 2 light switches
and a sliding drawer. Actions are 4-dim (dx, dy, grip, interact), observations
a flat 13-dim vector. Stepping is a pure function of (state, action); all
randomness lives in resets and the scripted controllers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory
from .errors import GenerationError, UsageError
from .seeding import stream

log = logging.getLogger(__name__)

OBS_DIM = 13
ACT_DIM = 4

MAX_STEP = 0.05
GRASP_RADIUS = 0.05
INTERACT_RADIUS = 0.05
INTERACT_THRESHOLD = 0.5
DRAWER_STEP = 0.1

SWITCHES = (np.array([0.10, 0.90]), np.array([0.30, 0.90]))
TABLE_ZONE = ((0.05, 0.65), (0.35, 0.95))   # (x range, y range)
DRAWER_ZONE = ((0.70, 1.00), (0.00, 0.30))
TABLE_SLOTS = ((0.15, 0.60), (0.35, 0.75), (0.55, 0.60))
DRAWER_SLOTS = ((0.75, 0.08), (0.84, 0.08), (0.93, 0.08))


def drawer_handle(openness: float) -> np.ndarray:
    return np.array([0.85, 0.06 + 0.20 * openness])


def in_zone(point, zone) -> bool:
    (x0, x1), (y0, y1) = zone
    return bool(x0 <= point[0] <= x1 and y0 <= point[1] <= y1)


@dataclass
class RoomState:
    effector: np.ndarray              # (2,)
    grip_closed: bool
    held: int                         # block index or -1
    blocks: np.ndarray                # (3, 2)
    lights: np.ndarray                # (2,) bool
    drawer: float                     # openness in [0, 1]

    def copy(self) -> "RoomState":
        return RoomState(self.effector.copy(), self.grip_closed, self.held,
                         self.blocks.copy(), self.lights.copy(), self.drawer)


def observe(state: RoomState) -> np.ndarray:
    return np.concatenate([
        state.effector,
        [1.0 if state.grip_closed else 0.0],
        state.blocks.reshape(-1),
        state.lights.astype(np.float64),
        [state.drawer],
        [1.0 if state.held >= 0 else 0.0],
    ])


def step_state(state: RoomState, action) -> RoomState:
    """Pure transition: clamp the action, move, resolve grip then interact."""
    a = np.clip(np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0,
                              posinf=1.0, neginf=-1.0), -1.0, 1.0)
    s = state.copy()
    s.effector = np.clip(s.effector + MAX_STEP * a[:2], 0.0, 1.0)
    if s.held >= 0:
        s.blocks[s.held] = s.effector
    if a[2] > 0.0:
        s.grip_closed = True
        if s.held < 0:
            dists = np.linalg.norm(s.blocks - s.effector, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] <= GRASP_RADIUS:
                s.held = nearest
                s.blocks[nearest] = s.effector.copy()
    elif a[2] < 0.0:
        s.grip_closed = False
        s.held = -1
    if a[3] > INTERACT_THRESHOLD:
        handle = drawer_handle(s.drawer)
        fixtures = [SWITCHES[0], SWITCHES[1], handle]
        dists = [float(np.linalg.norm(f - s.effector)) for f in fixtures]
        nearest = int(np.argmin(dists))
        if dists[nearest] <= INTERACT_RADIUS:
            if nearest < 2:
                s.lights[nearest] = not s.lights[nearest]
            else:
                direction = DRAWER_STEP if s.effector[1] > handle[1] else -DRAWER_STEP
                s.drawer = float(np.clip(s.drawer + direction, 0.0, 1.0))
    return s


# -- tasks ---------------------------------------------------------------------


def _blocks_in(state: RoomState, zone) -> list[bool]:
    return [in_zone(b, zone) for b in state.blocks]


def _setting_up_success(state: RoomState) -> bool:
    return (bool(state.lights.all()) and all(_blocks_in(state, TABLE_ZONE))
            and state.held < 0)


def _cleaning_up_success(state: RoomState) -> bool:
    return (not bool(state.lights.any()) and all(_blocks_in(state, DRAWER_ZONE))
            and state.drawer <= 0.05 and state.held < 0)


def _setting_up_subtasks(state: RoomState) -> dict[str, bool]:
    blocks = _blocks_in(state, TABLE_ZONE)
    return {"light_0": bool(state.lights[0]), "light_1": bool(state.lights[1]),
            "block_0": blocks[0], "block_1": blocks[1], "block_2": blocks[2]}


def _cleaning_up_subtasks(state: RoomState) -> dict[str, bool]:
    blocks = _blocks_in(state, DRAWER_ZONE)
    return {"light_0": not bool(state.lights[0]), "light_1": not bool(state.lights[1]),
            "block_0": blocks[0], "block_1": blocks[1], "block_2": blocks[2],
            "drawer_closed": state.drawer <= 0.05}


def _reset_common(rng: np.random.Generator, slots, lights_on: bool) -> RoomState:
    order = rng.permutation(3)
    blocks = np.zeros((3, 2))
    for b, slot in enumerate(order):
        blocks[b] = np.asarray(slots[slot]) + rng.uniform(-0.02, 0.02, size=2)
    effector = np.array([0.5, 0.5]) + rng.uniform(-0.02, 0.02, size=2)
    lights = np.array([lights_on, lights_on])
    return RoomState(effector=effector, grip_closed=False, held=-1, blocks=blocks,
                     lights=lights, drawer=0.0)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    success: callable
    subtasks: callable
    reset: callable
    budget: int = 600


TASKS = {
    "setting_up": TaskSpec(
        name="setting_up",
        success=_setting_up_success,
        subtasks=_setting_up_subtasks,
        reset=lambda rng: _reset_common(rng, DRAWER_SLOTS, lights_on=False)),
    "cleaning_up": TaskSpec(
        name="cleaning_up",
        success=_cleaning_up_success,
        subtasks=_cleaning_up_subtasks,
        reset=lambda rng: _reset_common(rng, TABLE_SLOTS, lights_on=True)),
}


def get_task(name: str) -> TaskSpec:
    if name not in TASKS:
        raise UsageError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]


def reset(task: TaskSpec, rng: np.random.Generator):
    state = task.reset(rng)
    return state, observe(state)


def step(task: TaskSpec, state: RoomState, action):
    new_state = step_state(state, action)
    return new_state, observe(new_state), task.success(new_state)


# -- scripted control ------------------------------------------------------------


class _Driver:
    """Steps the environment with waypoint control, recording the episode.

    Gaussian noise (sigma) is applied to the motion channels only; grip and
    interact are commanded exactly.
    """

    def __init__(self, state: RoomState, rng: np.random.Generator, *,
                 noise: float = 0.02, budget: int | None = None,
                 success_fn=None):
        self.state = state
        self.rng = rng
        self.noise = noise
        self.budget = budget
        self.success_fn = success_fn
        self.observations = [observe(state)]
        self.actions = []
        self.done = False

    @property
    def steps(self) -> int:
        return len(self.actions)

    def act(self, dx: float, dy: float, grip: float, interact: float) -> bool:
        """Execute one (noisy) action; returns False once the budget is spent."""
        if self.done:
            return False
        move = np.array([dx, dy]) + self.rng.normal(0.0, self.noise, size=2)
        action = np.clip(np.array([move[0], move[1], grip, interact]), -1.0, 1.0)
        self.state = step_state(self.state, action)
        self.actions.append(action)
        self.observations.append(observe(self.state))
        if self.budget is not None and self.steps >= self.budget:
            self.done = True
        if self.success_fn is not None and self.success_fn(self.state):
            self.done = True
        return not self.done

    def _move_cmd(self, target, speed: float = 1.0) -> tuple[float, float]:
        # cruise at `speed` far out, ramp down with distance so the approach
        # velocity is a smooth function of position, landing on the target
        delta = np.asarray(target) - self.state.effector
        dist = float(np.linalg.norm(delta))
        ramp = speed * min(1.0, max(dist / 0.12, 0.25))
        cmd = delta / MAX_STEP
        return (float(np.clip(cmd[0], -ramp, ramp)),
                float(np.clip(cmd[1], -ramp, ramp)))

    def goto(self, target, grip: float, tol: float = 0.012, limit: int = 200,
             speed: float = 1.0) -> bool:
        for _ in range(limit):
            if np.linalg.norm(self.state.effector - np.asarray(target)) <= tol:
                return True
            dx, dy = self._move_cmd(target, speed)
            if not self.act(dx, dy, grip, 0.0):
                return False
        return True

    def dwell(self, steps: int, grip: float) -> bool:
        for _ in range(steps):
            if not self.act(0.0, 0.0, grip, 0.0):
                return False
        return True

    def pick(self, block: int, limit: int = 200, speed: float = 1.0) -> bool:
        # close the grip over the whole final approach band; the grasp lands
        # at the radius crossing and the command is sustained, not a spike
        for _ in range(limit):
            if self.state.held == block:
                return True
            dist = float(np.linalg.norm(self.state.effector
                                        - self.state.blocks[block]))
            grip = 1.0 if dist <= 0.06 else -1.0
            dx, dy = self._move_cmd(self.state.blocks[block], speed)
            if not self.act(dx, dy, grip, 0.0):
                return False
        return self.state.held == block

    def place(self, target, speed: float = 1.0) -> bool:
        if not self.goto(target, grip=1.0, tol=0.02, speed=speed):
            return False
        if not self.act(0.0, 0.0, -1.0, 0.0):  # stationary release
            return False
        return self.dwell(3, grip=-1.0)

    def toggle_light(self, idx: int, want: bool, limit: int = 200,
                     speed: float = 1.0) -> bool:
        # press over the whole approach band while the light is wrong; the
        # toggle fires exactly once, at the interaction-radius crossing, and
        # the press drops as soon as the observed light flips
        for _ in range(limit):
            if bool(self.state.lights[idx]) == want:
                break
            dist = float(np.linalg.norm(self.state.effector - SWITCHES[idx]))
            interact = 1.0 if dist <= 0.10 else 0.0
            dx, dy = self._move_cmd(SWITCHES[idx], speed)
            if not self.act(dx, dy, -1.0, interact):
                return False
        if bool(self.state.lights[idx]) != want:
            return False
        return self.dwell(3, grip=-1.0)

    def set_drawer(self, target: float, limit: int = 200, speed: float = 1.0) -> bool:
        # ride the handle: hold interact while hovering on the side that
        # slides the drawer the right way
        opening = target > self.state.drawer
        done = abs(self.state.drawer - target) <= 0.05
        for _ in range(limit):
            if done:
                break
            handle = drawer_handle(self.state.drawer)
            anchor = handle + np.array([0.0, 0.02 if opening else -0.02])
            dist = float(np.linalg.norm(self.state.effector - handle))
            right_side = (self.state.effector[1] > handle[1]) == opening
            interact = 1.0 if dist <= 0.045 and right_side else 0.0
            dx, dy = self._move_cmd(anchor, speed)
            if not self.act(dx, dy, -1.0, interact):
                return False
            done = abs(self.state.drawer - target) <= 0.05
        if not done:
            return False
        return self.dwell(2, grip=-1.0)

    def trajectory(self, traj_id: int) -> Trajectory:
        return Trajectory(np.array(self.observations), np.array(self.actions), traj_id)


def _far_point(rng: np.random.Generator, origin, min_dist: float = 0.35,
               tries: int = 20) -> np.ndarray:
    for _ in range(tries):
        point = rng.uniform(0.05, 0.95, size=2)
        if np.linalg.norm(point - origin) >= min_dist:
            return point
    return point


def scripted_play(rng: np.random.Generator, steps: int, traj_id: int = 0) -> Trajectory:
    """Task-agnostic play: pick/place, light toggles, drawer slides, slow sweeps.

    Each primitive cruises at its own speed in [0.3, 0.9] of the motion range,
    teleop style, so strokes span tens of steps and the room evolves smoothly.
    """
    if steps < 1:
        raise UsageError("play trajectory needs at least one step")
    task = get_task("setting_up") if rng.random() < 0.5 else get_task("cleaning_up")
    state = task.reset(rng)
    driver = _Driver(state, rng, budget=steps)
    while not driver.done:
        kind = rng.random()
        if kind < 0.35:
            speed = rng.uniform(0.2, 0.6)
            block = int(rng.integers(3))
            zone = TABLE_ZONE if rng.random() < 0.5 else DRAWER_ZONE
            (x0, x1), (y0, y1) = zone
            target = np.array([rng.uniform(x0 + 0.02, x1 - 0.02),
                               rng.uniform(y0 + 0.02, y1 - 0.02)])
            if driver.pick(block, speed=speed):
                driver.place(target, speed=speed)
        elif kind < 0.47:
            speed = rng.uniform(0.2, 0.6)
            idx = int(rng.integers(2))
            driver.toggle_light(idx, not bool(driver.state.lights[idx]), speed=speed)
        elif kind < 0.62:
            speed = rng.uniform(0.2, 0.6)
            driver.set_drawer(1.0 if driver.state.drawer < 0.5 else 0.0, speed=speed)
        else:
            # slow sweep tour with direction persistence: long straight legs
            # whose heading drifts gently, teleop style
            speed = rng.uniform(0.15, 0.35)
            heading = rng.uniform(0, 2 * np.pi)
            for _ in range(int(rng.integers(3, 7))):
                heading += rng.uniform(-0.6, 0.6)
                reach = rng.uniform(0.5, 0.9)
                point = driver.state.effector + reach * np.array(
                    [np.cos(heading), np.sin(heading)])
                point = np.clip(point, 0.06, 0.94)
                if np.linalg.norm(point - driver.state.effector) < 0.3:
                    heading += np.pi / 2  # bounced off a wall; turn
                    continue
                if not driver.goto(point, grip=-1.0, tol=0.03, speed=speed):
                    break
    # Budget can expire mid-primitive; the recording is truncated to exactly
    # `steps` actions by the driver, so just package it up.
    return driver.trajectory(traj_id)


def _run_demo_script(task: TaskSpec, state: RoomState,
                     rng: np.random.Generator) -> _Driver:
    driver = _Driver(state, rng, budget=task.budget, success_fn=task.success)
    speed = rng.uniform(0.3, 0.45)  # teleop pace, matching the play distribution
    if task.name == "setting_up":
        driver.toggle_light(0, True, speed=speed)
        driver.toggle_light(1, True, speed=speed)
        driver.set_drawer(1.0, speed=speed)
        for b in range(3):
            slot = np.asarray(TABLE_SLOTS[b]) + rng.uniform(-0.01, 0.01, size=2)
            if driver.pick(b, speed=speed):
                driver.place(slot, speed=speed)
    elif task.name == "cleaning_up":
        driver.set_drawer(1.0, speed=speed)
        for b in range(3):
            slot = np.asarray(DRAWER_SLOTS[b]) + rng.uniform(-0.01, 0.01, size=2)
            if driver.pick(b, speed=speed):
                driver.place(slot, speed=speed)
        driver.set_drawer(0.0, speed=speed)
        driver.toggle_light(0, False, speed=speed)
        driver.toggle_light(1, False, speed=speed)
    else:
        raise UsageError(f"no demo script for task {task.name!r}")
    if not task.success(driver.state):
        raise GenerationError(
            f"demo script failed for {task.name!r} after {driver.steps} steps")
    return driver


def scripted_demo(task: TaskSpec, rng: np.random.Generator, traj_id: int = 0) -> Trajectory:
    """Solve the task in the canonical subtask order; ends at the success step."""
    state = task.reset(rng)
    return _run_demo_script(task, state, rng).trajectory(traj_id)


# -- rollout and evaluation -------------------------------------------------------


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    subtasks: dict[str, bool]
    queries: int = 0
    query_steps: list = field(default_factory=list)


class ScriptedAgent:
    """The demo script wrapped behind the per-step agent protocol.

    Plans by simulating the (pure) environment from the episode's actual
    initial state, then replays the planned actions.
    """

    def __init__(self, task: TaskSpec):
        self.task = task

    def begin_episode(self, state: RoomState, obs, rng: np.random.Generator):
        driver = _run_demo_script(self.task, state.copy(), rng_copy(rng))
        self._actions = iter(driver.actions)

    def act(self, state: RoomState, obs):
        return next(self._actions, np.zeros(ACT_DIM))


def rng_copy(rng: np.random.Generator) -> np.random.Generator:
    clone = np.random.Generator(np.random.PCG64())
    clone.bit_generator.state = rng.bit_generator.state
    return clone


def run_episode(agent, task: TaskSpec, rng: np.random.Generator,
                budget: int | None = None) -> EpisodeResult:
    """Generic closed-loop episode; success is checked after every step."""
    budget = budget if budget is not None else task.budget
    state, obs = reset(task, rng)
    agent.begin_episode(state, obs, rng)
    notify = getattr(agent, "observe", None)
    steps = 0
    success = task.success(state)
    while steps < budget and not success:
        action = agent.act(state, obs)
        state, obs, success = step(task, state, action)
        if notify is not None:
            notify(obs)
        steps += 1
    result = EpisodeResult(success=bool(success), steps=steps,
                           subtasks=task.subtasks(state))
    queries = getattr(agent, "queries", None)
    if queries is not None:
        result.queries = queries
        result.query_steps = list(getattr(agent, "query_steps", []))
    return result


class SkillAgent:
    """Queries the skill policy every H steps and decodes closed-loop between.

    Skills are never preempted: each emitted latent is rolled out for exactly
    min(H, remaining budget) environment steps. The policy always runs with
    dataset id 0 and sees the last F raw observations (left-padded with the
    first), normalized with the checkpoint statistics.
    """

    def __init__(self, policy, skill_model, normalizer, H: int, F: int):
        self.policy = policy
        self.model = skill_model
        self.normalizer = normalizer
        self.H = H
        self.F = F

    def begin_episode(self, state, obs, rng):
        self.history = [np.asarray(obs, dtype=np.float64)]
        self.steps_left_in_skill = 0
        self.z = None
        self.dec_state = None
        self.queries = 0
        self.query_steps = []

    def _frames(self) -> np.ndarray:
        frames = self.history[-self.F:]
        while len(frames) < self.F:
            frames = [self.history[0]] + frames
        return self.normalizer.normalize_obs(np.array(frames))

    def act(self, state, obs):
        if self.steps_left_in_skill == 0:
            self.z = self.policy.query(self._frames(), dataset_id=0)
            self.dec_state = self.model.decoder_initial_state(1)
            self.steps_left_in_skill = self.H
            self.queries += 1
            self.query_steps.append(len(self.history) - 1)
        obs_n = self.normalizer.normalize_obs(np.asarray(obs, dtype=np.float64))
        action_n, self.dec_state = self.model.decode_step_numpy(self.z, obs_n,
                                                                self.dec_state)
        self.steps_left_in_skill -= 1
        action = self.normalizer.denormalize_act(action_n)
        if not np.all(np.isfinite(action)):
            log.warning("non-finite action clamped during rollout")
            action = np.nan_to_num(action, nan=0.0, posinf=1.0, neginf=-1.0)
        return np.clip(action, -1.0, 1.0)

    def observe(self, obs):
        self.history.append(np.asarray(obs, dtype=np.float64))


def rollout(policy, skill_model, normalizer, task: TaskSpec,
            rng: np.random.Generator, budget: int | None = None,
            H: int = 10, F: int = 10) -> EpisodeResult:
    agent = SkillAgent(policy, skill_model, normalizer, H=H, F=F)
    result = run_episode(agent, task, rng, budget=budget)
    return result


def episode_rng(master_seed: int, task_name: str, episode: int) -> np.random.Generator:
    return stream(master_seed, "eval", task_name, episode)


def evaluate_agent_factory(factory, task: TaskSpec, episodes: int,
                           master_seed: int, budget: int | None = None):
    """Run `episodes` fixed-seed episodes; seeds depend only on (seed, task, i)."""
    results = []
    for i in range(episodes):
        agent = factory()
        results.append(run_episode(agent, task, episode_rng(master_seed, task.name, i),
                                   budget=budget))
    rate = sum(r.success for r in results) / episodes
    return rate, results
