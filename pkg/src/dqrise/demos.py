"""Planar arm + 6-joint hand simulator, scripted experts and demo files.

Two desk-scale tasks:

* ``hooklid``: position the hand over a lid, curl the fingers into a hook
  while pressing down, then twist. Curling the fingers while still above the
  lid rim jams the descent, so hand and arm must move together.
* ``pickplace``: pinch an object, carry it to a fixed zone, release.

Actions are absolute targets; the simulator moves toward them with a
per-step cap.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .mathcore import make_rng

OPEN = np.array([0.1, 0.1, 0.1, 0.1, 0.1, 0.1])
HOOK = np.array([0.9, 0.9, 0.2, 0.2, 0.2, 0.8])
PINCH = np.array([0.8, 0.8, 0.1, 0.1, 0.1, 0.9])

HOME = np.array([0.0, 0.0, 1.0, 0.0])
ARM_LOW = np.array([-1.0, -1.0, 0.0, -np.pi])
ARM_HIGH = np.array([1.0, 1.0, 1.0, np.pi])
ARM_STEP = np.array([0.08, 0.08, 0.08, 0.2])
HAND_STEP = 0.15

ARM_DIM, HAND_DIM, OBJ_DIM = 4, 6, 3
OBS_DIM = ARM_DIM + HAND_DIM + OBJ_DIM

REACH_TOL = 0.08
POSE_TOL = 0.12
HOLD_TOL = 0.15
TWIST_ANGLE = 1.2
HOOK_MAX_Z = 0.35
LID_RIM_Z = 0.45     # curling the hand above this height over the lid jams it
LID_RIM_RADIUS = 0.15
OBJECT_Z = 0.2
PLACE_ZONE = np.array([0.0, 0.85])

# expert waypoints
HOVER_Z = 0.8
DESCENT_STEP = 0.05
HOOK_Z = 0.30        # hand fully curled by this height
LOW_Z = 0.20
CARRY_Z = 0.6
TWIST_TARGET = 2.2
ALIGN_TOL = 0.06
TAIL_STEPS = 3

TASKS = ("hooklid", "pickplace")
PHASES = {"hooklid": ("hook", "open"), "pickplace": ("grasp", "place")}


@dataclass(frozen=True)
class TaskSpec:
    name: str = "hooklid"
    object_range: float = 0.6

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASKS}")

    @property
    def phases(self):
        return PHASES[self.name]


@dataclass
class EnvState:
    task: str
    arm: np.ndarray
    hand: np.ndarray
    obj: np.ndarray                      # x, y, lid yaw
    flags: dict = field(default_factory=dict)
    t: int = 0
    hook_yaw: float = 0.0                # arm yaw when the hook latched
    holding: bool = False

    def copy(self):
        return replace(self, arm=self.arm.copy(), hand=self.hand.copy(), obj=self.obj.copy(),
                       flags=dict(self.flags))

    @property
    def success(self):
        return all(self.flags.values())

    def observation(self):
        return np.concatenate([self.arm, self.hand, self.obj])


def env_reset(task, seed) -> EnvState:
    task = task if isinstance(task, TaskSpec) else TaskSpec(task)
    rng = make_rng(seed)
    xy = rng.uniform(-task.object_range, task.object_range, size=2)
    return EnvState(task=task.name, arm=HOME.copy(), hand=OPEN.copy(),
                    obj=np.array([xy[0], xy[1], 0.0]),
                    flags={p: False for p in task.phases})


def _planar(a, b):
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def env_step(state: EnvState, arm_action, hand_action) -> EnvState:
    """Advance one step; returns a new state (the input is not modified)."""
    s = state.copy()
    arm_target = np.clip(np.asarray(arm_action, dtype=float), ARM_LOW, ARM_HIGH)
    hand_target = np.clip(np.asarray(hand_action, dtype=float), 0.0, 1.0)

    old_arm = s.arm
    s.hand = s.hand + np.clip(hand_target - s.hand, -HAND_STEP, HAND_STEP)
    new_arm = old_arm + np.clip(arm_target - old_arm, -ARM_STEP, ARM_STEP)

    if s.task == "hooklid":
        jammed = (not s.flags["hook"] and new_arm[2] < old_arm[2]
                  and old_arm[2] > LID_RIM_Z
                  and _planar(old_arm, s.obj) < LID_RIM_RADIUS
                  and np.linalg.norm(s.hand - HOOK) < POSE_TOL)
        if jammed:
            new_arm[2] = old_arm[2]
    s.arm = new_arm
    s.t += 1

    if s.task == "hooklid":
        _hooklid_phases(s, old_arm)
    else:
        _pickplace_phases(s)
    return s


def _hooklid_phases(s, old_arm):
    hook_dist = np.linalg.norm(s.hand - HOOK)
    if not s.flags["hook"]:
        if (_planar(s.arm, s.obj) < REACH_TOL and hook_dist < POSE_TOL
                and s.arm[2] < old_arm[2] and s.arm[2] < HOOK_MAX_Z):
            s.flags["hook"] = True
            s.hook_yaw = float(s.arm[3])
    elif not s.flags["open"]:
        if hook_dist < HOLD_TOL:
            s.obj[2] += s.arm[3] - old_arm[3]
            if abs(s.arm[3] - s.hook_yaw) > TWIST_ANGLE:
                s.flags["open"] = True
        else:
            s.flags["hook"] = False


def _pickplace_phases(s):
    pinch_dist = np.linalg.norm(s.hand - PINCH)
    if s.holding:
        if pinch_dist < HOLD_TOL:
            s.obj[:2] = s.arm[:2]
        else:
            s.holding = False
    grip_point = np.array([s.obj[0], s.obj[1], OBJECT_Z])
    if not s.holding and pinch_dist < POSE_TOL and np.linalg.norm(s.arm[:3] - grip_point) < REACH_TOL:
        s.holding = True
        s.flags["grasp"] = True
    if (s.flags["grasp"] and not s.flags["place"]
            and _planar(s.arm, PLACE_ZONE) < REACH_TOL and _planar(s.obj, PLACE_ZONE) < REACH_TOL
            and np.linalg.norm(s.hand - OPEN) < POSE_TOL):
        s.flags["place"] = True


def _progress(z_target, top, bottom):
    return float(np.clip((top - z_target) / (top - bottom), 0.0, 1.0))


def _nominal_action(s: EnvState, hand_lead=None):
    """Noise-free expert action. ``hand_lead`` switches the hook pose on early."""
    arm, obj = s.arm, s.obj
    if s.task == "hooklid":
        if s.flags["hook"]:
            return np.array([obj[0], obj[1], LOW_Z, TWIST_TARGET]), HOOK.copy()
        dist = _planar(arm, obj)
        if dist > ALIGN_TOL:
            z_target = HOVER_Z
        else:
            z_target = max(arm[2] - DESCENT_STEP, LOW_Z)
        hand = OPEN + _progress(z_target, HOVER_Z, HOOK_Z) * (HOOK - OPEN)
        if hand_lead is not None and dist < hand_lead * ARM_STEP[0] + ALIGN_TOL:
            hand = HOOK.copy()
        return np.array([obj[0], obj[1], z_target, 0.0]), hand

    if s.holding:
        if arm[2] < CARRY_Z - 0.1:
            return np.array([obj[0], obj[1], CARRY_Z, 0.0]), PINCH.copy()
        if _planar(arm, PLACE_ZONE) > ALIGN_TOL / 2:
            return np.array([PLACE_ZONE[0], PLACE_ZONE[1], CARRY_Z, 0.0]), PINCH.copy()
        return np.array([PLACE_ZONE[0], PLACE_ZONE[1], CARRY_Z, 0.0]), OPEN.copy()
    if s.flags["grasp"]:
        return np.array([PLACE_ZONE[0], PLACE_ZONE[1], CARRY_Z, 0.0]), OPEN.copy()
    dist = _planar(arm, obj)
    z_target = HOVER_Z if dist > ALIGN_TOL else max(arm[2] - DESCENT_STEP, OBJECT_Z)
    hand = OPEN + _progress(z_target, HOVER_Z, OBJECT_Z + DESCENT_STEP) * (PINCH - OPEN)
    return np.array([obj[0], obj[1], z_target, 0.0]), hand


def expert_policy(task, state: EnvState, rng, sigma_pos=0.01, sigma_hand=0.02, hand_lead=None):
    """Scripted demonstrator with Gaussian jitter on every commanded action."""
    arm, hand = _nominal_action(state, hand_lead)
    if sigma_pos:
        arm = arm + rng.normal(0.0, sigma_pos, size=ARM_DIM)
    if sigma_hand:
        hand = hand + rng.normal(0.0, sigma_hand, size=HAND_DIM)
    return np.clip(arm, ARM_LOW, ARM_HIGH), np.clip(hand, 0.0, 1.0)


@dataclass
class Demonstration:
    task: str
    seed: int
    obs: np.ndarray       # (n, 13)
    arm: np.ndarray       # (n, 4)
    hand: np.ndarray      # (n, 6) or relaxed scalars (n,) after relabeling
    original_hand: np.ndarray | None = None
    rank: np.ndarray | None = None

    def __len__(self):
        return self.obs.shape[0]

    @property
    def t(self):
        return np.arange(len(self))


def run_episode(task, seed, max_steps=120, sigma_pos=0.01, sigma_hand=0.02, hand_lead=None):
    """Roll the expert out; returns ``(Demonstration, final EnvState)``."""
    spec = task if isinstance(task, TaskSpec) else TaskSpec(task)
    state = env_reset(spec, seed)
    # separate stream for action jitter, derived from the episode seed
    rng = make_rng([int(seed), 1])
    obs, arms, hands = [], [], []
    tail = None
    for _ in range(max_steps):
        arm, hand = expert_policy(spec, state, rng, sigma_pos, sigma_hand, hand_lead)
        obs.append(state.observation())
        arms.append(arm)
        hands.append(hand)
        state = env_step(state, arm, hand)
        if state.success:
            tail = TAIL_STEPS if tail is None else tail - 1
            if tail == 0:
                break
    demo = Demonstration(spec.name, int(seed), np.array(obs), np.array(arms), np.array(hands))
    return demo, state


def _episode_or_none(args):
    task, seed = args
    demo, state = run_episode(task, seed)
    return demo if state.success else None


def generate_corpus(task="hooklid", n=50, seed=0, jobs=1):
    """Collect ``n`` successful expert demos from seeds ``seed, seed+1, ...``.

    Failed seeds are skipped and replaced by the next unused seed. Returns
    ``(demos, skipped_seeds)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    spec = TaskSpec(task)
    demos, skipped = [], []
    next_seed = seed
    while len(demos) < n:
        batch = list(range(next_seed, next_seed + n - len(demos)))
        next_seed += len(batch)
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as pool:
                results = list(pool.map(_episode_or_none, [(spec.name, s) for s in batch]))
        else:
            results = [_episode_or_none((spec.name, s)) for s in batch]
        for s, demo in zip(batch, results):
            if demo is None:
                skipped.append(s)
            else:
                demos.append(demo)
    return demos, skipped


# file format ---------------------------------------------------------------

FORMAT_VERSION = 1


def _floats(a):
    return [float(v) for v in np.asarray(a).ravel()]


def dumps_demos(demos, task, seed, skipped=(), relabeled=False):
    manifest = {"format_version": FORMAT_VERSION, "task": task, "n_demos": len(demos),
                "seed": seed}
    if skipped:
        manifest["skipped_seeds"] = list(skipped)
    if relabeled:
        manifest["relabeled"] = True
    lines = [json.dumps(manifest, sort_keys=True)]
    for i, d in enumerate(demos):
        for t in range(len(d)):
            rec = {"demo": i, "t": t, "obs": _floats(d.obs[t]), "arm": _floats(d.arm[t])}
            if relabeled:
                rec["hand"] = {"z": float(d.hand[t]), "rank": int(d.rank[t])}
                rec["original_hand"] = _floats(d.original_hand[t])
            else:
                rec["hand"] = _floats(d.hand[t])
            rec["seed"] = d.seed
            lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def save_demos(path, demos, task, seed, skipped=(), relabeled=False):
    with open(path, "w") as fh:
        fh.write(dumps_demos(demos, task, seed, skipped, relabeled))


def _check_vec(rec, key, n, lo=None, hi=None):
    v = rec.get(key)
    if not isinstance(v, list) or len(v) != n:
        raise ValueError(f"record field {key!r} must be a list of {n} numbers")
    arr = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"record field {key!r} has non-finite entries")
    if lo is not None and (np.any(arr < lo) or np.any(arr > hi)):
        raise ValueError(f"record field {key!r} out of range")
    return arr


def load_demos(path):
    """Read a demo file; returns ``(demos, manifest)``. Raises ValueError on schema errors."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty demo file")
    try:
        manifest = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON in demo file: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported or missing format_version")
    task = manifest.get("task")
    TaskSpec(task)
    relabeled = bool(manifest.get("relabeled"))
    grouped = {}
    for rec in records:
        grouped.setdefault(rec.get("demo"), []).append(rec)
    demos = []
    for key in sorted(grouped):
        recs = grouped[key]
        if [r.get("t") for r in recs] != list(range(len(recs))):
            raise ValueError(f"demo {key}: t must increase from 0 in steps of 1")
        obs = np.array([_check_vec(r, "obs", OBS_DIM) for r in recs])
        arm = np.array([_check_vec(r, "arm", ARM_DIM, ARM_LOW, ARM_HIGH) for r in recs])
        if relabeled:
            try:
                z = np.array([float(r["hand"]["z"]) for r in recs])
                rank = np.array([int(r["hand"]["rank"]) for r in recs])
            except (KeyError, TypeError) as exc:
                raise ValueError(f"demo {key}: malformed relaxed hand field") from exc
            orig = np.array([_check_vec(r, "original_hand", HAND_DIM, 0.0, 1.0) for r in recs])
            demos.append(Demonstration(task, int(recs[0].get("seed", key)), obs, arm, z, orig, rank))
        else:
            hand = np.array([_check_vec(r, "hand", HAND_DIM, 0.0, 1.0) for r in recs])
            demos.append(Demonstration(task, int(recs[0].get("seed", key)), obs, arm, hand))
    if manifest.get("n_demos") != len(demos):
        raise ValueError("manifest n_demos does not match the records")
    return demos, manifest


def hand_states(demos):
    """Stack the raw hand states of all demos into an (n, 6) array."""
    return np.concatenate([d.original_hand if d.original_hand is not None else d.hand
                           for d in demos])
