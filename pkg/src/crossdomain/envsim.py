"""Point-mass environments with controllable dynamics shift.

A mass moves in ``n_axes`` dimensions (2 by default: state = position and
velocity, 4 numbers; action = per-axis acceleration in [-1, 1]). Source and
target variants share reward, start distribution, horizon and action box and
differ only in gravity, control gain, damping and per-axis action clip.

Update rule per step (``dt`` is fixed)::

    v' = damping * v + gain * clip(a, joint_clip) - g * dt * e_last
    p' = p + v' * dt   (+ Gaussian process noise on both)
    r  = -||p' - goal|| + bonus * [||p' - goal|| <= goal_radius] + reward_offset
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import SOURCE_REAL, TARGET, TransitionDataset
from .errors import NonFiniteError, ValidationError

DYNAMICS_FIELDS = ("gravity", "gain", "damping", "joint_clip")


@dataclass(frozen=True)
class EnvSpec:
    name: str = "pointmass"
    n_axes: int = 2
    gravity: float = 1.0
    gain: float = 0.2
    damping: float = 0.9
    joint_clip: tuple = (1.0, 1.0)
    dt: float = 0.1
    noise_std: float = 0.01
    horizon: int = 50
    goal: tuple = (1.0, 1.0)
    goal_radius: float = 0.1
    goal_bonus: float = 1.0
    goal_terminates: bool = False
    start_spread: float = 0.1
    reward_offset: float = 0.0
    reward_id: str = "neg-distance-bonus"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if len(self.joint_clip) != self.n_axes or len(self.goal) != self.n_axes:
            raise ValidationError(f"joint_clip and goal need {self.n_axes} entries")
        object.__setattr__(self, "joint_clip", tuple(float(c) for c in self.joint_clip))
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))

    @property
    def state_dim(self):
        return 2 * self.n_axes

    @property
    def action_dim(self):
        return self.n_axes

    def to_text(self):
        """Flat ``key=value`` block, one entry per line."""
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(float(v)) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text):
        defaults = asdict(cls())
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in defaults:
                raise ValidationError(f"unknown EnvSpec key {key!r}")
            kwargs[key] = _parse_like(defaults[key], value.strip())
        return cls(**kwargs)


def _parse_like(default, value):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def gravity_shift(spec, factor=0.5):
    """Target variant with gravity scaled by ``factor`` (halved by default)."""
    return replace(spec, name=f"{spec.name}-gravity{factor:g}", gravity=spec.gravity * factor)


def kinematic_shift(spec, axis=0, limit=0.3):
    """Target variant whose action on ``axis`` is clipped to ``[-limit, limit]``."""
    clip = list(spec.joint_clip)
    clip[axis] = limit
    return replace(spec, name=f"{spec.name}-clip{axis}", joint_clip=tuple(clip))


def shared_fields_match(a, b):
    """True when two specs differ at most in dynamics parameters."""
    da, db = asdict(a), asdict(b)
    return all(da[k] == db[k] for k in da if k not in DYNAMICS_FIELDS + ("name",))


def reset(spec, n, rng):
    s = np.zeros((n, spec.state_dim))
    s[:, : spec.n_axes] = rng.uniform(-spec.start_spread, spec.start_spread, (n, spec.n_axes))
    return s


def step(spec, state, action, rng=None):
    """Advance a batch (or single) state; returns ``(next_state, reward, terminal)``."""
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    s = np.atleast_2d(state)
    a = np.atleast_2d(np.asarray(action, dtype=np.float64))
    if not np.isfinite(s).all():
        raise NonFiniteError("non-finite state passed to step")
    if not np.isfinite(a).all():
        raise NonFiniteError("non-finite action passed to step")
    na = spec.n_axes
    clip = np.asarray(spec.joint_clip)
    a = np.clip(np.clip(a, -1.0, 1.0), -clip, clip)
    p, v = s[:, :na], s[:, na:]
    v2 = spec.damping * v + spec.gain * a
    v2[:, -1] -= spec.gravity * spec.dt
    p2 = p + v2 * spec.dt
    if spec.noise_std > 0:
        rng = np.random.default_rng(rng)
        p2 = p2 + spec.noise_std * rng.standard_normal(p2.shape)
        v2 = v2 + spec.noise_std * rng.standard_normal(v2.shape)
    dist = np.linalg.norm(p2 - np.asarray(spec.goal), axis=1)
    inside = dist <= spec.goal_radius
    reward = -dist + spec.goal_bonus * inside + spec.reward_offset
    terminal = inside & spec.goal_terminates
    s2 = np.concatenate([p2, v2], axis=1)
    if single:
        return s2[0], float(reward[0]), bool(terminal[0])
    return s2, reward, terminal


# --------------------------------------------------------------------------- policies


class RandomPolicy:
    def __init__(self, spec):
        self.spec = spec

    def __call__(self, states, rng):
        return rng.uniform(-1.0, 1.0, (len(states), self.spec.action_dim))


class ExpertPolicy:
    """Model-based controller using the environment's own dynamics.

    Asks for a velocity ``approach * (goal - p) / dt`` capped at ``max_speed``
    and inverts the velocity update (gravity included) to get the action.
    """

    def __init__(self, spec, approach=0.3, max_speed=1.5):
        self.spec = spec
        self.approach = approach
        self.max_speed = max_speed

    def __call__(self, states, rng=None):
        spec = self.spec
        na = spec.n_axes
        p, v = states[:, :na], states[:, na:]
        v_des = self.approach * (np.asarray(spec.goal) - p) / spec.dt
        speed = np.linalg.norm(v_des, axis=1, keepdims=True)
        v_des = v_des * np.minimum(1.0, self.max_speed / np.maximum(speed, 1e-12))
        need = v_des - spec.damping * v
        need[:, -1] += spec.gravity * spec.dt
        return np.clip(need / spec.gain, -1.0, 1.0)


class NoisyPolicy:
    """Base policy with Gaussian action noise and uniform random-action mixing."""

    def __init__(self, base, noise=0.5, random_prob=0.3):
        self.base = base
        self.noise = noise
        self.random_prob = random_prob

    def __call__(self, states, rng):
        a = self.base(states, rng)
        a = a + self.noise * rng.standard_normal(a.shape)
        swap = rng.random(len(states)) < self.random_prob
        a[swap] = rng.uniform(-1.0, 1.0, (int(swap.sum()), a.shape[1]))
        return np.clip(a, -1.0, 1.0)


def train_expert(spec, episodes=100, seed=0, grid=(0.1, 0.2, 0.3, 0.5, 0.7, 1.0)):
    """Pick the controller gain with the best mean return on ``spec``."""
    best = None
    for approach in grid:
        policy = ExpertPolicy(spec, approach=approach)
        ret = rollout(spec, policy, episodes, seed)[0].mean()
        if best is None or ret > best[0]:
            best = (ret, policy)
    return best[1]


# --------------------------------------------------------------------------- rollouts


def rollout(spec, policy, episodes, seed, record=False):
    """Run ``episodes`` episodes in lockstep; returns per-episode returns (and transitions)."""
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    s = reset(spec, episodes, rng)
    alive = np.ones(episodes, bool)
    returns = np.zeros(episodes)
    rows = []
    for _ in range(spec.horizon):
        a = np.asarray(policy(s, rng), dtype=np.float64)
        if not np.isfinite(a).all():
            raise NonFiniteError("policy produced a non-finite action")
        s2, r, term = step(spec, s, a, rng)
        returns += np.where(alive, r, 0.0)
        if record:
            idx = np.flatnonzero(alive)
            rows.append((s[idx], a[idx], r[idx], s2[idx], term[idx], idx))
        alive &= ~term
        s = s2
        if not alive.any():
            break
    if not record:
        return returns, None
    parts = [np.concatenate(c) for c in zip(*rows)]
    return returns, parts


@dataclass
class EvalReference:
    """Random and expert returns on a spec, with the seeds they were measured on."""

    random_return: float
    expert_return: float
    episodes: int
    random_seed: int
    expert_seed: int
    expert_approach: float = 0.3
    spec_name: str = ""

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValidationError(
                f"degenerate reference: expert return {self.expert_return} <= random {self.random_return}")

    def normalized_score(self, ret):
        return (ret - self.random_return) / (self.expert_return - self.random_return) * 100.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def make_reference(spec, expert=None, episodes=100, seed=0):
    expert = expert or train_expert(spec, seed=seed + 1)
    j_r = rollout(spec, RandomPolicy(spec), episodes, seed)[0].mean()
    j_e = rollout(spec, expert, episodes, seed + 1)[0].mean()
    return EvalReference(float(j_r), float(j_e), episodes, seed, seed + 1,
                         expert_approach=expert.approach, spec_name=spec.name)


def evaluate(spec, policy, ref, episodes=100, seed=0):
    """Mean return of ``policy`` (called as ``policy(states, rng)``) and its normalized score."""
    returns, _ = rollout(spec, policy, episodes, seed)
    j = float(returns.mean())
    return j, float(ref.normalized_score(j))


@dataclass
class CollectedData:
    dataset: TransitionDataset
    mean_return: float
    quality: str
    policy: object = field(repr=False)
    score_ratio: float = float("nan")


def medium_policy(spec, expert, ref, seed=0, episodes=100, lo=0.3, hi=0.6, max_iter=30):
    """Noisy expert whose normalized return lands in ``[lo, hi]`` of the expert's.

    Starts from action noise 0.5 with 30% random actions and bisects the
    random-action probability until the ratio falls inside the band.
    """
    low_p, high_p = 0.0, 1.0
    p = 0.3
    for _ in range(max_iter):
        policy = NoisyPolicy(expert, noise=0.5, random_prob=p)
        ratio = ref.normalized_score(rollout(spec, policy, episodes, seed)[0].mean()) / 100.0
        if lo <= ratio <= hi:
            return policy, ratio
        if ratio > hi:
            low_p = p
        else:
            high_p = p
        p = 0.5 * (low_p + high_p)
    raise ValidationError(f"could not tune a medium policy into [{lo}, {hi}] of expert return")


def collect_dataset(spec, quality, n_transitions, seed=0, expert=None, ref=None, origin=SOURCE_REAL):
    """Roll out a random/medium/expert behavior policy until ``n_transitions`` rows exist."""
    if quality not in ("random", "medium", "expert"):
        raise ValidationError(f"unknown policy quality {quality!r}")
    ratio = float("nan")
    if quality == "random":
        policy = RandomPolicy(spec)
    else:
        if expert is None:
            raise ValidationError("an expert policy is required for medium/expert data")
        policy = expert
        if quality == "medium":
            if ref is None:
                raise ValidationError("medium data needs an EvalReference to tune against")
            policy, ratio = medium_policy(spec, expert, ref, seed=seed + 7)
    episodes = -(-n_transitions // spec.horizon)
    returns, (s, a, r, s2, term, episode) = rollout(spec, policy, episodes, seed, record=True)
    # rows arrive time-major; reorder episode-major before truncating
    order = np.argsort(episode, kind="stable")[:n_transitions]
    s, a, r, s2, term = (x[order] for x in (s, a, r, s2, term))
    ds = TransitionDataset(s, a, r, s2, term.astype(np.float32), origin=origin)
    return CollectedData(ds, float(returns.mean()), quality, policy, ratio)


def target_dataset(spec, quality, n_transitions=5000, seed=0, expert=None, ref=None):
    return collect_dataset(spec, quality, n_transitions, seed, expert, ref, origin=TARGET)
