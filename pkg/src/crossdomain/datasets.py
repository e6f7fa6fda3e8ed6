"""Transition datasets, normalization statistics, and DMCD/CSV file I/O."""

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ValidationError

DMCD_MAGIC = b"DMC1"
DMCD_VERSION = 1
FLAG_REWARD = 1
FLAG_TERMINAL = 2
MAX_DIM = 1 << 16

TARGET, SOURCE_REAL, SOURCE_GENERATED = 0, 1, 2
ORIGIN_NAMES = {TARGET: "target", SOURCE_REAL: "source-real", SOURCE_GENERATED: "source-generated"}
ORIGIN_CODES = {v: k for k, v in ORIGIN_NAMES.items()}


def _origin_code(origin):
    if isinstance(origin, str):
        try:
            return ORIGIN_CODES[origin]
        except KeyError:
            raise ValidationError(f"unknown origin tag {origin!r}; expected one of {sorted(ORIGIN_CODES)}")
    return int(origin)


def _rows(x, n):
    x = np.asarray(x, dtype=np.float32)
    return x if x.ndim == 2 else x.reshape(n, -1)


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Rows of ``(s, a, r, s', terminal)`` with one origin tag per row.

    Arrays are float32; ``origin`` is a uint8 code (see ``ORIGIN_NAMES``).
    Instances are treated as immutable.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    origin: np.ndarray = field(default=None)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=np.float32))
        n = s.shape[0]
        a = _rows(self.actions, n)
        r = np.asarray(self.rewards, dtype=np.float32).reshape(n)
        s2 = _rows(self.next_states, n)
        t = np.asarray(self.terminals, dtype=np.float32).reshape(n)
        if s2.shape != s.shape:
            raise DimensionError(f"next_states shape {s2.shape} != states shape {s.shape}")
        if not np.isin(t, (0.0, 1.0)).all():
            raise ValidationError("terminal flags must be 0 or 1")
        origin = self.origin
        if origin is None or isinstance(origin, (str, int)):
            origin = np.full(n, _origin_code(origin if origin is not None else SOURCE_REAL), np.uint8)
        origin = np.asarray(origin, dtype=np.uint8).reshape(n)
        for name, arr in (("states", s), ("actions", a), ("rewards", r), ("next_states", s2),
                          ("terminals", t), ("origin", origin)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.states.shape[0]

    @property
    def n_rows(self):
        return len(self)

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    def features(self):
        """``s ⊕ a ⊕ s'`` as float64, the space all distances are measured in."""
        return np.concatenate([self.states, self.actions, self.next_states], axis=1).astype(np.float64)

    def vectors(self):
        """``s ⊕ a ⊕ r ⊕ s'`` as float32, the space the diffusion model generates in."""
        return np.concatenate([self.states, self.actions, self.rewards[:, None], self.next_states], axis=1)

    @classmethod
    def from_vectors(cls, x, state_dim, action_dim, origin=SOURCE_GENERATED):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != 2 * state_dim + action_dim + 1:
            raise DimensionError(
                f"vector width {x.shape} does not match layout s{state_dim}+a{action_dim}+r+s'{state_dim}")
        sd, ad = state_dim, action_dim
        return cls(x[:, :sd], x[:, sd:sd + ad], x[:, sd + ad], x[:, sd + ad + 1:],
                   np.zeros(len(x), np.float32), origin=origin)

    def subset(self, idx):
        idx = np.asarray(idx)
        return TransitionDataset(self.states[idx], self.actions[idx], self.rewards[idx],
                                 self.next_states[idx], self.terminals[idx], self.origin[idx])

    def with_origin(self, origin):
        return TransitionDataset(self.states, self.actions, self.rewards, self.next_states,
                                 self.terminals, origin=_origin_code(origin))

    def records(self):
        """Packed float32 records in DMCD order: s, a, r, s', terminal."""
        return np.concatenate([self.states, self.actions, self.rewards[:, None], self.next_states,
                               self.terminals[:, None]], axis=1).astype("<f4")

    def fingerprint(self):
        """Row count, dims and a SHA-256 over the packed records."""
        digest = hashlib.sha256(np.ascontiguousarray(self.records()).tobytes()).hexdigest()
        return f"{self.n_rows}:{self.state_dim}:{self.action_dim}:{digest[:32]}"


def require_nonempty(ds, what="dataset"):
    if ds is None or len(ds) < 1:
        raise ValidationError(f"{what} must hold at least one row (row count >= 1)")
    return ds


def concat(a, b):
    """Rows of ``a`` followed by rows of ``b``; origin tags are carried along."""
    require_nonempty(a, "first dataset")
    require_nonempty(b, "second dataset")
    if (a.state_dim, a.action_dim) != (b.state_dim, b.action_dim):
        raise DimensionError(
            f"cannot concatenate datasets with dims (s={a.state_dim}, a={a.action_dim}) "
            f"and (s={b.state_dim}, a={b.action_dim})")
    return TransitionDataset(
        np.concatenate([a.states, b.states]), np.concatenate([a.actions, b.actions]),
        np.concatenate([a.rewards, b.rewards]), np.concatenate([a.next_states, b.next_states]),
        np.concatenate([a.terminals, b.terminals]), np.concatenate([a.origin, b.origin]))


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    """Per-dimension mean/std of ``s ⊕ a ⊕ s'`` plus separate reward stats.

    Population std; any std below 1e-8 is replaced by 1.
    """

    mean: np.ndarray
    std: np.ndarray
    reward_mean: float
    reward_std: float
    count: int

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0, 0)


STD_FLOOR = 1e-8


def _guarded_std(x, mean):
    std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
    return np.where(std < STD_FLOOR, 1.0, std)


def compute_norm_stats(*datasets):
    """NormStats over the union of ``datasets`` (features and rewards separately)."""
    if not datasets:
        raise ValidationError("need at least one dataset")
    for ds in datasets:
        require_nonempty(ds)
    x = np.concatenate([ds.features() for ds in datasets])
    r = np.concatenate([ds.rewards for ds in datasets]).astype(np.float64)
    mean = x.mean(axis=0)
    r_mean = float(r.mean())
    r_std = float(_guarded_std(r[:, None], r_mean)[0])
    return NormStats(mean, _guarded_std(x, mean), r_mean, r_std, len(x))


# --------------------------------------------------------------------------- DMCD binary


def save_dataset(ds, path):
    require_nonempty(ds)
    header = DMCD_MAGIC + struct.pack("<IIIII", DMCD_VERSION, ds.n_rows, ds.state_dim, ds.action_dim,
                                      FLAG_REWARD | FLAG_TERMINAL)
    Path(path).write_bytes(header + np.ascontiguousarray(ds.records()).tobytes())


def load_dataset(path, origin=SOURCE_REAL):
    """Read a DMCD file. Origin tags are not stored on disk, so the caller supplies one."""
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise FormatError("file shorter than the 24-byte DMCD header", offset=len(data))
    if data[:4] != DMCD_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DMCD_MAGIC!r}", offset=0)
    version, n_rows, state_dim, action_dim, flags = struct.unpack_from("<IIIII", data, 4)
    if version != DMCD_VERSION:
        raise FormatError(f"unsupported DMCD version {version}", offset=4)
    if n_rows == 0:
        raise FormatError("row count must be >= 1", offset=8)
    if not 1 <= state_dim <= MAX_DIM:
        raise FormatError(f"state_dim {state_dim} outside [1, {MAX_DIM}]", offset=12)
    if action_dim > MAX_DIM:
        raise FormatError(f"action_dim {action_dim} exceeds {MAX_DIM}", offset=16)
    if flags != FLAG_REWARD | FLAG_TERMINAL:
        raise FormatError(f"flags {flags:#x} unsupported; reward and terminal columns are required",
                          offset=20)
    width = 2 * state_dim + action_dim + 2
    expected = 24 + 4 * width * n_rows
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise FormatError(f"{kind} payload: {n_rows} rows of {width} floats need {expected} bytes, "
                          f"file has {len(data)}", offset=min(len(data), expected))
    rec = np.frombuffer(data, dtype="<f4", offset=24).reshape(n_rows, width).astype(np.float32)
    sd, ad = state_dim, action_dim
    term = rec[:, -1]
    if not np.isin(term, (0.0, 1.0)).all():
        bad = int(np.flatnonzero(~np.isin(term, (0.0, 1.0)))[0])
        raise FormatError("terminal flag not in {0, 1}", offset=24 + 4 * (bad * width + width - 1))
    return TransitionDataset(rec[:, :sd], rec[:, sd:sd + ad], rec[:, sd + ad], rec[:, sd + ad + 1:-1],
                             term, origin=origin)


# --------------------------------------------------------------------------- CSV


def csv_header(state_dim, action_dim):
    return ([f"s{i}" for i in range(state_dim)] + [f"a{i}" for i in range(action_dim)] + ["r"]
            + [f"ns{i}" for i in range(state_dim)] + ["terminal"])


def read_csv(path, origin=SOURCE_REAL):
    """Import a CSV whose header follows ``s0..,a0..,r,ns0..,terminal``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    state_dim = sum(1 for h in header if h.startswith("s") and h[1:].isdigit())
    action_dim = sum(1 for h in header if h.startswith("a") and h[1:].isdigit())
    if header != csv_header(state_dim, action_dim):
        raise FormatError(f"CSV header {header} does not follow the s*,a*,r,ns*,terminal convention")
    if not rows:
        raise ValidationError(f"{path}: row count must be >= 1")
    rec = np.asarray(rows, dtype=np.float32)
    sd, ad = state_dim, action_dim
    return TransitionDataset(rec[:, :sd], rec[:, sd:sd + ad], rec[:, sd + ad], rec[:, sd + ad + 1:-1],
                             rec[:, -1], origin=origin)


def write_csv(ds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(ds.state_dim, ds.action_dim))
        for row in ds.records():
            writer.writerow([repr(float(v)) for v in row])
