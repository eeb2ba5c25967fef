"""Incremental decoding state, wait-k scheduling and stream traces.

A ``DecodeState`` holds the running sums sum_j phi_b(k_j) v_j^T and
sum_j phi_b(k_j) for each re-weighting branch b, so appending a token and
decoding a query cost O(d^2) whatever the number of tokens seen. The
exception is ``step_length``: every step re-proportions every key, so the
state keeps the raw features and rebuilds at decode time.

``simulate_simultaneous`` lives in ``model`` next to the model it drives;
this module only knows about vectors.
"""
from dataclasses import dataclass, field
import json
import math

import numpy as np

from .attention import DENOM_FLOOR, HALF_PI, ReweightScheme, rope_angles

APPEND = "unidirectional_append"
RECOMPUTE = "bidirectional_recompute"
ENC_MODES = (APPEND, RECOMPUTE)


@dataclass
class DecodeState:
    scheme: ReweightScheme
    M: np.ndarray
    z: np.ndarray
    tokens_seen: int = 0
    ops: int = 0
    log_k: list = field(default_factory=list)
    log_v: list = field(default_factory=list)

    @property
    def d(self):
        return self.M.shape[1]


def state_init(scheme, d, e=None):
    scheme = ReweightScheme.parse(scheme)
    e = d if e is None else e
    return DecodeState(scheme, np.zeros((scheme.branches, d, e)), np.zeros((scheme.branches, d)))


def _rotate(x, position, base):
    ang = rope_angles([position], x.shape[-1], base)[0]
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[0::2] = x[0::2] * c - x[1::2] * s
    out[1::2] = x[0::2] * s + x[1::2] * c
    return out


def _branch_weights(scheme, p):
    if p is None:
        raise ValueError(f"scheme {scheme.kind!r} needs a proportion for every token")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion {p} outside [0, 1]")
    return np.array([math.cos(HALF_PI * p), math.sin(HALF_PI * p)])


def state_append(s, k_vec, v_vec, p_k=None, position=None, leap_k=None):
    """Fold one key/value pair into the running sums (mutates and returns ``s``).

    For ``cos_leap`` the key proportion is taken from ``leap_k`` applied to
    this key alone when ``p_k`` is not given.
    """
    k_vec = np.asarray(k_vec, dtype=np.float64)
    v_vec = np.asarray(v_vec, dtype=np.float64)
    if k_vec.shape != (s.d,) or v_vec.shape != (s.M.shape[2],):
        raise ValueError(f"state_append: expected key ({s.d},) and value ({s.M.shape[2]},)")
    phi = np.maximum(k_vec, 0.0)
    kind = s.scheme.kind
    if kind == "step_length":
        s.log_k.append(phi)
        s.log_v.append(v_vec)
    elif kind == "rope":
        pos = s.tokens_seen if position is None else position
        s.M[0] += np.outer(_rotate(phi, pos, s.scheme.rope_base), v_vec)
        s.z[0] += phi
    elif s.scheme.is_cos:
        if p_k is None and leap_k is not None:
            p_k = float(leap_k.forward_numpy(k_vec))
        w = _branch_weights(s.scheme, p_k)
        for b in range(2):
            s.M[b] += w[b] * np.outer(phi, v_vec)
            s.z[b] += w[b] * phi
    else:
        s.M[0] += np.outer(phi, v_vec)
        s.z[0] += phi
    s.ops += s.d + s.M.shape[2] if kind == "step_length" else s.M.size + s.z.size
    s.tokens_seen += 1
    return s


def state_decode(s, q_vec, p_q=None, position=None, leap_q=None):
    """Attend one query against the state. Returns ``(output, flagged)``.

    ``flagged`` is True when the denominator fell below the floor and the
    output is the zero vector.
    """
    q_vec = np.asarray(q_vec, dtype=np.float64)
    if q_vec.shape != (s.d,):
        raise ValueError(f"state_decode: expected query ({s.d},), got {q_vec.shape}")
    phi = np.maximum(q_vec, 0.0)
    kind = s.scheme.kind
    if kind == "step_length":
        t = s.tokens_seen
        if t == 0:
            num, den = np.zeros(s.M.shape[2]), 0.0
        else:
            K, V = np.array(s.log_k), np.array(s.log_v)
            sigma = np.cos(HALF_PI * (1.0 - np.arange(1, t + 1) / t))
            w = (K @ phi) * sigma
            num, den = w @ V, w.sum()
        s.ops += t * (s.d + s.M.shape[2])
    elif kind == "rope":
        pos = max(s.tokens_seen - 1, 0) if position is None else position
        num = _rotate(phi, pos, s.scheme.rope_base) @ s.M[0]
        den = phi @ s.z[0]
        s.ops += s.M.size + s.z.size
    elif s.scheme.is_cos:
        if p_q is None and leap_q is not None:
            p_q = float(leap_q.forward_numpy(q_vec))
        w = _branch_weights(s.scheme, p_q)
        num = w[0] * (phi @ s.M[0]) + w[1] * (phi @ s.M[1])
        den = w[0] * (phi @ s.z[0]) + w[1] * (phi @ s.z[1])
        s.ops += s.M.size + s.z.size
    else:
        num, den = phi @ s.M[0], phi @ s.z[0]
        s.ops += s.M.size + s.z.size
    if den < DENOM_FLOOR:
        return np.zeros(s.M.shape[2]), True
    return num / den, False


def cross_attention_stream_update(enc_mode, state, keys, values, p_k=None, positions=None, leap_k=None):
    """Bring a cross-attention state up to date after the encoder consumed new frames.

    ``unidirectional_append``: ``keys``/``values`` are the new frames only and
    are appended. ``bidirectional_recompute``: they are the complete
    re-encoded source and the state is rebuilt from scratch.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("cross_attention_stream_update needs at least one new frame")
    if values.shape[0] != keys.shape[0]:
        raise ValueError("keys and values must have the same number of frames")
    if enc_mode not in ENC_MODES:
        raise ValueError(f"unknown encoder mode {enc_mode!r}; choose from {ENC_MODES}")
    if enc_mode == RECOMPUTE:
        fresh = state_init(state.scheme, state.d, state.M.shape[2])
        fresh.ops = state.ops
        state = fresh
    start = state.tokens_seen
    for n in range(keys.shape[0]):
        pk = None if p_k is None else float(p_k[n])
        pos = start + n if positions is None else int(positions[n])
        state_append(state, keys[n], values[n], p_k=pk, position=pos, leap_k=leap_k)
    return state


# ---------------------------------------------------------------------------
# wait-k


OFFLINE_K = 10 ** 9


@dataclass(frozen=True)
class WaitKSchedule:
    """Lag ``k`` in read units; one read unit is ``predecision_ratio`` encoder frames."""

    k: int = 3
    predecision_ratio: int = 1

    def __post_init__(self):
        if self.k < 1 or self.predecision_ratio < 1:
            raise ValueError("wait-k needs k >= 1 and predecision_ratio >= 1")

    @classmethod
    def offline(cls, predecision_ratio=1):
        return cls(OFFLINE_K, predecision_ratio)

    def total_blocks(self, n_frames):
        return math.ceil(n_frames / self.predecision_ratio)


def waitk_reads_required(i, sched, total_blocks):
    """Read units that must be consumed before writing target token ``i`` (1-based)."""
    if i < 1:
        raise ValueError("target index is 1-based")
    return min(sched.k + i - 1, total_blocks)


def frames_required(i, sched, n_frames):
    return min(waitk_reads_required(i, sched, sched.total_blocks(n_frames)) * sched.predecision_ratio, n_frames)


def default_max_len(sched, n_frames):
    """Generation guard: the source-implied length plus 10 tokens."""
    return sched.total_blocks(n_frames) + 10


@dataclass
class Action:
    action: str
    units: int
    token: int = None
    step: int = 0

    def to_dict(self):
        return {"action": self.action, "units": self.units, "token": self.token, "step": self.step}


@dataclass
class StreamTrace:
    actions: list = field(default_factory=list)
    truncated: bool = False

    def read(self, units, step):
        self.actions.append(Action("READ", int(units), None, int(step)))

    def write(self, token, step):
        self.actions.append(Action("WRITE", 1, int(token), int(step)))

    @property
    def tokens(self):
        return [a.token for a in self.actions if a.action == "WRITE"]

    def reads_before_writes(self):
        """Cumulative frames read before each WRITE, in order."""
        out, total = [], 0
        for a in self.actions:
            if a.action == "READ":
                total += a.units
            else:
                out.append(total)
        return out

    def to_jsonl(self):
        return "".join(json.dumps(a.to_dict()) + "\n" for a in self.actions)

    @classmethod
    def from_jsonl(cls, text):
        acts = []
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                if set(obj) != {"action", "units", "token", "step"} or obj["action"] not in ("READ", "WRITE"):
                    raise ValueError(f"malformed trace line: {line!r}")
                acts.append(Action(obj["action"], obj["units"], obj["token"], obj["step"]))
        return cls(acts)


def validate_trace(trace, sched, n_frames):
    """Check the cumulative-read rule for every write. Returns a list of problems (empty if sound)."""
    problems = []
    for i, got in enumerate(trace.reads_before_writes(), start=1):
        want = frames_required(i, sched, n_frames)
        if got != want:
            problems.append(f"write {i}: read {got} frames, schedule requires {want}")
    total = sum(a.units for a in trace.actions if a.action == "READ")
    if total > n_frames:
        problems.append(f"read {total} frames from a {n_frames}-frame source")
    return problems
