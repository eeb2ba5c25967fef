"""Attention kernels: softmax baseline, proportion re-weighted linear kernels and their oracle.

Linear kernels are assembled from ``tensor`` primitives so that the same
code serves inference, gradient checks and training. The quadratic oracle
is separate, numpy-only code that builds the full re-weight matrix
explicitly; the two paths share nothing but the feature map definition.

Proportion schemes
------------------
``none``                 sigma = 1
``cos_fixed``            p = i / N (1-based), sigma = cos(pi/2 (p_q - p_k))
``cos_leap``             p from a learned module per token (query and key side)
``rope``                 rotary transform of the ReLU features, unrotated denominator
``step_length``          causal: query i sees keys at j / i, itself at 1
``max_length``           p = i / L for a fixed L >= N
``stepping_max_length``  p = i / (step * ceil(i / step))
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCHEME_KINDS = ("none", "cos_fixed", "cos_leap", "rope", "step_length", "max_length",
                "stepping_max_length")
COS_KINDS = ("cos_fixed", "cos_leap", "step_length", "max_length", "stepping_max_length")
PROPORTION_MODES = ("exact", "step_length", "max_length", "stepping_max_length")
DENOM_FLOOR = 1e-6
HALF_PI = 0.5 * math.pi


# ---------------------------------------------------------------------------
# types


@dataclass
class AttentionInputs:
    """Per-head queries (..., N1, d), keys and values (..., N2, d)."""

    q: Tensor
    k: Tensor
    v: Tensor
    causal: bool = False
    scale: float = None

    def __post_init__(self):
        self.q, self.k, self.v = (x if isinstance(x, Tensor) else Tensor(x) for x in (self.q, self.k, self.v))
        q, k, v = self.q, self.k, self.v
        if q.ndim < 2 or k.ndim != q.ndim or v.ndim != q.ndim:
            raise ValueError(f"attention inputs must share rank >= 2: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[-1] != k.shape[-1]:
            raise ValueError(f"query/key feature extents differ: {q.shape[-1]} vs {k.shape[-1]}")
        if k.shape[-2] != v.shape[-2]:
            raise ValueError(f"keys and values need the same length: {k.shape[-2]} vs {v.shape[-2]}")
        if not (q.shape[:-2] == k.shape[:-2] == v.shape[:-2]):
            raise ValueError("leading (batch/head) extents differ")
        if self.causal and q.shape[-2] != k.shape[-2]:
            raise ValueError("causal attention needs N1 == N2")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(q.shape[-1])

    @property
    def n_queries(self):
        return self.q.shape[-2]

    @property
    def n_keys(self):
        return self.k.shape[-2]


@dataclass(frozen=True)
class ReweightScheme:
    kind: str = "none"
    leap_q: bool = True
    leap_k: bool = True
    rope_base: float = 10000.0
    max_length: int = None
    step: int = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown re-weighting scheme {self.kind!r}; choose from {SCHEME_KINDS}")
        if self.kind == "max_length" and not (self.max_length and self.max_length > 0):
            raise ValueError("max_length scheme needs a positive max_length")
        if self.kind == "stepping_max_length" and not (self.step and self.step > 0):
            raise ValueError("stepping_max_length scheme needs a positive step")

    @property
    def is_cos(self):
        return self.kind in COS_KINDS

    @property
    def branches(self):
        return 2 if self.is_cos else 1

    @classmethod
    def parse(cls, spec):
        if isinstance(spec, cls):
            return spec
        if isinstance(spec, str):
            return cls(kind=spec)
        if isinstance(spec, dict):
            unknown = set(spec) - set(cls.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown scheme keys: {sorted(unknown)}")
            return cls(**spec)
        raise TypeError(f"cannot build a scheme from {spec!r}")


class LeaPModule:
    """Two-layer bottleneck ``sigmoid(relu(x W1 + b1) W2 + b2)`` mapping a head vector to a proportion.

    One instance is shared by every head of an attention block.
    """

    def __init__(self, d, f=1, rng=None):
        if f < 1 or d % f:
            raise ValueError(f"downsample factor {f} must divide head dimension {d}")
        rng = np.random.default_rng(0) if rng is None else rng
        h = d // f
        self.d, self.f = d, f
        self.W1 = Tensor(rng.uniform(-1, 1, (d, h)) / math.sqrt(d), requires_grad=True)
        self.b1 = Tensor(np.zeros(h), requires_grad=True)
        self.W2 = Tensor(rng.uniform(-1, 1, (h, 1)) / math.sqrt(h), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters().values())

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ValueError(f"LeaP expects feature extent {self.d}, got {x.shape[-1]}")
        hidden = T.relu(T.add_bias(T.matmul(x, self.W1), self.b1))
        logit = T.add_bias(T.matmul(hidden, self.W2), self.b2)
        return T.sigmoid(T.reshape(logit, x.shape[:-1]))

    __call__ = forward

    def forward_numpy(self, x):
        """Same map in plain numpy (no tape); used by the oracle and streaming paths."""
        hidden = np.maximum(x @ self.W1.data + self.b1.data, 0.0)
        logit = (hidden @ self.W2.data)[..., 0] + self.b2.data[0]
        return 0.5 * (1.0 + np.tanh(0.5 * logit))


@dataclass
class LeaPPair:
    """Query-side and key-side modules of one attention block (either may be absent)."""

    q: LeaPModule = None
    k: LeaPModule = None

    def parameters(self):
        out = {}
        for side, mod in (("q", self.q), ("k", self.k)):
            if mod is not None:
                out.update({f"{side}.{n}": p for n, p in mod.parameters().items()})
        return out


@dataclass
class ProportionVector:
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("proportions must lie in [0, 1]")


# ---------------------------------------------------------------------------
# proportions


def feature_map(x):
    """ReLU feature map applied separately to queries and keys."""
    return T.relu(x) if isinstance(x, Tensor) else np.maximum(x, 0.0)


def cos_branch_factors(p):
    """Per-token ``(cos(pi/2 p), sin(pi/2 p))``; both are nonnegative for p in [0, 1]."""
    p = p.values if isinstance(p, ProportionVector) else np.asarray(p, dtype=np.float64)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("proportions must lie in [0, 1]")
    return np.cos(HALF_PI * p), np.sin(HALF_PI * p)


def fixed_proportions(n, mode="exact", max_length=None, step=None, step_count=None):
    """Position-derived proportions for tokens 1..n.

    ``step_length`` returns ``i / step_count`` (the view after ``step_count``
    decoding steps; defaults to n, which coincides with ``exact``).
    """
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    i = np.arange(1, n + 1, dtype=np.float64)
    if mode == "exact":
        return i / n
    if mode == "step_length":
        t = n if step_count is None else step_count
        if t < n:
            raise ValueError(f"step_count {t} is smaller than the sequence length {n}")
        return i / t
    if mode == "max_length":
        if max_length is None or max_length < n:
            raise ValueError(f"max_length {max_length} must be >= sequence length {n}")
        return i / max_length
    if mode == "stepping_max_length":
        if not step or step < 1:
            raise ValueError("stepping_max_length needs a positive step")
        return i / (step * np.ceil(i / step))
    raise ValueError(f"unknown proportion mode {mode!r}")


def leap_forward(m, x):
    return m.forward(x if isinstance(x, Tensor) else Tensor(x))


def _side_fixed(scheme, n):
    if scheme.kind in ("cos_fixed", "cos_leap", "step_length"):
        return fixed_proportions(n, "exact")
    if scheme.kind == "max_length":
        return fixed_proportions(n, "max_length", max_length=scheme.max_length)
    return fixed_proportions(n, "stepping_max_length", step=scheme.step)


def _leap_for(scheme, leap, side):
    if scheme.kind != "cos_leap":
        return None
    wanted = scheme.leap_q if side == "q" else scheme.leap_k
    if not wanted:
        return None
    mod = None if leap is None else getattr(leap, side)
    if mod is None:
        raise ValueError(f"cos_leap with leap_{side}=True needs a {side}-side LeaP module")
    return mod


def _proportion_tensors(inp, scheme, leap):
    """Query/key proportions as tensors shaped like the rows of q and k."""
    out = []
    for side, x in (("q", inp.q), ("k", inp.k)):
        mod = _leap_for(scheme, leap, side)
        if mod is not None:
            out.append(mod.forward(x))
        else:
            p = _side_fixed(scheme, x.shape[-2])
            out.append(Tensor(np.broadcast_to(p, x.shape[:-1]).copy()))
    return out


def _proportion_arrays(inp, scheme, leap):
    out = []
    for side, x in (("q", inp.q), ("k", inp.k)):
        mod = _leap_for(scheme, leap, side)
        if mod is not None:
            out.append(mod.forward_numpy(x.data))
        else:
            out.append(np.broadcast_to(_side_fixed(scheme, x.shape[-2]), x.shape[:-1]))
    return out


# ---------------------------------------------------------------------------
# rotary helpers


def rope_angles(positions, d, base=10000.0):
    if d % 2:
        raise ValueError(f"rotary transform needs even d, got {d}")
    theta = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    return np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]


def rotation_matrix(position, d, base=10000.0):
    """Block-diagonal d x d rotation applied at ``position``."""
    ang = rope_angles([position], d, base)[0]
    R = np.zeros((d, d))
    for m, a in enumerate(ang):
        c, s = math.cos(a), math.sin(a)
        R[2 * m:2 * m + 2, 2 * m:2 * m + 2] = [[c, -s], [s, c]]
    return R


# ---------------------------------------------------------------------------
# kernels


def softmax_attention(inp):
    """Exact quadratic attention, optionally lower-triangular masked."""
    scores = T.scale_shift(T.matmul(inp.q, T.swap_last(inp.k)), inp.scale, 0.0)
    if inp.causal:
        scores = T.causal_mask_fill(scores)
    return T.matmul(T.softmax_rows(scores), inp.v)


def _ones_col(v):
    return Tensor(np.ones(v.shape[:-1] + (1,)))


def _attend(a, b, v, causal):
    if causal:
        return T.prefix_attend(a, b, v)
    return T.matmul(a, T.matmul(T.swap_last(b), v))


def _step_length_causal(fq, fk, v):
    n = fq.shape[-2]
    i = np.arange(1, n + 1, dtype=np.float64)[:, None]
    j = np.arange(1, n + 1, dtype=np.float64)[None, :]
    sigma = np.where(j <= i, np.cos(HALF_PI * (1.0 - j / i)), 0.0)
    scores = T.mul(T.matmul(fq, T.swap_last(fk)), Tensor(np.broadcast_to(sigma, fq.shape[:-1] + (n,)).copy()))
    return T.matmul(scores, v), T.sum(scores, axis=-1)


def linear_attention(inp, scheme=None, leap=None, return_flags=False, positions=None):
    """Reordered linear attention with proportion re-weighting.

    Cosine schemes keep two accumulator branches (cos- and sin-weighted
    features) and sum them, which is cos(a - b) = cos a cos b + sin a sin b.
    Non-causal inputs use full sums, causal inputs prefix sums. Rows whose
    denominator falls below ``DENOM_FLOOR`` are returned as zeros and flagged.

    ``step_length`` under a causal mask cannot be split per token (every step
    moves every key's proportion) and is evaluated densely.
    """
    scheme = ReweightScheme.parse(scheme or "none")
    fq, fk, v = feature_map(inp.q), feature_map(inp.k), inp.v
    ones = _ones_col(v)
    if scheme.kind == "step_length" and inp.causal:
        num, den = _step_length_causal(fq, fk, v)
    elif scheme.kind == "rope":
        d = fq.shape[-1]
        pq = np.arange(inp.n_queries) if positions is None else positions[0]
        pk = np.arange(inp.n_keys) if positions is None else positions[1]
        rq = T.rotate_pairs(fq, rope_angles(pq, d, scheme.rope_base))
        rk = T.rotate_pairs(fk, rope_angles(pk, d, scheme.rope_base))
        num = _attend(rq, rk, v, inp.causal)
        den = T.reshape(_attend(fq, fk, ones, inp.causal), fq.shape[:-1])
    elif scheme.is_cos:
        p_q, p_k = _proportion_tensors(inp, scheme, leap)
        branches = []
        for fn in (T.cos, T.sin):
            wq = fn(T.scale_shift(p_q, HALF_PI, 0.0))
            wk = fn(T.scale_shift(p_k, HALF_PI, 0.0))
            branches.append((T.scale_rows(fq, wq), T.scale_rows(fk, wk)))
        (qc, kc), (qs, ks) = branches
        num = T.add(_attend(qc, kc, v, inp.causal), _attend(qs, ks, v, inp.causal))
        den = T.add(_attend(qc, kc, ones, inp.causal), _attend(qs, ks, ones, inp.causal))
        den = T.reshape(den, fq.shape[:-1])
    else:
        num = _attend(fq, fk, v, inp.causal)
        den = T.reshape(_attend(fq, fk, ones, inp.causal), fq.shape[:-1])
    out = T.row_normalize(num, den, DENOM_FLOOR)
    return (out, out.flags) if return_flags else out


def rope_linear_attention(inp, theta_base=10000.0, return_flags=False):
    if inp.q.shape[-1] % 2:
        raise ValueError(f"rotary attention needs even d, got {inp.q.shape[-1]}")
    return linear_attention(inp, ReweightScheme("rope", rope_base=theta_base), return_flags=return_flags)


# ---------------------------------------------------------------------------
# oracle


def reweight_matrix(inp, scheme=None, leap=None):
    """Scalar re-weight sigma(i, j) for every query/key pair, shape (..., N1, N2).

    Rotary re-weighting is matrix-valued; its scalar summary is the mean of
    cos((j - i) theta_m) over the d/2 frequencies (the value of
    q.R(j-i)k / q.k for q == k on average). Causal inputs zero j > i.
    """
    scheme = ReweightScheme.parse(scheme or "none")
    n1, n2 = inp.n_queries, inp.n_keys
    lead = inp.q.shape[:-2]
    i = np.arange(1, n1 + 1, dtype=np.float64)[:, None]
    j = np.arange(1, n2 + 1, dtype=np.float64)[None, :]
    if scheme.kind == "none":
        sigma = np.ones(lead + (n1, n2))
    elif scheme.kind == "rope":
        d = inp.q.shape[-1]
        theta = scheme.rope_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
        delta = (j - i)
        sigma = np.mean([np.cos(delta * t) for t in theta], axis=0)
        sigma = np.broadcast_to(sigma, lead + (n1, n2)).copy()
    elif scheme.kind == "step_length" and inp.causal:
        sigma = np.cos(HALF_PI * (1.0 - np.minimum(j, i) / i))
        sigma = np.broadcast_to(sigma, lead + (n1, n2)).copy()
    else:
        p_q, p_k = _proportion_arrays(inp, scheme, leap)
        sigma = np.cos(HALF_PI * (p_q[..., :, None] - p_k[..., None, :]))
    if inp.causal:
        sigma = np.where(j <= i, sigma, 0.0)
    return sigma


def reweight_matrix_dump(inp, scheme=None, leap=None):
    return reweight_matrix(inp, scheme, leap)


def quadratic_reweighted_oracle(inp, scheme=None, leap=None, return_flags=False):
    """Brute-force re-weighted attention: form every score, normalize rows, mix values.

    Pure numpy, O(N1 N2 d). Shares the denominator floor rule with
    ``linear_attention`` and nothing else.
    """
    scheme = ReweightScheme.parse(scheme or "none")
    n1, n2 = inp.n_queries, inp.n_keys
    if max(n1, n2) > 4096:
        raise ValueError("oracle is limited to N <= 4096")
    fq = np.maximum(inp.q.data, 0.0)
    fk = np.maximum(inp.k.data, 0.0)
    v = inp.v.data
    plain = np.einsum("...id,...jd->...ij", fq, fk)
    if scheme.kind == "rope":
        d = fq.shape[-1]
        delta = np.arange(n2)[None, :] - np.arange(n1)[:, None]
        scores = np.zeros_like(plain)
        for m in range(d // 2):
            t = scheme.rope_base ** (-2.0 * m / d)
            q0, q1 = fq[..., 2 * m], fq[..., 2 * m + 1]
            k0, k1 = fk[..., 2 * m], fk[..., 2 * m + 1]
            dot = q0[..., :, None] * k0[..., None, :] + q1[..., :, None] * k1[..., None, :]
            cross = q1[..., :, None] * k0[..., None, :] - q0[..., :, None] * k1[..., None, :]
            scores += np.cos(delta * t) * dot + np.sin(delta * t) * cross
        norm = plain
    else:
        scores = plain * reweight_matrix(inp, scheme, leap)
        norm = scores
    if inp.causal:
        mask = np.tril(np.ones((n1, n2)))
        scores = scores * mask
        norm = norm * mask
    den = norm.sum(axis=-1)
    ok = den >= DENOM_FLOOR
    weights = np.where(ok[..., None], scores / np.where(ok, den, 1.0)[..., None], 0.0)
    out = weights @ v
    return (out, ~ok) if return_flags else out


def implicit_score_matrix(inp, scheme=None, leap=None):
    """Row-normalized score matrix of the oracle (zero rows where the floor triggers)."""
    scheme = ReweightScheme.parse(scheme or "none")
    if scheme.kind == "rope":
        raise ValueError("rotary scores are not row-stochastic")
    fq = np.maximum(inp.q.data, 0.0)
    fk = np.maximum(inp.k.data, 0.0)
    scores = np.einsum("...id,...jd->...ij", fq, fk) * reweight_matrix(inp, scheme, leap)
    den = scores.sum(axis=-1)
    ok = den >= DENOM_FLOOR
    return np.where(ok[..., None], scores / np.where(ok, den, 1.0)[..., None], 0.0), ~ok


# ---------------------------------------------------------------------------
# multi-head


def init_attention_params(d_model, rng, prefix=""):
    bound = 1.0 / math.sqrt(d_model)
    params = {}
    for name in ("q", "k", "v", "o"):
        params[f"{prefix}W{name}"] = Tensor(rng.uniform(-bound, bound, (d_model, d_model)), requires_grad=True)
        params[f"{prefix}b{name}"] = Tensor(np.zeros(d_model), requires_grad=True)
    return params


def _split_heads(x, heads):
    b, n, dm = x.shape
    return T.permute(T.reshape(x, (b, n, heads, dm // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


def head_kernel(inp, scheme, leap=None, positions=None):
    """Run the kernel for one site: ``"softmax"`` or any re-weighting scheme."""
    if scheme == "softmax":
        return softmax_attention(inp)
    return linear_attention(inp, scheme, leap=leap, positions=positions)


def multi_head_attention(x_q, x_kv, params, heads, scheme="softmax", causal=False, leap=None,
                         positions=None):
    """Project, split into ``heads``, attend per head, concatenate and project out.

    ``x_q`` and ``x_kv`` are (B, N, d_model) or (N, d_model); pass the same
    tensor twice for self-attention. One ``leap`` pair is shared across heads.
    """
    squeeze = x_q.ndim == 2
    if squeeze:
        x_q = T.reshape(x_q, (1,) + x_q.shape)
        x_kv = T.reshape(x_kv, (1,) + x_kv.shape)
    d_model = x_q.shape[-1]
    if d_model % heads:
        raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
    if scheme != "softmax":
        scheme = ReweightScheme.parse(scheme)
    q = _split_heads(T.add_bias(T.matmul(x_q, params["Wq"]), params["bq"]), heads)
    k = _split_heads(T.add_bias(T.matmul(x_kv, params["Wk"]), params["bk"]), heads)
    v = _split_heads(T.add_bias(T.matmul(x_kv, params["Wv"]), params["bv"]), heads)
    att = head_kernel(AttentionInputs(q, k, v, causal=causal), scheme, leap=leap, positions=positions)
    out = T.add_bias(T.matmul(_merge_heads(att), params["Wo"]), params["bo"])
    return T.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# parameter accounting


def leap_module_params(d, f):
    """Weights of one LeaP module on head dimension ``d`` with downsample factor ``f``."""
    if f < 1 or d % f:
        raise ValueError(f"downsample factor {f} must divide head dimension {d}")
    h = d // f
    return d * h + h + h + 1


def leap_param_overhead(d_model, heads, layers, f, base_params=None, sides=2):
    """LeaP parameter count over ``layers`` attention blocks and its fraction of the base model.

    ``base_params`` defaults to the LRA-like encoder classifier census of
    ``model.lra_like_config`` with the same width.
    """
    if d_model % heads:
        raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
    count = layers * sides * leap_module_params(d_model // heads, f)
    if base_params is None:
        from .model import lra_like_config, transformer_param_count
        base_params = transformer_param_count(lra_like_config(d_model=d_model, heads=heads,
                                                              enc_layers=layers, leap_downsample=f),
                                              include_leap=False)
    return count, count / base_params
