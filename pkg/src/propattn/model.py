"""Toy pre-norm transformers with a chosen attention kernel per site.

Three shapes share one parameter layout:

* ``encoder``  bidirectional encoder + mean-pool classifier
* ``decoder``  causal decoder-only language model
* ``encdec``   encoder (unidirectional by default) + decoder with cross-attention

Sites are ``enc_self``, ``dec_self`` and ``cross``; each maps to ``"softmax"``
or a re-weighting scheme. Every cos_leap site owns one query-side and one
key-side LeaP module shared across its heads.
"""
from dataclasses import asdict, dataclass, field
import math

import numpy as np

from . import tensor as T
from .attention import (
    LeaPModule, LeaPPair, ReweightScheme, init_attention_params, leap_module_params,
    multi_head_attention,
)
from .streaming import (
    APPEND, ENC_MODES, RECOMPUTE, StreamTrace, WaitKSchedule, cross_attention_stream_update,
    default_max_len, frames_required, state_append, state_decode, state_init,
)
from .tensor import Tensor

ARCHS = ("encoder", "decoder", "encdec")
SITES = ("enc_self", "dec_self", "cross")
ARCH_SITES = {"encoder": ("enc_self",), "decoder": ("dec_self",), "encdec": SITES}
DEFAULT_STEP = 16


@dataclass
class TransformerConfig:
    arch: str = "encdec"
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    vocab_size: int = 18
    max_positions: int = 512
    sites: dict = field(default_factory=dict)
    leap_downsample: int = 1
    dropout: float = 0.1
    n_classes: int = 2
    encoder_causal: bool = None
    seed: int = 17

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        dh = self.d_model // self.heads
        if self.leap_downsample < 1 or dh % self.leap_downsample:
            raise ValueError(f"LeaP downsample factor {self.leap_downsample} must divide head dim {dh}")
        unknown = set(self.sites) - set(SITES)
        if unknown:
            raise ValueError(f"unknown attention sites {sorted(unknown)}")
        self.sites = {s: self.sites.get(s, "softmax") for s in ARCH_SITES[self.arch]}
        for name in self.sites:
            self.site_scheme(name)
        if self.encoder_causal is None:
            self.encoder_causal = self.arch == "encdec"
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self):
        return self.d_model // self.heads

    @property
    def bos_id(self):
        return self.vocab_size - 2

    @property
    def eos_id(self):
        return self.vocab_size - 1

    def site_scheme(self, site):
        spec = self.sites[site]
        if spec == "softmax":
            return "softmax"
        if isinstance(spec, str):
            spec = {"kind": spec}
        spec = dict(spec)
        if spec.get("kind") == "max_length":
            spec.setdefault("max_length", self.max_positions)
        if spec.get("kind") == "stepping_max_length":
            spec.setdefault("step", DEFAULT_STEP)
        return ReweightScheme.parse(spec)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def lra_like_config(d_model=64, heads=2, enc_layers=2, ffn_dim=128, vocab_size=256, n_classes=10,
                    leap_downsample=4, max_positions=4096):
    """Encoder classifier at the LRA model width (2 layers, d_model 64, 2 heads, FFN 128)."""
    return TransformerConfig(arch="encoder", d_model=d_model, heads=heads, enc_layers=enc_layers,
                             dec_layers=0, ffn_dim=ffn_dim, vocab_size=vocab_size,
                             max_positions=max_positions, sites={"enc_self": "cos_leap"},
                             leap_downsample=leap_downsample, n_classes=n_classes)


def _site_leap_sides(cfg, site):
    sch = cfg.site_scheme(site)
    if sch == "softmax" or sch.kind != "cos_leap":
        return 0
    return int(sch.leap_q) + int(sch.leap_k)


def transformer_param_count(cfg, include_leap=True):
    """Closed-form parameter count for ``cfg``."""
    dm, ff, V = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    attn = 4 * (dm * dm + dm)
    ffn = dm * ff + ff + ff * dm + dm
    ln = 2 * dm
    leap = leap_module_params(cfg.head_dim, cfg.leap_downsample) if include_leap else 0
    total = 0
    if cfg.arch in ("encoder", "encdec"):
        total += V * dm + ln + cfg.enc_layers * (attn + ffn + 2 * ln)
        total += cfg.enc_layers * _site_leap_sides(cfg, "enc_self") * leap
    if cfg.arch in ("decoder", "encdec"):
        cross = cfg.arch == "encdec"
        total += V * dm + ln + cfg.dec_layers * (attn * (2 if cross else 1) + ffn + (3 if cross else 2) * ln)
        total += cfg.dec_layers * _site_leap_sides(cfg, "dec_self") * leap
        if cross:
            total += cfg.dec_layers * _site_leap_sides(cfg, "cross") * leap
    total += dm * cfg.n_classes + cfg.n_classes if cfg.arch == "encoder" else dm * V + V
    return total


def sinusoidal_positions(n, d):
    pos = np.arange(n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return pe


def _ln_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps) * g + b


class Transformer:
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dm = cfg.d_model
        self.params = {}
        self.leaps = {}
        self.dropout_rng = np.random.default_rng(cfg.seed + 1)
        stacks = []
        if cfg.arch in ("encoder", "encdec"):
            stacks.append(("enc", cfg.enc_layers, ("self",)))
        if cfg.arch in ("decoder", "encdec"):
            stacks.append(("dec", cfg.dec_layers, ("self", "cross") if cfg.arch == "encdec" else ("self",)))
        for stack, layers, kinds in stacks:
            self._add(f"{stack}.emb", rng.normal(0.0, dm ** -0.5, (cfg.vocab_size, dm)))
            for l in range(layers):
                for i, kind in enumerate(kinds):
                    pre = f"{stack}.{l}.{kind}."
                    for name, p in init_attention_params(dm, rng, pre).items():
                        self.params[name] = p
                    self._add_ln(f"{stack}.{l}.ln{i + 1}")
                    site = self._site(stack, kind)
                    sch = cfg.site_scheme(site)
                    if sch != "softmax" and sch.kind == "cos_leap":
                        pair = LeaPPair(
                            LeaPModule(cfg.head_dim, cfg.leap_downsample, rng) if sch.leap_q else None,
                            LeaPModule(cfg.head_dim, cfg.leap_downsample, rng) if sch.leap_k else None)
                        self.leaps[pre + "leap"] = pair
                        for name, p in pair.parameters().items():
                            self.params[pre + "leap." + name] = p
                self._add_ln(f"{stack}.{l}.ln{len(kinds) + 1}")
                b1, b2 = 1.0 / math.sqrt(dm), 1.0 / math.sqrt(cfg.ffn_dim)
                self._add(f"{stack}.{l}.ffn.W1", rng.uniform(-b1, b1, (dm, cfg.ffn_dim)))
                self._add(f"{stack}.{l}.ffn.b1", np.zeros(cfg.ffn_dim))
                self._add(f"{stack}.{l}.ffn.W2", rng.uniform(-b2, b2, (cfg.ffn_dim, dm)))
                self._add(f"{stack}.{l}.ffn.b2", np.zeros(dm))
            self._add_ln(f"{stack}.ln_f")
        bound = 1.0 / math.sqrt(dm)
        if cfg.arch == "encoder":
            self._add("cls.W", rng.uniform(-bound, bound, (dm, cfg.n_classes)))
            self._add("cls.b", np.zeros(cfg.n_classes))
        else:
            self._add("out.W", rng.uniform(-bound, bound, (dm, cfg.vocab_size)))
            self._add("out.b", np.zeros(cfg.vocab_size))
        self._pe = sinusoidal_positions(cfg.max_positions, dm)

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def _add_ln(self, name):
        self._add(name + ".g", np.ones(self.cfg.d_model))
        self._add(name + ".b", np.zeros(self.cfg.d_model))

    @staticmethod
    def _site(stack, kind):
        return "cross" if kind == "cross" else f"{stack}_self"

    def named_parameters(self):
        return dict(self.params)

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def _uses_ape(self, stack):
        sch = self.cfg.site_scheme(f"{stack}_self")
        return not (sch != "softmax" and sch.kind == "rope")

    # -- batch (taped) path ------------------------------------------------

    def _embed(self, stack, ids):
        ids = np.asarray(ids)
        n = ids.shape[-1]
        if n > self.cfg.max_positions:
            raise ValueError(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")
        x = T.scale_shift(T.embedding(self.params[f"{stack}.emb"], ids), math.sqrt(self.cfg.d_model), 0.0)
        if self._uses_ape(stack):
            x = T.add(x, Tensor(np.broadcast_to(self._pe[:n], x.shape).copy()))
        return x

    def _ln(self, name, x):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _drop(self, x, training):
        return T.dropout(x, self.cfg.dropout, self.dropout_rng, training=training)

    def _attn(self, pre, site, xq, xkv, causal, training):
        p = {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre) and ".leap." not in k}
        out = multi_head_attention(xq, xkv, p, self.cfg.heads, self.cfg.site_scheme(site), causal=causal,
                                   leap=self.leaps.get(pre + "leap"))
        return self._drop(out, training)

    def _ffn(self, pre, x, training):
        P = self.params
        h = T.relu(T.add_bias(T.matmul(x, P[pre + "W1"]), P[pre + "b1"]))
        return self._drop(T.add_bias(T.matmul(h, P[pre + "W2"]), P[pre + "b2"]), training)

    def encode(self, src, training=False):
        cfg = self.cfg
        x = self._drop(self._embed("enc", src), training)
        for l in range(cfg.enc_layers):
            a = self._ln(f"enc.{l}.ln1", x)
            x = T.add(x, self._attn(f"enc.{l}.self.", "enc_self", a, a, cfg.encoder_causal, training))
            x = T.add(x, self._ffn(f"enc.{l}.ffn.", self._ln(f"enc.{l}.ln2", x), training))
        return self._ln("enc.ln_f", x)

    def decode(self, tgt_in, memory=None, training=False):
        cfg = self.cfg
        cross = cfg.arch == "encdec"
        x = self._drop(self._embed("dec", tgt_in), training)
        for l in range(cfg.dec_layers):
            a = self._ln(f"dec.{l}.ln1", x)
            x = T.add(x, self._attn(f"dec.{l}.self.", "dec_self", a, a, True, training))
            if cross:
                a = self._ln(f"dec.{l}.ln2", x)
                x = T.add(x, self._attn(f"dec.{l}.cross.", "cross", a, memory, False, training))
            last = 3 if cross else 2
            x = T.add(x, self._ffn(f"dec.{l}.ffn.", self._ln(f"dec.{l}.ln{last}", x), training))
        x = self._ln("dec.ln_f", x)
        return T.add_bias(T.matmul(x, self.params["out.W"]), self.params["out.b"])

    def classify(self, src, training=False):
        h = T.mean(self.encode(src, training), axis=1)
        return T.add_bias(T.matmul(h, self.params["cls.W"]), self.params["cls.b"])

    def logits(self, src, tgt_in=None, training=False):
        """Logits for a batch: class scores, next-token scores, or teacher-forced target scores."""
        arch = self.cfg.arch
        if arch == "encoder":
            return self.classify(src, training)
        if arch == "decoder":
            return self.decode(src, None, training)
        return self.decode(tgt_in, self.encode(src, training), training)

    def loss(self, src, tgt, training=False):
        src, tgt = np.asarray(src), np.asarray(tgt)
        if self.cfg.arch == "encoder":
            return T.cross_entropy(self.classify(src, training), tgt[:, 0])
        if self.cfg.arch == "decoder":
            return T.cross_entropy(self.decode(src, None, training), tgt)
        tgt_in, tgt_out = self.teacher_forcing(tgt)
        return T.cross_entropy(self.logits(src, tgt_in, training), tgt_out)

    def teacher_forcing(self, tgt):
        tgt = np.asarray(tgt)
        b = tgt.shape[0]
        tgt_in = np.concatenate([np.full((b, 1), self.cfg.bos_id), tgt], axis=1)
        tgt_out = np.concatenate([tgt, np.full((b, 1), self.cfg.eos_id)], axis=1)
        return tgt_in, tgt_out

    # -- streaming ---------------------------------------------------------

    def stream_session(self, enc_mode=APPEND):
        return StreamSession(self, enc_mode)


def greedy_decode(model, src, max_len):
    """Offline greedy decoding by full recomputation. Returns token lists without EOS.

    ``src`` is (B, N); every row decodes independently.
    """
    src = np.atleast_2d(np.asarray(src))
    cfg = model.cfg
    with T.no_grad():
        memory = model.encode(src)
        seqs = np.full((src.shape[0], 1), cfg.bos_id)
        done = np.zeros(src.shape[0], dtype=bool)
        for _ in range(max_len):
            logits = model.decode(seqs, memory).data[:, -1]
            nxt = np.where(done, cfg.eos_id, logits.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == cfg.eos_id
            if done.all():
                break
    out = []
    for row in seqs[:, 1:]:
        toks = list(row)
        out.append([int(t) for t in toks[:toks.index(cfg.eos_id)]] if cfg.eos_id in toks else [int(t) for t in toks])
    return out


class StreamSession:
    """Token-at-a-time decoder over a growing source.

    Decoder self-attention and cross-attention keep either a KV cache
    (softmax sites) or one ``DecodeState`` per head (linear sites). The
    cross-attention state only ever contains frames passed to ``read``.
    """

    def __init__(self, model, enc_mode=APPEND):
        if model.cfg.arch != "encdec":
            raise ValueError("streaming decode needs an encoder-decoder model")
        if enc_mode not in ENC_MODES:
            raise ValueError(f"unknown encoder mode {enc_mode!r}")
        self.model, self.cfg, self.enc_mode = model, model.cfg, enc_mode
        self.P = {k: v.data for k, v in model.params.items()}
        self.frames = []
        self.t = 0
        cfg = self.cfg
        self.self_sch = cfg.site_scheme("dec_self")
        self.cross_sch = cfg.site_scheme("cross")
        for site, sch in (("dec_self", self.self_sch), ("cross", self.cross_sch)):
            self._check_streamable(site, sch)
        self.self_state = [self._new_state(self.self_sch) for _ in range(cfg.dec_layers)]
        self.cross_state = [self._new_state(self.cross_sch) for _ in range(cfg.dec_layers)]

    @staticmethod
    def _check_streamable(site, sch):
        if sch == "softmax":
            return
        needs_len = sch.kind == "cos_fixed" or (sch.kind == "cos_leap" and not (sch.leap_q and sch.leap_k))
        if site == "cross" and sch.kind == "step_length":
            needs_len = True
        if needs_len:
            raise ValueError(f"{site}: scheme {sch.kind!r} needs the final sequence length, "
                             "which is unknown while streaming")

    def _new_state(self, sch):
        dh = self.cfg.head_dim
        if sch == "softmax":
            return [{"K": np.zeros((0, dh)), "V": np.zeros((0, dh))} for _ in range(self.cfg.heads)]
        return [state_init(sch, dh) for _ in range(self.cfg.heads)]

    def _proj(self, pre, x, which):
        y = x @ self.P[pre + "W" + which] + self.P[pre + "b" + which]
        return y.reshape(y.shape[:-1] + (self.cfg.heads, self.cfg.head_dim))

    def _fixed_p(self, sch, idx):
        """Proportion of 1-based position ``idx`` under a length-free fixed scheme."""
        if sch.kind == "max_length":
            if idx > sch.max_length:
                raise ValueError(f"position {idx} exceeds max_length {sch.max_length}")
            return idx / sch.max_length
        if sch.kind == "stepping_max_length":
            return idx / (sch.step * math.ceil(idx / sch.step))
        return None

    @property
    def frames_read(self):
        return len(self.frames)

    def read(self, new_frames):
        """Consume source frames and refresh every cross-attention state."""
        new_frames = [int(f) for f in np.atleast_1d(new_frames)]
        if not new_frames:
            raise ValueError("read needs at least one frame")
        start = len(self.frames)
        self.frames.extend(new_frames)
        with T.no_grad():
            memory = self.model.encode(np.array(self.frames)[None]).data[0]
        rows = memory[start:] if self.enc_mode == APPEND else memory
        first = start if self.enc_mode == APPEND else 0
        sch = self.cross_sch
        for l in range(self.cfg.dec_layers):
            pre = f"dec.{l}.cross."
            K, V = self._proj(pre, rows, "k"), self._proj(pre, rows, "v")
            leap = self.model.leaps.get(pre + "leap")
            idx = np.arange(first, first + rows.shape[0])
            for h in range(self.cfg.heads):
                st = self.cross_state[l][h]
                if sch == "softmax":
                    if self.enc_mode == APPEND:
                        st["K"] = np.vstack([st["K"], K[:, h]])
                        st["V"] = np.vstack([st["V"], V[:, h]])
                    else:
                        st["K"], st["V"] = K[:, h].copy(), V[:, h].copy()
                    continue
                p_k = None
                if sch.kind in ("max_length", "stepping_max_length"):
                    p_k = [self._fixed_p(sch, j + 1) for j in idx]
                self.cross_state[l][h] = cross_attention_stream_update(
                    self.enc_mode, st, K[:, h], V[:, h], p_k=p_k, positions=idx,
                    leap_k=leap.k if leap is not None else None)

    def _attend(self, sch, states, q, k, v, leap, pos, own):
        """One query (and, for self-attention, its own key/value) against per-head states."""
        cfg = self.cfg
        out = np.empty((cfg.heads, cfg.head_dim))
        for h in range(cfg.heads):
            st = states[h]
            if sch == "softmax":
                if own:
                    st["K"] = np.vstack([st["K"], k[h]])
                    st["V"] = np.vstack([st["V"], v[h]])
                if st["K"].shape[0] == 0:
                    out[h] = 0.0
                    continue
                s = st["K"] @ q[h] / math.sqrt(cfg.head_dim)
                w = np.exp(s - s.max())
                out[h] = (w / w.sum()) @ st["V"]
                continue
            p = self._fixed_p(sch, pos + 1)
            if own:
                state_append(st, k[h], v[h], p_k=p, position=pos,
                             leap_k=leap.k if leap is not None else None)
            out[h], _ = state_decode(st, q[h], p_q=p, position=pos,
                                     leap_q=leap.q if leap is not None else None)
        return out.reshape(-1)

    def step(self, token):
        """Feed one target token; return next-token logits."""
        cfg, P = self.cfg, self.P
        pos = self.t
        if pos >= cfg.max_positions:
            raise ValueError("target exceeds max_positions")
        x = P["dec.emb"][int(token)] * math.sqrt(cfg.d_model)
        if self.model._uses_ape("dec"):
            x = x + self.model._pe[pos]
        for l in range(cfg.dec_layers):
            pre = f"dec.{l}."
            a = _ln_np(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            q, k, v = (self._proj(pre + "self.", a, w) for w in "qkv")
            att = self._attend(self.self_sch, self.self_state[l], q, k, v,
                               self.model.leaps.get(pre + "self.leap"), pos, own=True)
            x = x + att @ P[pre + "self.Wo"] + P[pre + "self.bo"]
            a = _ln_np(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            q = self._proj(pre + "cross.", a, "q")
            att = self._attend(self.cross_sch, self.cross_state[l], q, None, None,
                               self.model.leaps.get(pre + "cross.leap"), pos, own=False)
            x = x + att @ P[pre + "cross.Wo"] + P[pre + "cross.bo"]
            a = _ln_np(x, P[pre + "ln3.g"], P[pre + "ln3.b"])
            h = np.maximum(a @ P[pre + "ffn.W1"] + P[pre + "ffn.b1"], 0.0)
            x = x + h @ P[pre + "ffn.W2"] + P[pre + "ffn.b2"]
        self.t += 1
        x = _ln_np(x, P["dec.ln_f.g"], P["dec.ln_f.b"])
        return x @ P["out.W"] + P["out.b"]


def simulate_simultaneous(model, source, sched=None, max_len=None, enc_mode=APPEND):
    """Greedy wait-k decoding. Returns ``(trace, tokens)``; tokens exclude the end token.

    Before writing target token i the simulator has read exactly
    ``min(k + i - 1, total_blocks) * r`` frames (clamped to the source);
    once the source is exhausted it only writes.
    """
    source = [int(s) for s in np.atleast_1d(source)]
    if not source:
        raise ValueError("source must be nonempty")
    sched = WaitKSchedule() if sched is None else sched
    n = len(source)
    max_len = default_max_len(sched, n) if max_len is None else max_len
    session = model.stream_session(enc_mode)
    trace, tokens = StreamTrace(), []
    prev = model.cfg.bos_id
    for i in range(1, max_len + 1):
        need = frames_required(i, sched, n)
        if need > session.frames_read:
            trace.read(need - session.frames_read, i)
            session.read(source[session.frames_read:need])
        tok = int(np.argmax(session.step(prev)))
        trace.write(tok, i)
        if tok == model.cfg.eos_id:
            break
        tokens.append(tok)
        prev = tok
    else:
        trace.truncated = True
    return trace, tokens
