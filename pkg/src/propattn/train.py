"""Adam training loop, evaluation, scheme comparison and checkpoints."""
from dataclasses import asdict, dataclass
import json
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import Transformer, TransformerConfig, greedy_decode

METRICS = ("token_accuracy", "sequence_accuracy", "perplexity")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step, self.loss = step, loss


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 1000
    lr: float = 3e-3
    warmup: int = 100
    clip: float = 1.0
    seed: int = 17
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.warmup < 0 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive; steps and warmup nonnegative")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive or None")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def lr_at(step, tc):
    """Linear warmup to ``tc.lr`` over ``tc.warmup`` steps, then linear decay to zero at ``tc.steps``."""
    if tc.warmup and step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    span = max(tc.steps - tc.warmup, 1)
    return tc.lr * max(0.0, 1.0 - (step - tc.warmup) / span)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k].data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _collect_grads(params):
    grads = {}
    for k, p in params.items():
        grads[k] = np.zeros(p.shape) if p.grad is None else p.grad
        p.grad = None
    return grads


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def _batch_stream(dataset, tc, rng):
    while True:
        yield from dataset.batches(tc.batch_size, rng)


def train(model, dataset, tc, on_step=None):
    """Train in place; returns ``(model, losses)`` with one loss per step.

    Batch order and dropout masks derive from ``tc.seed`` only, so equal
    seeds give bit-identical loss curves.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(tc.seed)
    model.dropout_rng = np.random.default_rng(tc.seed + 1)
    params = model.named_parameters()
    opt = Adam(params, tc.betas, tc.eps)
    losses = []
    batches = _batch_stream(dataset, tc, rng)
    for step in range(tc.steps):
        src, tgt = next(batches)
        loss = model.loss(src, tgt, training=True)
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        T.backward(loss)
        grads, _ = clip_global_norm(_collect_grads(params), tc.clip)
        opt.step(grads, lr_at(step, tc))
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    return model, losses


def _teacher_forced(model, src, tgt):
    """Teacher-forced logits and the targets they predict."""
    arch = model.cfg.arch
    if arch == "encoder":
        return model.classify(src).data, tgt[:, :1]
    if arch == "decoder":
        return model.decode(src).data, tgt
    tgt_in, tgt_out = model.teacher_forcing(tgt)
    return model.logits(src, tgt_in).data, tgt_out


def evaluate(model, dataset, metric, batch_size=64):
    """Score ``dataset`` with ``metric`` (token_accuracy, sequence_accuracy or perplexity)."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hits = total = nll = 0.0
    with T.no_grad():
        for src, tgt in dataset.batches(batch_size):
            if metric == "sequence_accuracy" and model.cfg.arch == "encdec":
                out = greedy_decode(model, src, tgt.shape[1] + 1)
                hits += sum(o == list(t) for o, t in zip(out, tgt.tolist()))
                total += len(out)
                continue
            logits, target = _teacher_forced(model, src, tgt)
            if metric == "perplexity":
                z = logits - logits.max(axis=-1, keepdims=True)
                logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
                nll += -np.take_along_axis(logp, target[..., None], axis=-1).sum()
                total += target.size
                continue
            correct = logits.argmax(axis=-1) == target
            if metric == "token_accuracy":
                hits += correct.sum()
                total += correct.size
            else:
                hits += correct.all(axis=-1).sum()
                total += correct.shape[0]
    if metric == "perplexity":
        return float(math.exp(nll / total))
    return float(hits / total)


def scheme_label(site_map):
    parts = [f"{k}={v if isinstance(v, str) else json.dumps(v, sort_keys=True)}" for k, v in sorted(site_map.items())]
    return ";".join(parts) if parts else "softmax"


def compare_schemes(task_train, task_dev, model_cfg, site_maps, tc, seeds, metric="perplexity"):
    """Train each site map under the same budget and seeds; one report row per scheme.

    ``site_maps`` are dicts overriding ``model_cfg.sites``. An all-softmax
    baseline row is added first when missing.
    """
    if not seeds:
        raise ValueError("compare_schemes needs at least one seed")
    site_maps = [dict(m) for m in site_maps]
    if not any(all(v == "softmax" for v in m.values()) for m in site_maps):
        site_maps.insert(0, {})
    rows = []
    for sites in site_maps:
        scores = []
        for seed in seeds:
            cfg_d = model_cfg.to_dict()
            cfg_d["sites"] = {**cfg_d["sites"], **sites}
            cfg_d["seed"] = seed
            model = Transformer(TransformerConfig.from_dict(cfg_d))
            train(model, task_train, TrainConfig.from_dict({**tc.to_dict(), "seed": seed}))
            scores.append(evaluate(model, task_dev, metric))
        scores = np.array(scores)
        rows.append({"scheme": scheme_label(sites), "metric": metric, "mean": float(scores.mean()),
                     "std": float(scores.std(ddof=1)) if scores.size > 1 else 0.0,
                     "per_seed": scores.tolist()})
    return rows


def save_checkpoint(model, directory, extra=None):
    """Write ``weights.bin`` (little-endian float64, manifest order) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "weights.bin", "wb") as fh:
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name].data, dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format_version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
                "params": entries, "n_floats": offset}
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    model = Transformer(TransformerConfig.from_dict(manifest["config"]))
    flat = np.fromfile(directory / "weights.bin", dtype="<f8")
    if flat.size != manifest["n_floats"]:
        raise ValueError("weights.bin size does not match the manifest")
    names = {e["name"] for e in manifest["params"]}
    if names != set(model.params):
        raise ValueError("checkpoint parameters do not match the configured model")
    for e in manifest["params"]:
        p = model.params[e["name"]]
        n = int(np.prod(e["shape"], dtype=np.int64))
        p.data[...] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"])
    return model, manifest
