"""Synthetic tasks and their JSONL datasets."""
from dataclasses import asdict, dataclass, field
import json
from pathlib import Path

import numpy as np

TASK_KINDS = ("copy", "reverse", "parity", "char_lm", "toy_translate")
SEQ2SEQ_KINDS = ("copy", "reverse", "toy_translate")
TRANSLATE_CHUNK = 4


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    min_len: int = 8
    max_len: int = 8
    vocab: int = 16
    seed: int = 17
    text_path: str = None
    chunk: int = TRANSLATE_CHUNK

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task {self.kind!r}; choose from {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab < 2 or self.chunk < 1:
            raise ValueError("vocab must be >= 2 and chunk >= 1")
        if self.kind == "char_lm" and not self.text_path:
            raise ValueError("char_lm needs a text file (text_path)")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def arch(self):
        if self.kind == "parity":
            return "encoder"
        if self.kind == "char_lm":
            return "decoder"
        return "encdec"

    @property
    def model_vocab(self):
        """Vocabulary the model needs: encoder-decoder tasks add begin and end tokens."""
        if self.kind == "char_lm":
            return 256
        return self.vocab + 2 if self.arch == "encdec" else self.vocab

    @property
    def n_classes(self):
        return 2 if self.kind == "parity" else None


@dataclass
class Dataset:
    src: list = field(default_factory=list)
    tgt: list = field(default_factory=list)

    def __len__(self):
        return len(self.src)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.src[idx], self.tgt[idx])
        return self.src[idx], self.tgt[idx]

    def split(self, n_first):
        return self[:n_first], self[n_first:]

    def batches(self, batch_size, rng=None):
        """Equal-length batches (grouped by source/target length), shuffled when ``rng`` is given."""
        groups = {}
        for i, (s, t) in enumerate(zip(self.src, self.tgt)):
            groups.setdefault((len(s), len(t)), []).append(i)
        chunks = []
        for key in sorted(groups):
            idx = np.array(groups[key])
            if rng is not None:
                idx = rng.permutation(idx)
            chunks += [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
        order = rng.permutation(len(chunks)) if rng is not None else range(len(chunks))
        for c in order:
            ids = chunks[c]
            yield (np.array([self.src[i] for i in ids]), np.array([self.tgt[i] for i in ids]))

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for s, t in zip(self.src, self.tgt):
                fh.write(json.dumps({"src": [int(x) for x in s], "tgt": [int(x) for x in t]}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        ds = cls()
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if set(obj) != {"src", "tgt"}:
                raise ValueError(f"{path}:{n}: expected keys src and tgt")
            ds.src.append(list(obj["src"]))
            ds.tgt.append(list(obj["tgt"]))
        return ds


def chunk_reverse(seq, chunk=TRANSLATE_CHUNK):
    out = []
    for i in range(0, len(seq), chunk):
        out.extend(reversed(seq[i:i + chunk]))
    return out


def task_target(kind, src, chunk=TRANSLATE_CHUNK):
    src = [int(x) for x in src]
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return src[::-1]
    if kind == "parity":
        return [sum(src) % 2]
    if kind == "toy_translate":
        return chunk_reverse(src, chunk)
    raise ValueError(f"task {kind!r} has no closed-form target")


def generate_task(spec, n_samples, seed=None):
    """Deterministic dataset of ``n_samples`` examples drawn with ``seed`` (defaults to ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    ds = Dataset()
    if spec.kind == "char_lm":
        data = np.frombuffer(Path(spec.text_path).read_bytes(), dtype=np.uint8)
        for _ in range(n_samples):
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            if data.size < n + 1:
                raise ValueError(f"text file has {data.size} bytes, windows need {n + 1}")
            start = int(rng.integers(0, data.size - n))
            win = data[start:start + n + 1].tolist()
            ds.src.append(win[:-1])
            ds.tgt.append(win[1:])
        return ds
    vocab = 2 if spec.kind == "parity" else spec.vocab
    for _ in range(n_samples):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(0, vocab, n).tolist()
        ds.src.append(src)
        ds.tgt.append(task_target(spec.kind, src, spec.chunk))
    return ds
