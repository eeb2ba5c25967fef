"""Relative composite performance scores and the bundled benchmark table."""
import csv
from dataclasses import dataclass
from importlib import resources
import io
import math

RCP_COLUMNS = ("scheme", "acc", "thrpt")
OPTIONAL_COLUMNS = ("mem", "baseline", "thrpt_1k", "thrpt_2k", "printed_rcp", "printed_rcp_mem")


@dataclass(frozen=True)
class RcpInputs:
    """Efficient mechanism (``ef``) against the softmax reference (``sft``).

    Throughputs in it/s, accuracies and ``std_bench`` in percent, memories
    in any common unit (optional; only ``rcp_mem`` needs them).
    """

    ef_thrpt: float
    sft_thrpt: float
    ef_acc: float
    sft_acc: float
    std_bench: float
    ef_mem: float = None
    sft_mem: float = None

    def __post_init__(self):
        for name in ("ef_thrpt", "sft_thrpt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.std_bench > 0:
            raise ValueError("std_bench must be positive")
        for name in ("ef_mem", "sft_mem"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")

    def penalty(self):
        den = 1.0 + (self.sft_acc - self.ef_acc) / self.std_bench
        if den <= 0:
            raise ValueError("accuracy gain exceeds std_bench; composite score undefined")
        return den


def rcp(inp, thrpt_exp=1.0, acc_exp=1.0):
    """Throughput ratio over the std-normalized accuracy deficit (plus one)."""
    return (inp.ef_thrpt / inp.sft_thrpt) ** thrpt_exp / inp.penalty() ** acc_exp


def rcp_mem(inp, w_thrpt=0.5, w_mem=0.5, acc_exp=1.0):
    """Like ``rcp`` but the reward mixes throughput gain and memory reduction."""
    if w_thrpt < 0 or w_mem < 0:
        raise ValueError("weights must be nonnegative")
    if inp.ef_mem is None or inp.sft_mem is None:
        raise ValueError("rcp_mem needs ef_mem and sft_mem")
    reward = w_thrpt * (inp.ef_thrpt / inp.sft_thrpt) + w_mem * (inp.sft_mem / inp.ef_mem)
    return reward / inp.penalty() ** acc_exp


def sample_std(values):
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError("sample_std needs at least two values")
    mu = sum(values) / len(values)
    return math.sqrt(sum((v - mu) ** 2 for v in values) / (len(values) - 1))


def bundled_table_text():
    return resources.files("propattn").joinpath("data/lra_tables.csv").read_text(encoding="utf-8")


def parse_table(text):
    """Rows of a ``#``-commented CSV with at least ``scheme,acc,thrpt``; numbers become floats."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    header = reader.fieldnames or []
    missing = [c for c in RCP_COLUMNS if c not in header]
    unknown = [c for c in header if c not in RCP_COLUMNS + OPTIONAL_COLUMNS]
    if missing or unknown:
        raise ValueError(f"table columns: missing {missing}, unknown {unknown}")
    rows = []
    for n, raw in enumerate(reader, start=2):
        if None in raw or any(v is None for v in raw.values()):
            raise ValueError(f"row {n}: wrong number of fields")
        row = {"scheme": raw["scheme"].strip()}
        for key in header:
            if key == "scheme":
                continue
            val = raw[key].strip()
            try:
                row[key] = float(val) if val else None
            except ValueError:
                raise ValueError(f"row {n}: {key}={val!r} is not a number") from None
        if row["acc"] is None or row["thrpt"] is None:
            raise ValueError(f"row {n}: acc and thrpt are required")
        rows.append(row)
    if not rows:
        raise ValueError("table has no rows")
    return rows


def find_baseline(rows, name=None):
    if name is not None:
        hits = [r for r in rows if r["scheme"] == name]
    else:
        hits = [r for r in rows if r.get("baseline") == 1.0]
    if len(hits) != 1:
        raise ValueError(f"expected exactly one baseline row, found {len(hits)}")
    return hits[0]


def table_rcp(rows, baseline=None, std_bench=None):
    """Score every non-baseline row against the baseline row.

    ``std_bench`` defaults to the sample std of the ``acc`` column over all
    rows, baseline included. ``rcp_mem`` is filled only when both rows
    carry ``mem``. A table holding only the baseline scores it against
    itself.
    """
    base = find_baseline(rows, baseline)
    if std_bench is None:
        std_bench = sample_std([r["acc"] for r in rows]) if len(rows) > 1 else 1.0
    others = [r for r in rows if r is not base] or [base]
    out = []
    for r in others:
        inp = RcpInputs(r["thrpt"], base["thrpt"], r["acc"], base["acc"], std_bench,
                        r.get("mem"), base.get("mem"))
        mem = rcp_mem(inp) if inp.ef_mem is not None and inp.sft_mem is not None else None
        out.append({"scheme": r["scheme"], "rcp": rcp(inp), "rcp_mem": mem,
                    "printed_rcp": r.get("printed_rcp")})
    return out, std_bench
