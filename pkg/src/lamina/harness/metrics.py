"""Run metrics and their JSON / CSV serialization.

Floats are written with 17 significant digits so every value parses back to
the identical double. Wall-clock time is kept out of the main document (it is
the one number that differs between identical runs) and written to a sidecar
``<path>.timing.json`` instead.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

EPOCH_FIELDS = ("epoch", "batch_size", "steps", "train_loss", "train_accuracy", "test_accuracy")


@dataclass
class MetricsRecord:
    """Everything a run reports.

    ``epochs`` holds one dict per epoch (see :data:`EPOCH_FIELDS`);
    ``ger``/``ler``/``mad`` are per-layer lists of per-step values, ``None``
    where a quantity does not apply to a layer.
    """

    experiment: str
    seed: int
    config: dict
    dataset: dict
    initial_test_accuracy: float
    epochs: list = field(default_factory=list)
    ger: list = field(default_factory=list)
    ler: list = field(default_factory=list)
    mad: list = field(default_factory=list)
    wall_clock: float | None = None

    @property
    def final_test_accuracy(self):
        return self.epochs[-1]["test_accuracy"] if self.epochs else self.initial_test_accuracy

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "config": self.config,
            "dataset": self.dataset,
            "initial_test_accuracy": self.initial_test_accuracy,
            "epochs": self.epochs,
            "ger": self.ger,
            "ler": self.ler,
            "mad": self.mad,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def format_float(x):
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = "%.17g" % x
    if "." not in text and "e" not in text and "n" not in text:
        text += ".0"
    return text


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(obj[k], indent, level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + close + "]"
    if hasattr(obj, "item"):
        return _encode(obj.item(), indent, level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(record):
    return _encode(record.to_dict(), 2, 0) + "\n"


def _layer_means(series, lo, hi):
    out = []
    for values in series:
        chunk = [v for v in values[lo:hi] if v is not None]
        out.append(sum(chunk) / len(chunk) if chunk else None)
    return out


def csv_rows(record):
    """Header plus one row per epoch, with per-layer epoch means of GER/LER/MAD."""
    n_layers = max(len(record.ger), len(record.ler), len(record.mad))
    header = list(EPOCH_FIELDS)
    for name in ("ger", "ler", "mad"):
        header += [f"{name}_{i}" for i in range(n_layers)]
    rows = [header]
    step = 0
    for ep in record.epochs:
        lo, hi = step, step + ep["steps"]
        step = hi
        row = [ep[k] for k in EPOCH_FIELDS]
        for series in (record.ger, record.ler, record.mad):
            means = _layer_means(series, lo, hi) if series else [None] * n_layers
            row += means + [None] * (n_layers - len(means))
        rows.append(row)
    return rows


def dumps_csv(record):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in csv_rows(record):
        writer.writerow(["" if v is None else format_float(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def emit_metrics(record, fmt, path):
    """Write ``record`` to ``path`` as ``"json"`` or ``"csv"``."""
    if fmt == "json":
        text = dumps_json(record)
    elif fmt == "csv":
        text = dumps_csv(record)
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
        if record.wall_clock is not None:
            timing = path.with_name(path.name + ".timing.json")
            timing.write_text(json.dumps({"wall_clock_seconds": record.wall_clock}) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_json(path):
    return MetricsRecord.from_dict(json.loads(Path(path).read_text()))


def read_csv(path):
    """Rows of a metrics CSV as dicts of floats (empty cells become None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                elif k in ("epoch", "batch_size", "steps"):
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v)
            out.append(parsed)
    return out
