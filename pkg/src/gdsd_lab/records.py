"""On-disk record formats: newline-delimited flat JSON and plot-ready CSV."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import IO, Iterable

METRIC_KEYS = ("step", "mean_reward", "loss_total", "loss_match", "loss_reg", "grad_norm", "old_refreshed")


def _clean(v):
    # JSON has no NaN/Inf; keep the file parseable by strict readers
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if hasattr(v, "item"):  # numpy scalar
        return _clean(v.item())
    return v


def json_line(record: dict, keys: Iterable[str] | None = None) -> str:
    """One record as a compact JSON line; ``keys`` fixes the field order."""
    if keys is not None:
        record = {k: record[k] for k in keys}
    return json.dumps(_clean(record), separators=(",", ":"), allow_nan=False) + "\n"


def metrics_line(record: dict) -> str:
    return json_line(record, METRIC_KEYS)


class RecordWriter:
    """Append-only JSONL writer that flushes after every record."""

    def __init__(self, path: Path, keys: Iterable[str] | None = None):
        self.path = Path(path)
        self.keys = tuple(keys) if keys is not None else None
        self._fh: IO[str] = open(self.path, "w", encoding="utf-8", newline="\n")

    def write(self, record: dict) -> None:
        self._fh.write(json_line(record, self.keys))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=2, allow_nan=False)
        fh.write("\n")


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_plot_data(metrics: list[dict], out_dir) -> list[Path]:
    """(step, reward) and (step, loss) CSV files for external plotting."""
    out_dir = Path(out_dir)
    reward = out_dir / "reward.csv"
    loss = out_dir / "loss.csv"
    write_csv(reward, ["step", "mean_reward"], ((m["step"], m["mean_reward"]) for m in metrics))
    write_csv(loss, ["step", "loss_total", "loss_match", "loss_reg"],
              ((m["step"], m["loss_total"], m["loss_match"], m["loss_reg"]) for m in metrics))
    return [reward, loss]
