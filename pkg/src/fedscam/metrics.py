"""CSV/JSON persistence for round records."""
from __future__ import annotations

import csv
import json
from pathlib import Path

ROUND_COLUMNS = ["round", "test_accuracy", "test_loss", "drift", "mean_rho", "wall_millis"]
CLIENT_FIELDS = ["h", "c", "h_adj", "rho", "multiplier", "weight"]


def fmt(value) -> str:
    """Six-decimal fixed point; ``None`` becomes an empty cell."""
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def round_row(record, timing: bool = False) -> list[str]:
    return [
        str(record.round),
        fmt(record.test_accuracy),
        fmt(record.test_loss),
        fmt(record.drift),
        fmt(record.mean_rho),
        fmt(record.wall_millis) if timing else "",
    ]


class MetricsSink:
    """Per-round CSV writer, flushed after every row.

    ``wall_millis`` is left blank unless ``timing`` is set so that repeated
    runs with one seed produce byte-identical files. A companion
    ``clients.csv`` (one wide row per round) is written for FedSCAM runs.
    """

    def __init__(self, out_dir, timing: bool = False, prefix: list[str] | None = None,
                 prefix_columns: list[str] | None = None, filename: str = "metrics.csv"):
        self.out_dir = Path(out_dir)
        self.timing = timing
        self.prefix = prefix or []
        self.prefix_columns = prefix_columns or []
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.csv_path = self.out_dir / filename
            self._fh = open(self.csv_path, "w", newline="")
        except OSError as exc:
            raise OSError(f"cannot open metrics output in {self.out_dir}: {exc}") from exc
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.prefix_columns + ROUND_COLUMNS)
        self._clients_fh = None
        self.rows = 0

    def write_round(self, record) -> None:
        self._writer.writerow(self.prefix + round_row(record, self.timing))
        self._fh.flush()
        self.rows += 1
        if record.clients is not None:
            self._write_clients(record)

    def _write_clients(self, record) -> None:
        if self._clients_fh is None:
            path = self.out_dir / "clients.csv"
            self._clients_fh = open(path, "w", newline="")
            self._clients_writer = csv.writer(self._clients_fh, lineterminator="\n")
            header = ["round"] + [f"{name}_{i}" for i in range(len(record.clients))
                                  for name in CLIENT_FIELDS]
            self._clients_writer.writerow(self.prefix_columns + header)
        row = [str(record.round)] + [fmt(c[name]) for c in record.clients for name in CLIENT_FIELDS]
        self._clients_writer.writerow(self.prefix + row)
        self._clients_fh.flush()

    def close(self) -> None:
        self._fh.close()
        if self._clients_fh is not None:
            self._clients_fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_round(sink: MetricsSink, record) -> None:
    sink.write_round(record)


def write_summary(path, summary: dict) -> None:
    """JSON summary; the metadata keys come first so they head the file."""
    order = ["algorithm", "config", "partition_checksum", "approx", "seeds"]
    ordered = {k: summary[k] for k in order if k in summary}
    ordered.update({k: v for k, v in summary.items() if k not in ordered})
    Path(path).write_text(json.dumps(ordered, indent=2) + "\n")


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts of floats (empty cells become None)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, value in row.items():
                if key == "algorithm":
                    parsed[key] = value
                elif key == "round":
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value) if value != "" else None
            out.append(parsed)
    return out
