"""Run log: one text file per invocation, optionally echoed to the console."""
import csv
import sys
import uuid
from pathlib import Path

import torch


class RunLog:
    def __init__(self, run_dir: str | Path | None, console: bool = True):
        self.run_id = uuid.uuid4()
        self.console = console
        self.logfile = None
        if run_dir is not None:
            logs = Path(run_dir) / "logs"
            logs.mkdir(parents=True, exist_ok=True)
            self.logfile = logs / f"{self.run_id}.txt"

    def log(self, s: str, console: bool = False):
        if self.logfile is not None:
            with open(self.logfile, "a") as f:
                print(s, file=f)
        if console and self.console:
            print(s)

    def header(self, argv: list[str]):
        self.log(f"command: {' '.join(argv)}")
        self.log(f"Running Python {sys.version}")
        self.log(f"Running PyTorch {torch.version.__version__} with {torch.get_num_threads()} threads")
        self.log("=" * 100)


class MetricsWriter:
    """Appends (iteration, loss, wall_ms) rows to a CSV file."""

    fields = ("iteration", "loss", "wall_ms")

    def __init__(self, path: str | Path, truncate_after: int | None = None):
        self.path = Path(path)
        rows = []
        if self.path.exists() and truncate_after is not None:
            with open(self.path, newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["iteration"]) <= truncate_after]
        with open(self.path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.fields)
            for r in rows:
                w.writerow([r[k] for k in self.fields])

    def write(self, iteration: int, loss: float, wall_ms: float):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([iteration, f"{loss:.8g}", f"{wall_ms:.1f}"])


def read_metrics(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as f:
        return [(int(r["iteration"]), float(r["loss"]), float(r["wall_ms"])) for r in csv.DictReader(f)]
