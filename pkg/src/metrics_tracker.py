"""Metrics Tracker component for the training metrics stream"""
import json
import logging
import statistics
from pathlib import Path
from typing import List, Optional, Union

from prometheus_client import CollectorRegistry, Counter, Gauge, write_to_textfile

from src.models import StepRecord

logger = logging.getLogger(__name__)


class MetricsTracker:
    """Append one JSON record per step and mirror the latest values as Prometheus metrics"""

    def __init__(self, out_dir: Union[str, Path], stage: str = "pretrain"):
        """Initialize metrics tracker"""
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stage = stage
        self.stream_path = self.out_dir / "metrics.jsonl"
        self.prom_path = self.out_dir / "metrics.prom"
        self.records: List[StepRecord] = []

        self.registry = CollectorRegistry()
        self.loss_gauge = Gauge("maep_loss", "Latest loss value", ["stage", "term"],
                                registry=self.registry)
        self.lr_gauge = Gauge("maep_learning_rate", "Latest learning rate", ["stage"],
                              registry=self.registry)
        self.grad_norm_gauge = Gauge("maep_grad_norm", "Latest gradient norm", ["stage"],
                                     registry=self.registry)
        self.steps_counter = Counter("maep_steps", "Optimizer steps taken", ["stage"],
                                     registry=self.registry)

    def record_step(self, record: StepRecord) -> None:
        """Append a step record to the stream"""
        self.records.append(record)
        with open(self.stream_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

        self.loss_gauge.labels(record.stage, "total").set(record.loss_total)
        self.loss_gauge.labels(record.stage, "purify").set(record.loss_purify)
        self.loss_gauge.labels(record.stage, "recon").set(record.loss_recon)
        self.lr_gauge.labels(record.stage).set(record.lr)
        self.grad_norm_gauge.labels(record.stage).set(record.grad_norm)
        self.steps_counter.labels(record.stage).inc()

    def set_gauge(self, name: str, value: float) -> None:
        """Stage-level scalar such as validation loss"""
        self.loss_gauge.labels(self.stage, name).set(value)

    def export(self) -> Path:
        """Write the Prometheus text exposition at stage end"""
        write_to_textfile(str(self.prom_path), self.registry)
        logger.debug(f"Metrics exported to {self.prom_path}")
        return self.prom_path

    def losses(self, stage: Optional[str] = None) -> List[float]:
        stage = stage or self.stage
        return [r.loss_total for r in self.records if r.stage == stage]

    def smoothed_loss(self, window: int = 20, at_start: bool = False,
                      stage: Optional[str] = None) -> float:
        """Mean total loss over the first or last `window` steps"""
        values = self.losses(stage)
        if not values:
            return float("nan")
        chunk = values[:window] if at_start else values[-window:]
        return statistics.fmean(chunk)

    def loss_reduction(self, window: int = 20, stage: Optional[str] = None) -> float:
        """Relative drop of the smoothed loss from the start to the end of the stage"""
        first = self.smoothed_loss(window, at_start=True, stage=stage)
        last = self.smoothed_loss(window, stage=stage)
        if not first or first != first:
            return 0.0
        return (first - last) / first

    @staticmethod
    def read_stream(path: Union[str, Path]) -> List[StepRecord]:
        """Load a metrics.jsonl file back into records"""
        records = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    records.append(StepRecord(**json.loads(line)))
        return records
