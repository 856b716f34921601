"""Sequential hyperparameter sweep: width, then temperature, then teacher weight.

Each study keeps the best value of the previous one fixed. Trials of one
study may run in parallel threads; every trial trains with its own seed
offset and rows are merged in grid order.
"""
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

from qdistill.core.distill import KDConfig
from qdistill.core.nn import Model
from qdistill.core.training import evaluate_model

logger = getLogger(__name__)

COLUMNS = ("study", "width_multiplier", "temperature", "beta", "val_mpca", "baseline_val_mpca")


@dataclass
class SweepRow:
    study: str
    width_multiplier: float
    temperature: float
    beta: float
    val_mpca: float
    baseline_val_mpca: float

    @property
    def beats_baseline(self) -> bool:
        return self.val_mpca > self.baseline_val_mpca

    def to_dict(self):
        return asdict(self)


Trial = Tuple[float, float, float]


class Sweep:
    """Runs the three studies against one trained teacher."""

    def __init__(self, pipeline, teacher: Model, sweep_cfg):
        self.pipeline = pipeline
        self.teacher = teacher
        self.cfg = sweep_cfg
        self._baselines: Dict[float, float] = {}
        self._trials = 0
        pipeline.splits  # load once, before any worker thread

    def _train(self, width: float, kd_cfg, seed_offset: int) -> float:
        teacher = self.teacher if kd_cfg is not None else None
        student, _ = self.pipeline.train_student(width_multiplier=width, kd_cfg=kd_cfg, epochs=self.cfg.epochs,
                                                 seed_offset=seed_offset, save=False, teacher=teacher)
        return evaluate_model(student, self.pipeline.split("val"))

    def baseline(self, width: float) -> float:
        """Validation accuracy of a student of this width trained without distillation."""
        if width not in self._baselines:
            self._baselines[width] = self._train(width, None, 0)
            logger.info(f"sweep baseline width={width:g} val_mpca={self._baselines[width]:.4f}")
        return self._baselines[width]

    def _map(self, fn: Callable, trials: Sequence[Trial]) -> List[float]:
        offsets = range(self._trials + 1, self._trials + 1 + len(trials))
        self._trials += len(trials)
        args = list(zip(trials, offsets))
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                return list(pool.map(lambda a: fn(*a), args))
        return [fn(*a) for a in args]

    def _study(self, name: str, trials: Sequence[Trial]) -> List[SweepRow]:
        def run(trial: Trial, offset: int) -> float:
            width, temperature, beta = trial
            return self._train(width, KDConfig(beta=beta, temperature=temperature), offset)

        scores = self._map(run, trials)
        rows = [SweepRow(name, w, t, b, score, self.baseline(w)) for (w, t, b), score in zip(trials, scores)]
        for row in rows:
            logger.info(f"sweep study={name} width={row.width_multiplier:g} T={row.temperature:g} "
                        f"beta={row.beta:g} val_mpca={row.val_mpca:.4f}")
        return rows

    def run(self) -> List[SweepRow]:
        cfg = self.cfg
        rows = self._study("width", [(w, cfg.width_temperature, cfg.width_beta) for w in cfg.widths])
        best_width = _best(rows).width_multiplier
        temp_rows = self._study("temperature", [(best_width, t, cfg.temperature_beta) for t in cfg.temperatures])
        best_temperature = _best(temp_rows).temperature
        beta_rows = self._study("beta", [(best_width, best_temperature, b) for b in cfg.betas])
        return rows + temp_rows + beta_rows


def _best(rows: List[SweepRow]) -> SweepRow:
    # first row wins ties
    return max(rows, key=lambda r: r.val_mpca)


def format_table(rows: List[SweepRow]) -> str:
    header = f"{'study':<12} {'width':>6} {'T':>5} {'beta':>5} {'val_mpca':>9} {'no-KD':>9}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.study:<12} {row.width_multiplier:>6g} {row.temperature:>5g} {row.beta:>5g} "
            f"{100 * row.val_mpca:>8.2f}% {100 * row.baseline_val_mpca:>8.2f}%"
        )
    return "\n".join(lines)


def write_csv(rows: List[SweepRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())
