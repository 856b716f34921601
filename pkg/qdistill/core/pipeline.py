import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from qdistill.core import model_io
from qdistill.core.bench import BenchResult, benchmark
from qdistill.core.data import DatasetSplit, augment_batch, load_dataset
from qdistill.core.distill import quantized_distillation_train
from qdistill.core.int8_infer import QuantizedModel
from qdistill.core.metrics import compare_reports, evaluate
from qdistill.core.models import build_student, build_teacher
from qdistill.core.nn import Model
from qdistill.core.qat import calibrate, convert_to_int8, fuse_layers, prepare_qat
from qdistill.core.training import EpochRecord, train
from qdistill.exceptions import ConfigurationError

SPLITS = ('train', 'val', 'test')


def history_path(model_path: Union[str, Path]) -> Path:
    """runs/teacher.qdk -> runs/teacher.history.json"""
    return Path(model_path).with_suffix('.history.json')


class Pipeline:
    """Runs the teacher, student, distillation and quantization steps for one RunConfig."""

    def __init__(self, run_config):
        self.logger = logging.getLogger(__name__)
        self.run = run_config
        self._splits: Optional[Tuple[DatasetSplit, DatasetSplit, DatasetSplit]] = None

    @property
    def splits(self) -> Tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
        if self._splits is None:
            self._splits = load_dataset(self.run.data)
        return self._splits

    def split(self, name: str) -> DatasetSplit:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}; choose from {', '.join(SPLITS)}")
        return self.splits[SPLITS.index(name)]

    @property
    def num_classes(self) -> int:
        return self.splits[0].num_classes

    # -- persistence ---------------------------------------------------------

    def load_model(self, path: Union[str, Path]) -> Union[Model, QuantizedModel]:
        if not Path(path).exists():
            raise ConfigurationError(f"model file {path} does not exist")
        model = model_io.load(path)
        if model.num_classes != self.num_classes:
            raise ConfigurationError(
                f"{path} predicts {model.num_classes} classes but the dataset has {self.num_classes}"
            )
        return model

    def load_float_model(self, path: Union[str, Path]) -> Model:
        model = self.load_model(path)
        if not isinstance(model, Model):
            raise ConfigurationError(f"{path} holds a quantized model; a float model is required")
        return model

    def save(self, model: Union[Model, QuantizedModel], path: Union[str, Path],
             records: Optional[List[EpochRecord]] = None) -> int:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        size = model_io.save(model, path)
        if records is not None:
            history = [record.to_dict() for record in records]
            history_path(path).write_text(json.dumps(history, indent=2))
        return size

    # -- steps -----------------------------------------------------------------

    def train_teacher(self, out: Optional[str] = None) -> Model:
        cfg = self.run.teacher_train
        teacher = build_teacher(self.num_classes, dropout_p=cfg.dropout_p, seed=self.run.seed)
        self.logger.info(f"Training teacher ({teacher.parameter_count()} parameters) for {cfg.epochs} epochs")
        train_split, val_split, _ = self.splits
        records = train(teacher, train_split, cfg, val_split=val_split, phase='teacher')
        self.save(teacher, out or self.run.paths['teacher'], records)
        return teacher

    def train_student(self, out: Optional[str] = None, teacher_path: Optional[str] = None,
                      width_multiplier: Optional[float] = None, kd_cfg=None, epochs: Optional[int] = None,
                      seed_offset: int = 0, save: bool = True,
                      teacher: Optional[Model] = None) -> Tuple[Model, List[EpochRecord]]:
        """Float student, trained on plain cross entropy or, with a teacher, on the distillation loss."""
        cfg = self.run.student_train
        if epochs is not None or seed_offset:
            cfg = replace(cfg.scaled(cfg.epochs if epochs is None else epochs), seed=cfg.seed + seed_offset)
        width = self.run.width_multiplier if width_multiplier is None else width_multiplier
        student = build_student(self.num_classes, width, dropout_p=cfg.dropout_p, seed=cfg.seed)
        if teacher_path:
            teacher = self.load_float_model(teacher_path)
        kd_cfg = (kd_cfg or self.run.kd) if teacher is not None else None
        phase = 'kd-student' if teacher is not None else 'student'
        self.logger.info(f"Training {phase} width={width:g} ({student.parameter_count()} parameters)")
        train_split, val_split, _ = self.splits
        records = train(student, train_split, cfg, val_split=val_split, teacher=teacher, kd_cfg=kd_cfg,
                        phase=phase)
        if save:
            default = self.run.paths['kd_student' if teacher is not None else 'student']
            self.save(student, out or default, records)
        return student, records

    def qat_distill(self, out: Optional[str] = None, teacher_path: Optional[str] = None,
                    student_path: Optional[str] = None) -> QuantizedModel:
        """Distill the teacher into a quantization-aware student and convert it to integers."""
        cfg = self.run.student_train
        kd_cfg = self.run.kd
        teacher = None
        if kd_cfg.beta > 0:
            teacher = self.load_float_model(teacher_path or self.run.paths['teacher'])
        if student_path:
            student = self.load_float_model(student_path)
        else:
            student = build_student(self.num_classes, self.run.width_multiplier, dropout_p=cfg.dropout_p,
                                    seed=cfg.seed)
        train_split, val_split, _ = self.splits
        records: List[EpochRecord] = []
        qmodel = quantized_distillation_train(teacher, student, train_split, kd_cfg, cfg,
                                              val_split=val_split, history=records)
        self.save(qmodel, out or self.run.paths['qd_student'], records)
        return qmodel

    def quantize(self, model_path: Optional[str] = None, out: Optional[str] = None) -> QuantizedModel:
        """Calibration-only conversion of a trained float model."""
        model = self.load_float_model(model_path or self.run.paths['student'])
        prepared = prepare_qat(fuse_layers(model))
        calibrate(prepared, augment_batch(self.splits[0].images, train=False))
        qmodel = convert_to_int8(prepared)
        self.save(qmodel, out or self.run.paths['quantized'])
        return qmodel

    def evaluate(self, model_path: str, split: str = 'test') -> Dict:
        model = self.load_model(model_path)
        report = evaluate(model, self.split(split))
        report.update(model=str(model_path), split=split, quantized=isinstance(model, QuantizedModel))
        self.logger.info(f"Evaluated {model_path} on {split}: "
                         f"mean_per_class_accuracy={report['mean_per_class_accuracy']:.4f}")
        return report

    def compare(self, path_a: str, path_b: str, split: str = 'test') -> Dict:
        report_a = self.evaluate(path_a, split)
        report_b = self.evaluate(path_b, split)
        return {
            'split': split,
            'a': {'model': str(path_a), 'per_class_accuracy': report_a['per_class_accuracy'],
                  'mean_per_class_accuracy': report_a['mean_per_class_accuracy']},
            'b': {'model': str(path_b), 'per_class_accuracy': report_b['per_class_accuracy'],
                  'mean_per_class_accuracy': report_b['mean_per_class_accuracy']},
            **compare_reports(report_a, report_b),
        }

    def bench(self, model_path: str, iterations: Optional[int] = None) -> BenchResult:
        cfg = self.run.bench
        if not Path(model_path).exists():
            raise ConfigurationError(f"model file {model_path} does not exist")
        model = model_io.load(model_path)
        return benchmark(model, iterations=iterations or cfg.iterations, warmup=cfg.warmup, path=model_path,
                         seed=self.run.seed, threads=cfg.threads)