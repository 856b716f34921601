import json
import logging
import sys
from functools import wraps

import click

from qdistill.config.settings import Settings, parse_override_args
from qdistill.core.pipeline import Pipeline

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
OVERRIDES = dict(ignore_unknown_options=True, allow_extra_args=True)

logger = logging.getLogger(__name__)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Enable debug logging')
def cli(verbose):
    """Quantized knowledge distillation: train, distill, quantize, evaluate and benchmark."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def pipeline_command(name, help_text):
    """Register a subcommand that takes --config plus free-form --section.key overrides.

    The wrapped function receives a ready Pipeline as its first argument.
    Any error ends the command with one `error=<Class> message=<text>`
    line on stderr and exit status 1.
    """
    def decorator(fn):
        @cli.command(name, help=help_text, context_settings=OVERRIDES)
        @click.option('--config', '-c', default=None, help='Configuration file path (default: $QDISTILL_CONFIG or config.yaml)')
        @click.pass_context
        @wraps(fn)
        def command(ctx, config, **kwargs):
            try:
                settings = Settings(config, parse_override_args(ctx.args))
                fn(Pipeline(settings.run_config()), **kwargs)
            except Exception as e:
                logger.error(f"{name} failed: {e}")
                click.echo(f"error={type(e).__name__} message={' '.join(str(e).split())}", err=True)
                sys.exit(1)
        return command
    return decorator


def emit(report, out=None):
    """Print a JSON report, or write it to out."""
    text = json.dumps(report, indent=2)
    if out:
        with open(out, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
        click.echo(f"Wrote {out}")
    else:
        click.echo(text)


@click.option('--out', '-o', default=None, help='Output model path (default: paths.teacher)')
@pipeline_command('train-teacher', 'Train the float teacher')
def train_teacher(pipeline, out):
    teacher = pipeline.train_teacher(out)
    click.echo(f"Saved teacher ({teacher.parameter_count()} parameters) to {out or pipeline.run.paths['teacher']}")


@click.option('--out', '-o', default=None, help='Output model path (default: paths.student or paths.kd_student)')
@click.option('--kd', 'teacher', default=None, help='Teacher model path; enables distillation')
@pipeline_command('train-student', 'Train a float student, optionally distilled from a teacher')
def train_student(pipeline, out, teacher):
    student, _ = pipeline.train_student(out, teacher_path=teacher)
    default = pipeline.run.paths['kd_student' if teacher else 'student']
    click.echo(f"Saved student ({student.parameter_count()} parameters) to {out or default}")


@click.option('--out', '-o', default=None, help='Output model path (default: paths.qd_student)')
@click.option('--student', default=None, help='Float student to start from (default: a fresh student)')
@click.option('--teacher', default=None, help='Teacher model path (default: paths.teacher)')
@pipeline_command('qat-distill', 'Quantization-aware distillation into an 8-bit student')
def qat_distill(pipeline, out, student, teacher):
    qmodel = pipeline.qat_distill(out, teacher_path=teacher, student_path=student)
    click.echo(f"Saved quantized student ({qmodel.parameter_count()} parameters) "
               f"to {out or pipeline.run.paths['qd_student']}")


@click.option('--out', '-o', default=None, help='Output model path (default: paths.quantized)')
@click.argument('model', required=False)
@pipeline_command('quantize', 'Calibrate a trained float model and convert it to 8 bits')
def quantize(pipeline, out, model):
    pipeline.quantize(model, out)
    click.echo(f"Saved quantized model to {out or pipeline.run.paths['quantized']}")


@click.option('--out', '-o', default=None, help='Write the JSON report here instead of stdout')
@click.option('--split', type=click.Choice(['train', 'val', 'test']), default='test', help='Dataset split')
@click.argument('model')
@pipeline_command('eval', 'Mean per-class accuracy, per-class accuracy and confusion counts')
def eval_model(pipeline, out, split, model):
    emit(pipeline.evaluate(model, split), out)


@click.option('--out', '-o', default=None, help='Write the JSON report here instead of stdout')
@click.option('--split', type=click.Choice(['train', 'val', 'test']), default='test', help='Dataset split')
@click.argument('model_b')
@click.argument('model_a')
@pipeline_command('compare', 'Per-class accuracy of two models and the change from A to B')
def compare(pipeline, out, split, model_b, model_a):
    emit(pipeline.compare(model_a, model_b, split), out)


@click.option('--out', '-o', default=None, help='Write the JSON report here instead of stdout')
@click.option('--iterations', '-n', type=int, default=None, help='Timed forward passes (default: bench.iterations)')
@click.argument('model')
@pipeline_command('bench', 'Model size and single-sample latency')
def bench(pipeline, out, iterations, model):
    emit(pipeline.bench(model, iterations).to_dict(), out)


@click.option('--out', '-o', default=None, help='Write the JSON rows here instead of stdout')
@click.option('--csv', 'csv_path', default=None, help='Also write the rows as CSV')
@click.option('--teacher', default=None, help='Teacher model path (default: paths.teacher)')
@pipeline_command('sweep', 'Width, temperature and teacher-weight studies')
def sweep(pipeline, out, csv_path, teacher):
    from qdistill.core.sweep import Sweep, format_table, write_csv

    teacher_model = pipeline.load_float_model(teacher or pipeline.run.paths['teacher'])
    rows = Sweep(pipeline, teacher_model, pipeline.run.sweep).run()
    click.echo(format_table(rows))
    if csv_path:
        write_csv(rows, csv_path)
    if out:
        emit([row.to_dict() for row in rows], out)


if __name__ == '__main__':
    cli()
