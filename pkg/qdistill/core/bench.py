"""Single-sample latency benchmark for float and quantized models."""
import time
from dataclasses import asdict, dataclass
from logging import getLogger
from pathlib import Path
from typing import Optional, Union

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from qdistill.core.int8_infer import QuantizedModel, quantized_forward
from qdistill.core.models import count_macs
from qdistill.core.nn import Model, forward
from qdistill.exceptions import ConfigurationError

logger = getLogger(__name__)


@dataclass
class BenchResult:
    size_bytes: Optional[int]
    mean_latency_ms: float
    p50_latency_ms: float
    p95_latency_ms: float
    fps: float
    iterations: int
    warmup: int
    quantized: bool
    macs: Optional[int] = None
    threads: int = 1
    # largest thread count any native pool reported while timing; None without native pools
    pool_threads: Optional[int] = None

    def to_dict(self):
        return asdict(self)


def active_pool_threads() -> Optional[int]:
    """Largest thread count among the loaded BLAS and OpenMP pools."""
    pools = threadpool_info()
    if not pools:
        return None
    return max(int(pool["num_threads"]) for pool in pools)


def _runner(model: Union[Model, QuantizedModel]):
    if isinstance(model, QuantizedModel):
        return lambda x: quantized_forward(model, x)
    return lambda x: forward(model, x, "eval", observe=False)[0]


def benchmark(
    model: Union[Model, QuantizedModel],
    iterations: int = 1000,
    warmup: int = 50,
    path: Optional[Union[str, Path]] = None,
    seed: int = 0,
    threads: int = 1,
) -> BenchResult:
    """Time `iterations` batch-1 forward passes after `warmup` untimed ones.

    The native BLAS and OpenMP pools are limited to `threads` for the
    whole run and restored afterwards.
    """
    if iterations < 1 or warmup < 0:
        raise ConfigurationError(f"need iterations >= 1 and warmup >= 0, got {iterations} and {warmup}")
    if threads < 1:
        raise ConfigurationError(f"threads must be at least 1, got {threads}")
    sample = np.random.default_rng(seed).random((1,) + tuple(model.input_shape)).astype(np.float32)
    run = _runner(model)
    timings = np.empty(iterations, dtype=np.float64)
    with threadpool_limits(limits=threads):
        pool_threads = active_pool_threads()
        logger.debug(f"bench threads={threads} pool_threads={pool_threads}")
        for _ in range(warmup):
            run(sample)
        for i in range(iterations):
            start = time.perf_counter()
            run(sample)
            timings[i] = (time.perf_counter() - start) * 1000.0
    mean = float(timings.mean())
    quantized = isinstance(model, QuantizedModel)
    result = BenchResult(
        size_bytes=Path(path).stat().st_size if path is not None else None,
        mean_latency_ms=mean,
        p50_latency_ms=float(np.percentile(timings, 50)),
        p95_latency_ms=float(np.percentile(timings, 95)),
        fps=1000.0 / mean,
        iterations=iterations,
        warmup=warmup,
        quantized=quantized,
        macs=None if quantized else count_macs(model),
        threads=threads,
        pool_threads=pool_threads,
    )
    logger.info(f"bench quantized={quantized} mean_ms={mean:.4f} p95_ms={result.p95_latency_ms:.4f} "
                f"fps={result.fps:.1f}")
    return result
