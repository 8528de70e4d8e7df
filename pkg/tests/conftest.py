"""Shared fixtures.

The trained benchmark (200 training scenes, 100 held-out with 1% uniform
masks, default refinement config) is expensive, so it is built once per
session and shared by the refinement, analysis, and acceptance tests.
"""

import time
from dataclasses import dataclass

import pytest

from pnpdepth import analysis, models, refine, scenes

TRAIN_SEED = 1000
HELD_SEED = 5000
MASK_SEED = 77
N_TRAIN = 200
N_HELD = 100


@dataclass
class Benchmark:
    model: models.Model
    train_scenes: list
    held_scenes: list
    sparses: list
    n_samples: int
    train_result: models.TrainResult
    train_seconds: float
    batch: refine.BatchRefineResult
    refine_seconds: float


@pytest.fixture(scope="session")
def bench() -> Benchmark:
    train_scenes = scenes.generate_batch(TRAIN_SEED, N_TRAIN)
    model = models.build("plain_cnn", "sd", seed=0)
    t0 = time.perf_counter()
    train_result = models.train(model, train_scenes, models.TrainConfig())
    train_seconds = time.perf_counter() - t0
    assert train_result.status == "converged"

    held = scenes.generate_batch(HELD_SEED, N_HELD)
    h, w = held[0].depth.data.shape[1:]
    n_samples = max(1, round(0.01 * h * w))
    sparses = analysis.uniform_sparses(held, n_samples, seed=MASK_SEED)

    t0 = time.perf_counter()
    batch = refine.refine_batch(model, held, sparses, refine.PnPConfig())
    refine_seconds = time.perf_counter() - t0

    return Benchmark(model=model, train_scenes=train_scenes, held_scenes=held,
                     sparses=sparses, n_samples=n_samples,
                     train_result=train_result, train_seconds=train_seconds,
                     batch=batch, refine_seconds=refine_seconds)
