"""Verification and ablation machinery.

Covers: influential-field probes (which output pixels one z location can
reach), the masked-gradient decomposition identity against a per-pixel
dense-gradient oracle, parameter sweeps over iteration count / tap /
sample count / LiDAR preset, coverage comparison of LiDAR presets, and
wall-clock timing of refinement versus base inference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .metrics import MetricRecord
from .models import IN_CHANNELS, Model, assemble_input
from .refine import BatchRefineResult, PnPConfig, refine, refine_batch
from .scenes import Scene, SceneParams, generate
from .sparsity import (LIDAR_PRESETS, SparseDepth, default_intrinsics,
                       sample_lidar, sample_uniform)

SWEEP_KINDS = ("iters", "tap", "samples", "lidar")

# geometry for the LiDAR coverage comparison: tall enough that scanline
# spacing, not row collisions, determines coverage (the small default
# training scene collapses dense presets onto shared rows)
LIDAR_COVERAGE_PARAMS = SceneParams(height=96, width=128)


@dataclass
class InfluentialField:
    tap: str
    pixel: tuple[int, int]
    channel: int
    affected: np.ndarray          # boolean, output resolution
    bbox: tuple[int, int]         # (height, width); (0, 0) if empty

    @property
    def bbox_slices(self) -> tuple[slice, slice] | None:
        rows = np.nonzero(self.affected.any(axis=1))[0]
        cols = np.nonzero(self.affected.any(axis=0))[0]
        if rows.size == 0:
            return None
        return (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))


def influential_field(model: Model, tap: str, pixel: tuple[int, int],
                      channel: int = 0, x=None, mode: str = "geometric",
                      epsilon: float = 1.0) -> InfluentialField:
    """Output pixels affected by perturbing one z location at the tap.

    ``geometric`` mode measures pure reachability: convolution kernels are
    replaced by all-ones, biases dropped, and relu bypassed to identity, so
    the affected set is the support of the probe response.  ``data`` mode
    uses the real weights and activations around the actual z (requires x).
    """
    if mode not in ("geometric", "data"):
        raise ConfigError(f"unknown influential-field mode {mode!r}")
    if x is None:
        if mode == "data":
            raise ConfigError("data mode needs the network input x")
        params = SceneParams()
        x = np.zeros((IN_CHANNELS.get(model.input_mode, 1),
                      params.height, params.width))
    x_arr = np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)

    z0 = model.forward_to(tap, x_arr).data
    c, h, w = z0.shape
    i, j = pixel
    if not (0 <= channel < c and 0 <= i < h and 0 <= j < w):
        raise ConfigError(
            f"probe location channel={channel}, pixel={pixel} outside z "
            f"extent {z0.shape} at tap {tap!r}")

    probe = mode == "geometric"
    base_z = np.zeros_like(z0) if probe else z0
    pert_z = base_z.copy()
    pert_z[channel, i, j] += epsilon

    _, base_out = model.rear_nodes(tap, base_z, x_arr, probe=probe)
    _, pert_out = model.rear_nodes(tap, pert_z, x_arr, probe=probe)
    diff = np.abs(pert_out.out - base_out.out)
    affected = diff.max(axis=0) > 0

    rows = np.nonzero(affected.any(axis=1))[0]
    cols = np.nonzero(affected.any(axis=0))[0]
    bbox = ((int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))
            if rows.size else (0, 0))
    return InfluentialField(tap=tap, pixel=(i, j), channel=channel,
                            affected=affected, bbox=bbox)


def residual_decomposition(model: Model, x, ds: SparseDepth, tap: str,
                           loss_kind: str = "l1"
                           ) -> tuple[np.ndarray, np.ndarray, float]:
    """Masked-gradient identity check against a per-pixel oracle.

    g_hat is d(sum_ij M_ij L_ij)/dz from one backward pass; the oracle sums
    per-pixel gradients g_ij = d L_ij / dz obtained by backpropagating each
    valid pixel's loss separately.  Returns (sum of masked g_ij, g_hat,
    sup-norm of their difference).  The mask enters the graph only as a
    constant, so the residual is pure backward-linearity error.
    """
    mask = ds.mask.data
    values = ds.values.data
    if mask.sum() == 0:
        raise ConfigError("residual decomposition needs a nonempty mask")
    model.check_tap(tap)

    x_arr = np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)
    z = model.forward_to(tap, x_arr).data
    z_node, out = model.rear_nodes(tap, z, x_arr)

    g_hat = ad.backward_to(
        ad.sparse_loss(out, (values, mask), kind=loss_kind, reduction="sum"),
        z_node).data

    g_sum = np.zeros_like(z)
    for _, i, j in zip(*np.nonzero(mask)):
        single = np.zeros_like(mask)
        single[0, i, j] = 1.0
        loss_ij = ad.sparse_loss(out, (values, single), kind=loss_kind,
                                 reduction="sum")
        g_sum += ad.backward_to(loss_ij, z_node).data

    residual_norm = float(np.abs(g_hat - g_sum).max())
    return g_sum, g_hat, residual_norm


# --- sweeps --------------------------------------------------------------


@dataclass
class SweepRow:
    setting: str
    value: float                      # numeric setting; taps are normalized to [0,1]
    before: MetricRecord
    after: MetricRecord
    median_rmse_before: float
    median_rmse_after: float
    runtime_s: float
    failures: int


@dataclass
class SweepResult:
    kind: str
    rows: list[SweepRow]


def uniform_sparses(scenes: list[Scene], n: int, seed: int) -> list[SparseDepth]:
    return [sample_uniform(s.depth, n,
                           seed=np.random.SeedSequence([seed, i]).generate_state(1)[0])
            for i, s in enumerate(scenes)]


def lidar_sparses(scenes: list[Scene], preset: str, seed: int) -> list[SparseDepth]:
    if preset not in LIDAR_PRESETS:
        raise ConfigError(f"unknown LiDAR preset {preset!r}; "
                          f"valid: {sorted(LIDAR_PRESETS)}")
    spec = LIDAR_PRESETS[preset]
    return [sample_lidar(s.depth, spec,
                         seed=np.random.SeedSequence([seed, i]).generate_state(1)[0])
            for i, s in enumerate(scenes)]


def _batch_to_row(setting: str, value: float, batch: BatchRefineResult,
                  runtime_s: float) -> SweepRow:
    rb = [o.before.rmse_m for o in batch.outcomes]
    ra = [o.after.rmse_m for o in batch.outcomes]
    return SweepRow(setting=setting, value=value,
                    before=batch.mean_before, after=batch.mean_after,
                    median_rmse_before=float(np.median(rb)),
                    median_rmse_after=float(np.median(ra)),
                    runtime_s=runtime_s, failures=batch.failures)


def sweep(kind: str, model: Model, scenes: list[Scene], base_cfg: PnPConfig,
          settings: list, n_samples: int = 0, seed: int = 0) -> SweepResult:
    """Evaluate refine_batch per setting; settings keep their given order.

    ``n_samples`` is the sparse count used by the iters and tap sweeps
    (defaults to 1% of the pixel grid).
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; valid: {SWEEP_KINDS}")
    if len(scenes) < 20:
        raise ConfigError("sweeps need >= 20 scenes for stable statistics")
    h, w = scenes[0].depth.data.shape[1:]
    if n_samples <= 0:
        n_samples = max(1, round(0.01 * h * w))

    rows = []
    fixed = (uniform_sparses(scenes, n_samples, seed)
             if kind in ("iters", "tap") else None)
    for setting in settings:
        cfg = replace(base_cfg)
        if kind == "iters":
            cfg.iterations = int(setting)
            sparses, value = fixed, float(setting)
        elif kind == "tap":
            cfg.tap = str(setting)
            taps = model.taps
            value = taps.index(cfg.tap) / max(1, len(taps) - 1)
            sparses = fixed
        elif kind == "samples":
            sparses = uniform_sparses(scenes, int(setting), seed)
            value = float(setting)
        else:  # lidar
            sparses = lidar_sparses(scenes, str(setting), seed)
            value = float(np.mean([sp.count for sp in sparses]))
        t0 = time.perf_counter()
        batch = refine_batch(model, scenes, sparses, cfg)
        rows.append(_batch_to_row(str(setting), value, batch,
                                  time.perf_counter() - t0))
    return SweepResult(kind=kind, rows=rows)


def sweep_csv_lines(result: SweepResult) -> list[str]:
    lines = ["kind,setting,value,rmse_before,rmse_after,mae_before,mae_after,"
             "mre_before,mre_after,d1_after,median_rmse_before,"
             "median_rmse_after,failures,runtime_s"]
    for r in result.rows:
        lines.append(
            f"{result.kind},{r.setting},{r.value:.6g},"
            f"{r.before.rmse_m:.6f},{r.after.rmse_m:.6f},"
            f"{r.before.mae_m:.6f},{r.after.mae_m:.6f},"
            f"{r.before.mre:.6f},{r.after.mre:.6f},"
            f"{r.after.delta1 * 100:.1f},"
            f"{r.median_rmse_before:.6f},{r.median_rmse_after:.6f},"
            f"{r.failures},{r.runtime_s:.4f}")
    return lines


# --- LiDAR coverage -------------------------------------------------------


def lidar_coverage(seed: int = 0,
                   params: SceneParams = LIDAR_COVERAGE_PARAMS) -> dict[str, int]:
    """Mask pixel counts per preset on one rendered scene."""
    scene = generate(seed, params)
    cam = default_intrinsics(params.height, params.width)
    return {name: sample_lidar(scene.depth, spec, cam, seed=seed).count
            for name, spec in LIDAR_PRESETS.items()}


def lidar_coverage_ordering(seeds=range(10),
                            params: SceneParams = LIDAR_COVERAGE_PARAMS
                            ) -> tuple[list[str], int]:
    """Majority coverage ordering over seeds: (ordering, votes for it)."""
    orderings = []
    for seed in seeds:
        cov = lidar_coverage(seed, params)
        orderings.append(tuple(sorted(cov, key=cov.get, reverse=True)))
    best = max(set(orderings), key=orderings.count)
    return list(best), orderings.count(best)


# --- timing ---------------------------------------------------------------


@dataclass
class TimingReport:
    base_mean_s: float
    refine_mean_s: float
    runs: int

    @property
    def ratio(self) -> float:
        return self.refine_mean_s / self.base_mean_s if self.base_mean_s else float("inf")


def time_inference(model: Model, scenes: list[Scene],
                   sparses: list[SparseDepth], cfg: PnPConfig,
                   runs: int = 30) -> TimingReport:
    """Mean wall time of base inference vs refinement over ``runs`` calls."""
    if runs < 1:
        raise ConfigError("need at least one timing run")
    inputs = [assemble_input(s, sp if model.input_mode != "rgb" else None,
                             model.input_mode)
              for s, sp in zip(scenes, sparses)]

    t0 = time.perf_counter()
    for r in range(runs):
        model.run(inputs[r % len(inputs)])
    base = (time.perf_counter() - t0) / runs

    t0 = time.perf_counter()
    for r in range(runs):
        refine(model, inputs[r % len(inputs)], sparses[r % len(sparses)], cfg)
    with_pnp = (time.perf_counter() - t0) / runs
    return TimingReport(base_mean_s=base, refine_mean_s=with_pnp, runs=runs)
