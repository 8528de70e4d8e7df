"""Inference-time refinement of the intermediate feature map.

Starting from z_0 = front(x), each iteration backpropagates the sparse-point
loss of the rear segment's prediction to z and steps against it:

    z_{k+1} = z_k - alpha * U(d loss(rear(z_k), sparse) / d z_k)

U is the elementwise sign by default (sign(0) = 0), optionally the raw
gradient or an Adam-style step with state fresh per call.  Network
parameters are never touched; only z moves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError
from .metrics import MetricRecord, evaluate, mean_record
from .models import Model, assemble_input
from .scenes import Scene
from .sparsity import SparseDepth

UPDATE_RULES = ("sign", "raw_gradient", "adam")

STATUS_OK = "ok"
STATUS_NO_OBSERVATION = "no_observation"
STATUS_NUMERIC_FAILURE = "numeric_failure"


@dataclass
class PnPConfig:
    tap: str | None = None          # None = earliest tap (largest influential field)
    alpha: float = 0.01
    iterations: int = 5
    loss_kind: str = "l1"
    update_rule: str = "sign"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigError(f"unknown update rule {self.update_rule!r}; "
                              f"expected one of {UPDATE_RULES}")
        if self.loss_kind not in ad.LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")

    def resolve_tap(self, model: Model) -> str:
        if self.tap is None:
            return model.taps[0]
        model.check_tap(self.tap)
        return self.tap


@dataclass
class TraceEntry:
    iteration: int
    sparse_loss: float
    update_inf_norm: float
    prediction: np.ndarray | None = None


@dataclass
class RefineResult:
    depth: Tensor
    trace: list[TraceEntry]
    status: str = STATUS_OK

    @property
    def sparse_losses(self) -> list[float]:
        return [t.sparse_loss for t in self.trace]


class _AdamState:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def refine(model: Model, x, ds: SparseDepth, cfg: PnPConfig | None = None,
           keep_predictions: bool = False) -> RefineResult:
    """Run K backward-forward iterations; the trace has K+1 entries.

    Entry k records the sparse-point loss of rear(z_k) and the sup-norm of
    the update that produced z_k (0 for k = 0).  Model parameters are
    unchanged.  An empty mask returns the base prediction with
    no-observation status; a non-finite excursion aborts with the last
    finite prediction and numeric-failure status.
    """
    cfg = cfg or PnPConfig()
    cfg.validate()
    tap = cfg.resolve_tap(model)

    z = model.forward_to(tap, x).data
    adam = (_AdamState(z.shape, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            if cfg.update_rule == "adam" else None)

    trace: list[TraceEntry] = []
    last_pred: np.ndarray | None = None
    last_norm = 0.0
    try:
        for k in range(cfg.iterations + 1):
            z_node, out = model.rear_nodes(tap, z, x)
            pred = out.out
            loss_node = ad.sparse_loss(out, ds, kind=cfg.loss_kind)
            trace.append(TraceEntry(k, float(loss_node.out), last_norm,
                                    pred.copy() if keep_predictions else None))
            last_pred = pred
            if loss_node.no_observation:
                return RefineResult(Tensor(pred), trace, STATUS_NO_OBSERVATION)
            if k == cfg.iterations:
                break
            grad = ad.backward_to(loss_node, z_node).data
            if cfg.update_rule == "sign":
                update = cfg.alpha * np.sign(grad)
            elif cfg.update_rule == "raw_gradient":
                update = cfg.alpha * grad
            else:
                update = cfg.alpha * adam.step(grad)
            z = z - update
            last_norm = float(np.abs(update).max()) if update.size else 0.0
            if not np.all(np.isfinite(z)):
                raise NumericError("non-finite intermediate map during refinement")
    except NumericError:
        depth = Tensor(last_pred) if last_pred is not None else model.run(x)
        return RefineResult(depth, trace, STATUS_NUMERIC_FAILURE)

    return RefineResult(Tensor(last_pred), trace)


def write_trace_csv(trace: list[TraceEntry], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "sparse_loss", "update_inf_norm"])
        for entry in trace:
            writer.writerow([entry.iteration, f"{entry.sparse_loss:.12g}",
                             f"{entry.update_inf_norm:.12g}"])


@dataclass
class SceneOutcome:
    index: int
    before: MetricRecord | None
    after: MetricRecord | None
    status: str
    trace: list[TraceEntry] = field(default_factory=list)
    base_depth: np.ndarray | None = None
    refined_depth: np.ndarray | None = None


@dataclass
class BatchRefineResult:
    outcomes: list[SceneOutcome]
    mean_before: MetricRecord
    mean_after: MetricRecord
    failures: int

    @property
    def rmse_deltas(self) -> list[float]:
        return [o.before.rmse_m - o.after.rmse_m for o in self.outcomes
                if o.before and o.after]


def refine_batch(model: Model, scenes: list[Scene],
                 sparses: list[SparseDepth], cfg: PnPConfig | None = None,
                 keep_depths: bool = False) -> BatchRefineResult:
    """Paired before/after dense metrics across scenes.

    Per-scene refinement failures are recorded and the batch continues;
    failed scenes keep their base metrics on both sides.
    """
    if len(scenes) != len(sparses):
        raise ConfigError("scenes and sparse observations must pair up")
    if not scenes:
        raise ConfigError("need at least one scene")
    cfg = cfg or PnPConfig()
    outcomes = []
    failures = 0
    for i, (scene, ds) in enumerate(zip(scenes, sparses)):
        x = assemble_input(scene, ds if model.input_mode != "rgb" else None,
                           model.input_mode)
        base = model.run(x)
        before = evaluate(base, scene.depth)
        result = refine(model, x, ds, cfg)
        if result.status == STATUS_NUMERIC_FAILURE:
            failures += 1
        after = evaluate(result.depth, scene.depth)
        outcomes.append(SceneOutcome(
            index=i, before=before, after=after, status=result.status,
            trace=result.trace,
            base_depth=base.data.copy() if keep_depths else None,
            refined_depth=result.depth.data.copy() if keep_depths else None))
    return BatchRefineResult(
        outcomes=outcomes,
        mean_before=mean_record([o.before for o in outcomes]),
        mean_after=mean_record([o.after for o in outcomes]),
        failures=failures)
