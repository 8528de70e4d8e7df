"""Toy differentiable depth networks: build, run, split, train, serialize.

A model is an ordered program of named steps (conv blocks, 2x resampling,
channel concat).  Every inter-step boundary is a legal tap: the model can
be split there into a front segment producing the intermediate map z and a
rear segment mapping z to the depth output.  Step references are restricted
so that a rear segment only ever needs z plus the raw network input, which
it treats as a fixed side constant.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tensor
from .errors import ConfigError, NumericError
from .scenes import Scene
from .sparsity import SparseDepth, sample_uniform

ARCHS = ("plain_cnn", "encdec", "coarse_fine")
INPUT_MODES = ("rgb", "sd", "rgb+sd")
IN_CHANNELS = {"rgb": 3, "sd": 2, "rgb+sd": 5}

_ARCH_IDS = {name: i + 1 for i, name in enumerate(ARCHS)}
_MODE_IDS = {name: i + 1 for i, name in enumerate(INPUT_MODES)}

CHECKPOINT_MAGIC = b"PNPD"
CHECKPOINT_VERSION = 1


@dataclass
class Step:
    name: str
    kind: str                      # conv | down | up | concat
    inputs: tuple[str, ...]
    weight: Tensor | None = None   # (out_c, in_c, k, k) for conv
    bias: Tensor | None = None     # (out_c,)
    stride: int = 1
    pad: int = 1
    relu: bool = False


class Model:
    """Ordered step program with named taps and frozen-parameter splits."""

    def __init__(self, steps: list[Step], arch: str = "custom",
                 input_mode: str = "sd"):
        if not steps:
            raise ConfigError("model needs at least one step")
        self.steps = steps
        self.arch = arch
        self.input_mode = input_mode
        self._index = {s.name: i for i, s in enumerate(steps)}
        if len(self._index) != len(steps):
            raise ConfigError("duplicate step names")
        self._validate_references()

    def _validate_references(self) -> None:
        # a step may use "input" or any strictly earlier step, and every
        # boundary must remain splittable: rebuilding from any tap forward
        # only ever needs the tap output and "input"
        known = {"input"}
        for i, step in enumerate(self.steps):
            for ref in step.inputs:
                if ref not in known:
                    raise ConfigError(f"step {step.name!r} references unknown {ref!r}")
            known.add(step.name)
        for t in range(len(self.steps) - 1):
            reachable = {"input", self.steps[t].name}
            for step in self.steps[t + 1:]:
                for ref in step.inputs:
                    if ref not in reachable:
                        raise ConfigError(
                            f"boundary after {self.steps[t].name!r} is not a valid "
                            f"split: {step.name!r} needs {ref!r}")
                reachable.add(step.name)

    @property
    def taps(self) -> list[str]:
        return [s.name for s in self.steps[:-1]]

    def check_tap(self, tap: str) -> int:
        if tap not in self._index or tap == self.steps[-1].name:
            raise ConfigError(f"unknown tap {tap!r}; valid taps: {self.taps}")
        return self._index[tap]

    def parameters(self) -> list[Tensor]:
        out = []
        for s in self.steps:
            if s.weight is not None:
                out.append(s.weight)
            if s.bias is not None:
                out.append(s.bias)
        return out

    def serialize_params(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters())

    # --- graph construction -------------------------------------------

    def _exec_step(self, step: Step, env: dict[str, Node],
                   trainable: bool, probe: bool) -> Node:
        ins = [env[r] for r in step.inputs]
        if step.kind == "conv":
            if probe:
                w = ad.leaf(np.ones_like(step.weight.data))
                return ad.conv2d(ins[0], w, stride=step.stride, pad=step.pad)
            # inference wraps the raw arrays so shared-model refinement never
            # mutates parameter tensors, not even their grad flags
            w = ad.leaf(step.weight) if trainable else ad.leaf(step.weight.data)
            node = ad.conv2d(ins[0], w, stride=step.stride, pad=step.pad)
            b = ad.leaf(step.bias) if trainable else ad.leaf(step.bias.data)
            node = ad.bias_add(node, b)
            return ad.relu(node) if step.relu else node
        if step.kind == "down":
            return ad.downsample2x(ins[0])
        if step.kind == "up":
            return ad.upsample2x(ins[0])
        if step.kind == "concat":
            return ad.concat(ins)
        raise ConfigError(f"unknown step kind {step.kind!r}")

    def forward_nodes(self, x, trainable: bool = False) -> tuple[dict[str, Node], Node]:
        """Build the full graph; returns (env, output node)."""
        env = {"input": ad.leaf(np.asarray(x.data if isinstance(x, Tensor) else x,
                                           dtype=np.float64))}
        for step in self.steps:
            env[step.name] = self._exec_step(step, env, trainable, probe=False)
        return env, env[self.steps[-1].name]

    def run(self, x) -> Tensor:
        _, out = self.forward_nodes(x)
        return Tensor(out.out)

    def forward_to(self, tap: str, x) -> Tensor:
        """Front segment: the intermediate map z at the tap."""
        idx = self.check_tap(tap)
        env = {"input": ad.leaf(np.asarray(x.data if isinstance(x, Tensor) else x,
                                           dtype=np.float64))}
        for step in self.steps[:idx + 1]:
            env[step.name] = self._exec_step(step, env, trainable=False, probe=False)
        return Tensor(env[tap].out)

    def rear_needs_input(self, tap: str) -> bool:
        idx = self.check_tap(tap)
        return any("input" in s.inputs for s in self.steps[idx + 1:])

    def rear_nodes(self, tap: str, z, x=None, probe: bool = False
                   ) -> tuple[Node, Node]:
        """Rear segment graph from a replaceable z leaf; returns (z_node, out).

        ``x`` is the raw network input, required only when a rear step
        consumes it (it enters as a fixed constant, never updated).
        """
        idx = self.check_tap(tap)
        z_arr = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        z_node = ad.leaf(z_arr)
        env: dict[str, Node] = {self.steps[idx].name: z_node}
        if self.rear_needs_input(tap):
            if x is None:
                raise ConfigError(
                    f"rear segment from tap {tap!r} needs the network input")
            x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
            env["input"] = ad.leaf(np.zeros_like(x_arr) if probe else x_arr)
        for step in self.steps[idx + 1:]:
            env[step.name] = self._exec_step(step, env, trainable=False, probe=probe)
        return z_node, env[self.steps[-1].name]

    def forward_from(self, tap: str, z, x=None) -> Tensor:
        _, out = self.rear_nodes(tap, z, x)
        return Tensor(out.out)

    def split(self, tap: str) -> tuple["FrontSegment", "RearSegment"]:
        self.check_tap(tap)
        return FrontSegment(self, tap), RearSegment(self, tap)


@dataclass(frozen=True)
class FrontSegment:
    model: Model
    tap: str

    def __call__(self, x) -> Tensor:
        return self.model.forward_to(self.tap, x)


@dataclass(frozen=True)
class RearSegment:
    model: Model
    tap: str

    def __call__(self, z, x=None) -> Tensor:
        return self.model.forward_from(self.tap, z, x)

    @property
    def needs_input(self) -> bool:
        return self.model.rear_needs_input(self.tap)


# --- architectures -----------------------------------------------------


def _he_conv(rng, out_c: int, in_c: int, k: int = 3) -> tuple[Tensor, Tensor]:
    fan_in = in_c * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_c, in_c, k, k))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(out_c), requires_grad=True)


def _conv_step(rng, name: str, src: str, in_c: int, out_c: int,
               relu: bool = True) -> Step:
    w, b = _he_conv(rng, out_c, in_c)
    return Step(name, "conv", (src,), weight=w, bias=b, relu=relu)


def _encdec_steps(rng, in_c: int, prefix: str = "", head_name: str = "head"
                  ) -> list[Step]:
    p = prefix
    return [
        _conv_step(rng, p + "enc1", "input", in_c, 12),
        Step(p + "down1", "down", (p + "enc1",)),
        _conv_step(rng, p + "enc2", p + "down1", 12, 24),
        Step(p + "down2", "down", (p + "enc2",)),
        _conv_step(rng, p + "bottleneck", p + "down2", 24, 32),
        Step(p + "up1", "up", (p + "bottleneck",)),
        _conv_step(rng, p + "dec1", p + "up1", 32, 24),
        Step(p + "up2", "up", (p + "dec1",)),
        _conv_step(rng, p + "dec2", p + "up2", 24, 12),
        _conv_step(rng, head_name, p + "dec2", 12, 1),
    ]


def build(arch: str, input_mode: str, seed: int = 0) -> Model:
    """Freshly initialized model (He fan-in weights, zero biases)."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if input_mode not in INPUT_MODES:
        raise ConfigError(f"unknown input_mode {input_mode!r}; "
                          f"expected one of {INPUT_MODES}")
    rng = np.random.default_rng([seed, _ARCH_IDS[arch], _MODE_IDS[input_mode]])
    in_c = IN_CHANNELS[input_mode]

    if arch == "plain_cnn":
        widths = [in_c, 16, 16, 16, 16, 1]
        steps = []
        src = "input"
        for i in range(5):
            name = f"block{i + 1}"
            steps.append(_conv_step(rng, name, src, widths[i], widths[i + 1]))
            src = name
    elif arch == "encdec":
        steps = _encdec_steps(rng, in_c)
    else:  # coarse_fine: coarse encoder-decoder + 2-conv refiner over
        # (coarse output ++ raw input)
        steps = _encdec_steps(rng, in_c, head_name="coarse_head")
        steps.append(Step("cat", "concat", ("coarse_head", "input")))
        steps.append(_conv_step(rng, "ref1", "cat", 1 + in_c, 12))
        steps.append(_conv_step(rng, "ref2", "ref1", 12, 1))
    return Model(steps, arch=arch, input_mode=input_mode)


def assemble_input(scene: Scene, sparse: SparseDepth | None,
                   input_mode: str) -> np.ndarray:
    """Network input channels for a scene: rgb, (values, mask), or both."""
    if input_mode == "rgb":
        return scene.rgb.data
    if sparse is None:
        raise ConfigError(f"input_mode {input_mode!r} needs sparse depth")
    sd = np.concatenate([sparse.values.data, sparse.mask.data], axis=0)
    if input_mode == "sd":
        return sd
    return np.concatenate([scene.rgb.data, sd], axis=0)


# --- training ----------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-2
    loss_kind: str = "l1"
    seed: int = 0
    n_sparse: int | None = None   # sparse input points per scene; None = 1% of pixels

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size and lr positive")
        if self.n_sparse is not None and self.n_sparse <= 0:
            raise ConfigError("n_sparse must be positive when set")


@dataclass
class TrainResult:
    model: Model
    curve: list[float] = field(default_factory=list)   # per-epoch mean loss
    status: str = "converged"
    epochs_run: int = 0


def _training_input(scene: Scene, idx: int, epoch: int, cfg: TrainConfig,
                    input_mode: str, n_sparse: int) -> np.ndarray:
    if input_mode == "rgb":
        return assemble_input(scene, None, input_mode)
    sparse = sample_uniform(scene.depth, n_sparse,
                            seed=np.random.SeedSequence(
                                [cfg.seed, epoch, idx]).generate_state(1)[0])
    return assemble_input(scene, sparse, input_mode)


def train(model: Model, scenes: list[Scene], cfg: TrainConfig) -> TrainResult:
    """Plain SGD on the dense-ground-truth objective; deterministic per seed."""
    cfg.validate()
    if not scenes:
        raise ConfigError("need at least one training scene")
    h, w = scenes[0].depth.data.shape[1:]
    n_sparse = cfg.n_sparse if cfg.n_sparse is not None else max(1, round(0.01 * h * w))
    order_rng = np.random.default_rng([cfg.seed, 0xdada])
    params = model.parameters()
    result = TrainResult(model=model)
    snapshot = [p.data.copy() for p in params]

    dense_masks = np.ones((1, h, w))
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(scenes))
        total = 0.0
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                losses = []
                for idx in batch:
                    scene = scenes[idx]
                    x = _training_input(scene, int(idx), epoch, cfg,
                                        model.input_mode, n_sparse)
                    _, out = model.forward_nodes(x, trainable=True)
                    losses.append(ad.sparse_loss(
                        out, (scene.depth.data, dense_masks), kind=cfg.loss_kind))
                loss_node = losses[0]
                for extra in losses[1:]:
                    loss_node = ad.add(loss_node, extra)
                loss_node = ad.scale(loss_node, 1.0 / len(losses))
                ad.backward(loss_node)
                for p in params:
                    p.data -= cfg.lr * p.grad
                total += float(loss_node.out) * len(batch)
        except NumericError:
            for p, snap in zip(params, snapshot):
                p.data = snap.copy()
            result.status = "diverged"
            return result
        result.curve.append(total / len(order))
        result.epochs_run = epoch + 1
        snapshot = [p.data.copy() for p in params]
    return result


# --- checkpoint serialization -------------------------------------------


def write_checkpoint(model: Model, path) -> None:
    """Versioned binary checkpoint: magic, enums, shape header, f64 payload,
    trailing CRC32 over all preceding bytes."""
    if model.arch not in _ARCH_IDS:
        raise ConfigError(f"cannot checkpoint custom arch {model.arch!r}")
    params = model.parameters()
    head = bytearray()
    head += CHECKPOINT_MAGIC
    head += struct.pack("<I", CHECKPOINT_VERSION)
    head += struct.pack("<I", _ARCH_IDS[model.arch])
    head += struct.pack("<I", _MODE_IDS[model.input_mode])
    head += struct.pack("<I", len(params))
    for p in params:
        head += struct.pack("<I", p.data.ndim)
        head += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
    payload = b"".join(p.data.astype("<f8").tobytes() for p in params)
    crc = zlib.crc32(bytes(head) + payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(bytes(head) + payload + struct.pack("<I", crc))


def read_checkpoint(path) -> Model:
    """Load and CRC-verify a checkpoint; rebuilds the architecture."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24 or blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"checkpoint corrupt: bad magic in {path}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ConfigError(f"checkpoint corrupt: CRC mismatch in {path}")
    pos = 4
    version, arch_id, mode_id, n_tensors = struct.unpack_from("<4I", blob, pos)
    pos += 16
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    archs = {v: k for k, v in _ARCH_IDS.items()}
    modes = {v: k for k, v in _MODE_IDS.items()}
    if arch_id not in archs or mode_id not in modes:
        raise ConfigError("checkpoint corrupt: unknown architecture or mode id")
    shapes = []
    for _ in range(n_tensors):
        ndim = struct.unpack_from("<I", blob, pos)[0]
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        shapes.append(tuple(dims))

    model = build(archs[arch_id], modes[mode_id])
    params = model.parameters()
    if len(params) != n_tensors:
        raise ConfigError("checkpoint corrupt: parameter count mismatch")
    for p, shape in zip(params, shapes):
        if p.data.shape != shape:
            raise ConfigError(
                f"checkpoint corrupt: shape {shape} does not match model "
                f"parameter {p.data.shape}")
        count = int(np.prod(shape))
        p.data = np.frombuffer(blob, dtype="<f8", count=count,
                               offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return model
