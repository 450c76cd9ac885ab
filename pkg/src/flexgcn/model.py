"""Full lifting network: input conv, four residual blocks, GRN, output conv.

The network maps an N x 2 matrix of normalized 2D joint positions to an
N x 3 matrix of 3D positions. Topology: one graph convolution with GELU,
then four residual blocks of three graph convolutions each (LayerNorm after
the first two, GELU after the third, identity skip around the stack),
global response normalization, and a linear graph convolution head. All
layers share one propagation operator (and one modulation matrix Q) unless
per-layer modulation is requested.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .graph import PropagationOperator, SkeletonGraph, h36m_skeleton
from .layers import FlexGConvLayer, GRNLayer, LayerNormLayer, dropout
from .numerics import DomainError, Matrix, ShapeError, Tape


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the model topology."""


@dataclass
class ModelConfig:
    """Everything needed to rebuild the network deterministically."""

    skeleton: dict
    hidden: int = 384
    in_features: int = 2
    out_features: int = 3
    n_blocks: int = 4
    s: float = 0.2
    dropout: float = 0.2
    irc: bool = True
    modulation: bool = True
    symmetrize: bool = True
    residual_source: str = "input"
    per_layer_q: bool = False
    q_init_scale: float = 0.01
    # model output units per millimeter; predictions are divided by this
    # to land back in millimeters
    target_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.s <= 1.0):
            raise DomainError(f"s must lie in [0, 1], got {self.s}")
        if not (0.0 <= self.dropout < 1.0):
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.hidden < 1 or self.n_blocks < 0:
            raise DomainError("hidden width and block count must be positive")
        if self.residual_source not in ("input", "embedding"):
            raise DomainError(f"residual_source must be 'input' or 'embedding', got {self.residual_source!r}")
        if self.target_scale <= 0:
            raise DomainError("target_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise DomainError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


def config_hash(config: ModelConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class _Block:
    convs: list[FlexGConvLayer]
    norms: list[LayerNormLayer]


class FlexGCNModel:
    """Residual graph-convolution network for 2D-to-3D pose lifting."""

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.graph = SkeletonGraph.from_dict(config.skeleton)
        self.n_joints = self.graph.n_joints
        rng = np.random.default_rng(config.seed)

        res_features = (
            config.in_features if config.residual_source == "input" else config.hidden
        )
        self._operators: list[PropagationOperator] = []

        def new_operator() -> PropagationOperator:
            op = PropagationOperator.from_graph(
                self.graph,
                config.s,
                modulation_enabled=config.modulation,
                symmetrize_enabled=config.symmetrize,
                q_init_scale=config.q_init_scale,
                rng=rng,
            )
            self._operators.append(op)
            return op

        shared_op = None if config.per_layer_q else new_operator()

        def op_for_layer() -> PropagationOperator:
            return shared_op if shared_op is not None else new_operator()

        def conv(fin: int, fout: int) -> FlexGConvLayer:
            return FlexGConvLayer(
                fin,
                fout,
                op_for_layer(),
                residual_features=config.in_features,  # input layer residual is X itself
                irc_enabled=config.irc,
                rng=rng,
            )

        f = config.hidden
        self.input_layer = conv(config.in_features, f)
        self.blocks: list[_Block] = []
        for _ in range(config.n_blocks):
            convs = []
            for _ in range(3):
                layer = FlexGConvLayer(
                    f, f, op_for_layer(),
                    residual_features=res_features,
                    irc_enabled=config.irc,
                    rng=rng,
                )
                convs.append(layer)
            norms = [LayerNormLayer(f), LayerNormLayer(f)]
            self.blocks.append(_Block(convs, norms))
        self.grn = GRNLayer(f)
        self.output_layer = FlexGConvLayer(
            f, config.out_features, op_for_layer(),
            residual_features=res_features,
            irc_enabled=config.irc,
            rng=rng,
        )

        self._slots: list[tuple[str, object, str]] = []
        self._register()

    # -- parameter registry --------------------------------------------------
    def _register(self) -> None:
        def add_layer(prefix: str, layer) -> None:
            for display, attr in layer.parameters():
                self._slots.append((f"{prefix}.{display}", layer, attr))

        add_layer("input", self.input_layer)
        for b, block in enumerate(self.blocks):
            for c, conv_layer in enumerate(block.convs):
                add_layer(f"blocks.{b}.conv{c}", conv_layer)
            for c, norm in enumerate(block.norms):
                add_layer(f"blocks.{b}.ln{c}", norm)
        add_layer("grn", self.grn)
        add_layer("output", self.output_layer)
        if self.config.modulation:
            if self.config.per_layer_q:
                for i, op in enumerate(self._operators):
                    self._slots.append((f"prop.{i}.q", op, "q"))
            else:
                self._slots.append(("prop.q", self._operators[0], "q"))

    def parameters(self) -> dict[str, Matrix]:
        """Flat, ordered name -> matrix view of every learnable tensor."""
        return {name: getattr(obj, attr) for name, obj, attr in self._slots}

    def set_parameters(self, values: dict[str, np.ndarray | Matrix]) -> None:
        current = {name: (obj, attr) for name, obj, attr in self._slots}
        for name, value in values.items():
            if name not in current:
                raise DomainError(f"unknown parameter {name!r}")
            obj, attr = current[name]
            m = value if isinstance(value, Matrix) else Matrix(value)
            if m.shape != getattr(obj, attr).shape:
                raise ShapeError(
                    f"parameter {name!r}: shape {m.shape} != {getattr(obj, attr).shape}"
                )
            setattr(obj, attr, m)

    def parameter_census(self) -> tuple[list[tuple[str, tuple[int, int], int]], int]:
        """Deterministic (name, shape, count) listing and the grand total."""
        rows = []
        total = 0
        for name, m in self.parameters().items():
            count = m.rows * m.cols
            rows.append((name, m.shape, count))
            total += count
        return rows, total

    # -- forward / backward ----------------------------------------------------
    def forward(
        self,
        x: Matrix,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> Matrix:
        cfg = self.config
        if x.shape != (self.n_joints, cfg.in_features):
            raise ShapeError(
                f"input must be {self.n_joints}x{cfg.in_features}, got {x.shape}"
            )
        if mode not in ("train", "eval"):
            raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train" and cfg.dropout > 0.0 and rng is None:
            raise DomainError("train-mode forward with dropout needs an rng")

        # one effective adjacency per operator per pass, shared on the tape
        a_eff: dict[int, Matrix] = {}

        def adj(layer: FlexGConvLayer) -> Matrix:
            key = id(layer.op)
            if key not in a_eff:
                a_eff[key] = layer.op.effective_adjacency()
            return a_eff[key]

        def drop(m: Matrix) -> Matrix:
            return dropout(m, cfg.dropout, mode=mode, rng=rng)

        h = self.input_layer.forward(x, x, activation="gelu", a_eff=adj(self.input_layer))
        x0 = x if cfg.residual_source == "input" else h
        h = drop(h)
        for block in self.blocks:
            skip = h
            h = block.norms[0].forward(block.convs[0].forward(h, x0, "none", adj(block.convs[0])))
            h = drop(h)
            h = block.norms[1].forward(block.convs[1].forward(h, x0, "none", adj(block.convs[1])))
            h = drop(h)
            h = block.convs[2].forward(h, x0, "gelu", adj(block.convs[2]))
            h = drop(h)
            h = nm.add(skip, h)
        h = self.grn.forward(h)
        return self.output_layer.forward(h, x0, "none", adj(self.output_layer))

    def predict_mm(self, x: Matrix) -> np.ndarray:
        """Eval-mode 3D prediction converted back to millimeters."""
        return self.forward(x, mode="eval").to_numpy() / self.config.target_scale

    def backward_step(
        self,
        x: Matrix,
        y: Matrix,
        alpha: float = 0.03,
        mode: str = "train",
        rng: np.random.Generator | None = None,
        return_prediction: bool = False,
    ):
        """Loss and gradients for one sample.

        ``y`` must already be in model output units (see target_scale).
        Returns (loss, grads) keyed like parameters(), plus the prediction
        matrix when requested.
        """
        from .training import pose_loss  # local import to avoid a module cycle

        params = self.parameters()
        with Tape() as tape:
            for m in params.values():
                tape.watch(m)
            y_hat = self.forward(x, mode=mode, rng=rng)
            loss = pose_loss(y, y_hat, alpha)
            grads = tape.backward(loss)
        grad_arrays = {name: grads[m].to_numpy() for name, m in params.items()}
        if return_prediction:
            return loss.item(), grad_arrays, y_hat
        return loss.item(), grad_arrays


def backward_step(model: FlexGCNModel, x: Matrix, y: Matrix, alpha: float = 0.03,
                  mode: str = "train", rng: np.random.Generator | None = None):
    return model.backward_step(x, y, alpha=alpha, mode=mode, rng=rng)


def parameter_census(model: FlexGCNModel):
    return model.parameter_census()


def build_model(
    graph: SkeletonGraph | None = None,
    **overrides,
) -> FlexGCNModel:
    """Convenience constructor; defaults to the bundled 17-joint skeleton."""
    g = graph if graph is not None else h36m_skeleton()
    return FlexGCNModel(ModelConfig(skeleton=g.to_dict(), **overrides))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: FlexGCNModel, path: str | Path, extra: dict | None = None) -> None:
    """Versioned JSON container of config + parameters.

    Floats are serialized via repr, so a load/save round trip is bit-exact.
    """
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "params": {
            name: {"shape": list(m.shape), "data": m.to_numpy().tolist()}
            for name, m in model.parameters().items()
        },
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> FlexGCNModel:
    """Rebuild a model from a checkpoint, rejecting mismatched topology."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a valid checkpoint file: {exc}") from None
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    config = ModelConfig.from_dict(payload["config"])
    if config_hash(config) != payload.get("config_hash"):
        raise CheckpointError("config hash mismatch; checkpoint corrupted or edited")
    model = FlexGCNModel(config)
    expected = model.parameters()
    stored = payload["params"]
    if set(stored) != set(expected):
        raise CheckpointError(
            f"parameter names do not match topology: "
            f"missing={sorted(set(expected) - set(stored))}, "
            f"unexpected={sorted(set(stored) - set(expected))}"
        )
    values = {}
    for name, entry in stored.items():
        arr = np.array(entry["data"], dtype=np.float64)
        if list(arr.shape) != entry["shape"] or arr.shape != expected[name].shape:
            raise CheckpointError(
                f"parameter {name!r} shape {arr.shape} does not match topology "
                f"{expected[name].shape}"
            )
        values[name] = arr
    model.set_parameters(values)
    return model
