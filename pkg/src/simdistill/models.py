"""MLP feature extractors playing the student and teacher roles.

A backbone is a stack of affine+ReLU layers followed by a linear embedding
head; during supervised pre-training an extra classifier head over source
identities is attached. Widths scale with ``width_scale`` so one
architecture family covers the capacity sweep.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError, SpecError
from .tensor import Tensor2D

CHECKPOINT_FORMAT = "simdistill-checkpoint v1"


class BackboneModel:
    def __init__(
        self,
        input_dim: int,
        hidden_dims,
        embed_dim: int,
        num_classes: int | None = None,
        seed: int = 0,
        role: str = "student",
        width_scale: float = 1.0,
    ):
        if input_dim < 1 or embed_dim < 1:
            raise SpecError("input_dim and embed_dim must be positive")
        hidden_dims = [max(1, int(round(h * width_scale))) for h in hidden_dims]
        self.input_dim = input_dim
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.role = role
        self.width_scale = width_scale
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[Tensor2D, Tensor2D]] = []
        fan_in = input_dim
        for width in hidden_dims:
            self.layers.append(self._init_affine(rng, fan_in, width))
            fan_in = width
        self.embed_head = self._init_affine(rng, fan_in, embed_dim)
        self.classifier: tuple[Tensor2D, Tensor2D] | None = None
        if num_classes is not None:
            self.attach_classifier(num_classes, rng)

    @staticmethod
    def _init_affine(rng, fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        weight = Tensor2D(w, requires_grad=True)
        bias = Tensor2D(np.zeros((1, fan_out)), requires_grad=True)
        return weight, bias

    # -- heads --------------------------------------------------------------------
    def attach_classifier(self, num_classes: int, rng=None) -> None:
        if rng is None:
            rng = np.random.default_rng(0)
        self.classifier = self._init_affine(rng, self.embed_dim, num_classes)

    def drop_classifier(self) -> None:
        self.classifier = None

    # -- forward --------------------------------------------------------------------
    def embed(self, inputs) -> Tensor2D:
        """Raw (unnormalized) embeddings for a batch of inputs."""
        x = inputs if isinstance(inputs, Tensor2D) else Tensor2D(inputs)
        if x.cols != self.input_dim:
            raise ShapeMismatchError(
                f"model expects input_dim {self.input_dim}, got {x.cols}"
            )
        for weight, bias in self.layers:
            x = T.relu(T.dense_affine(x, weight, bias))
        weight, bias = self.embed_head
        return T.dense_affine(x, weight, bias)

    def logits(self, embedding: Tensor2D) -> Tensor2D:
        if self.classifier is None:
            raise ContractError("classifier head is not attached")
        weight, bias = self.classifier
        return T.dense_affine(embedding, weight, bias)

    # -- parameters --------------------------------------------------------------------
    def parameters(self, include_classifier: bool = True) -> list[Tensor2D]:
        params = []
        for weight, bias in self.layers:
            params.extend((weight, bias))
        params.extend(self.embed_head)
        if include_classifier and self.classifier is not None:
            params.extend(self.classifier)
        return params

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def grad_abs_sum(self) -> float:
        total = 0.0
        for p in self.parameters():
            if p.grad is not None:
                total += float(np.abs(p.grad).sum())
        return total

    def clone(self) -> "BackboneModel":
        other = BackboneModel.__new__(BackboneModel)
        other.input_dim = self.input_dim
        other.hidden_dims = list(self.hidden_dims)
        other.embed_dim = self.embed_dim
        other.role = self.role
        other.width_scale = self.width_scale
        other.layers = [(w.copy(), b.copy()) for w, b in self.layers]
        other.embed_head = (self.embed_head[0].copy(), self.embed_head[1].copy())
        other.classifier = (
            None
            if self.classifier is None
            else (self.classifier[0].copy(), self.classifier[1].copy())
        )
        return other

    def copy_parameters_from(self, other: "BackboneModel") -> None:
        mine, theirs = self.parameters(), other.parameters()
        if len(mine) != len(theirs):
            raise ShapeMismatchError("parameter lists differ in length")
        for p, q in zip(mine, theirs):
            if p.shape != q.shape:
                raise ShapeMismatchError(f"parameter shapes differ: {p.shape} vs {q.shape}")
            p.values[...] = q.values


class SGD:
    """Plain gradient descent; momentum is available but defaults off so
    gradient checks and determinism stay exact."""

    def __init__(self, params, momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.values) for p in self.params] if momentum else None

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if self._velocity is not None:
                self._velocity[i] = self.momentum * self._velocity[i] + p.grad
                p.values -= lr * self._velocity[i]
            else:
                p.values -= lr * p.grad


# -- checkpoints ----------------------------------------------------------------------


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(text: str, shape) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(text), dtype="<f8")
    return flat.reshape(shape).copy()


def model_state(model: BackboneModel, extra: dict | None = None) -> dict:
    """JSON-able checkpoint: format tag, shapes, base64 float64 parameters,
    plus caller-provided counters / rng state."""
    state = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": model.input_dim,
        "hidden_dims": model.hidden_dims,
        "embed_dim": model.embed_dim,
        "role": model.role,
        "width_scale": model.width_scale,
        "num_classes": None if model.classifier is None else model.classifier[0].cols,
        "params": [
            {"shape": list(p.shape), "data": _encode(p.values)} for p in model.parameters()
        ],
        "extra": extra or {},
    }
    return state


def model_from_state(state: dict) -> BackboneModel:
    if state.get("format") != CHECKPOINT_FORMAT:
        raise SpecError(f"unsupported checkpoint format: {state.get('format')!r}")
    model = BackboneModel(
        state["input_dim"],
        state["hidden_dims"],
        state["embed_dim"],
        num_classes=state["num_classes"],
        role=state["role"],
        width_scale=1.0,
    )
    # hidden_dims in the state are already scaled; keep the recorded scale
    model.width_scale = state["width_scale"]
    params = model.parameters()
    if len(params) != len(state["params"]):
        raise SpecError("checkpoint parameter count mismatch")
    for p, entry in zip(params, state["params"]):
        if list(p.shape) != entry["shape"]:
            raise SpecError(f"checkpoint shape mismatch: {entry['shape']} vs {list(p.shape)}")
        p.values[...] = _decode(entry["data"], entry["shape"])
    return model


def save_model(model: BackboneModel, path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(model_state(model, extra), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> BackboneModel:
    with open(path) as fh:
        return model_from_state(json.load(fh))
