"""Dense 2-D tensors with tape-based reverse-mode differentiation.

The engine covers exactly the primitives the losses and backbones need.
Numerical work is delegated to the selected kernel backend; this module owns
shape checking, the tape, and gradient bookkeeping.

Recording model: while a :class:`Tape` is active (``with Tape() as tape:``),
every primitive appends one entry. Without an active tape the same functions
compute forward values only, which is how frozen teachers and evaluation run.
"""

from __future__ import annotations

import numpy as np

from .backend import kernels as _K
from .errors import ShapeMismatchError, TapeError


class Tensor2D:
    """A rows x cols float64 matrix with an optional gradient buffer.

    Entries must stay finite; NaN/Inf on construction is a contract
    violation and raises immediately.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatchError(
                f"Tensor2D needs a non-empty 2-D array, got shape {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise ValueError("Tensor2D entries must be finite")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    # -- shape ---------------------------------------------------------------
    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeMismatchError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def copy(self) -> "Tensor2D":
        out = Tensor2D(self.values, requires_grad=self.requires_grad)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor2D({self.rows}x{self.cols}{flag})"


def _wrap(out_values) -> Tensor2D:
    out = Tensor2D.__new__(Tensor2D)
    out.values = np.ascontiguousarray(out_values, dtype=np.float64)
    out.grad = None
    out.requires_grad = False
    return out


def scalar(value: float) -> Tensor2D:
    return Tensor2D([[float(value)]])


# -- tape ---------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None


class _Entry:
    """One recorded primitive application."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications, replayable in reverse.

    Entries are appended in execution order, so every operand precedes its
    result; the reverse sweep therefore visits each node exactly once. A tape
    is confined to one worker at a time.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _record(self, inputs, output, backward) -> None:
        self.entries.append(_Entry(inputs, output, backward))
        self._produced.add(id(output))

    def _needs_grad(self, t: Tensor2D) -> bool:
        return t.requires_grad or id(t) in self._produced

    def backward(self, loss: Tensor2D) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Grads of all tensors on the tape are reset first, so replaying the
        same tape twice is bit-identical. Tensors not on the tape are left
        untouched (their grads stay zero/None).
        """
        if id(loss) not in self._produced:
            raise TapeError("backward() needs a scalar node recorded on this tape")
        if loss.values.shape != (1, 1):
            raise TapeError(f"loss must be 1x1, got {loss.values.shape}")
        for entry in self.entries:
            for t in entry.inputs:
                if self._needs_grad(t):
                    t.zero_grad()
            entry.output.zero_grad()
        loss.grad[0, 0] = 1.0
        for entry in reversed(self.entries):
            entry.backward(entry.output.grad)


class pause_recording:
    """Context that hides the active tape; ops inside compute values only.

    Used for frozen-teacher forwards inside a recorded training step.
    """

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved


def _emit(inputs, out_values, make_backward) -> Tensor2D:
    out = _wrap(out_values)
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._record(inputs, out, make_backward(tape, out))
    return out


def _acc(t: Tensor2D, g) -> None:
    if t.grad is None:
        t.zero_grad()
    t.grad += g


# -- primitives ----------------------------------------------------------------


def dense_affine(x: Tensor2D, weight: Tensor2D, bias: Tensor2D) -> Tensor2D:
    """x @ weight + bias, bias broadcast per row."""
    if x.cols != weight.rows:
        raise ShapeMismatchError(
            f"affine: input {x.shape} incompatible with weight {weight.shape}"
        )
    if bias.shape != (1, weight.cols):
        raise ShapeMismatchError(
            f"affine: bias {bias.shape} must be (1, {weight.cols})"
        )
    out_values = _K.affine_fwd(x.values, weight.values, bias.values)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, _K.matmul(gout, np.ascontiguousarray(weight.values.T)))
            if tape._needs_grad(weight):
                _acc(weight, _K.matmul(np.ascontiguousarray(x.values.T), gout))
            if tape._needs_grad(bias):
                _acc(bias, gout.sum(axis=0, keepdims=True))

        return bwd

    return _emit((x, weight, bias), out_values, make_backward)


def relu(x: Tensor2D) -> Tensor2D:
    """Elementwise max(0, v); the subgradient at 0 is 0."""
    out_values = _K.relu_fwd(x.values)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, _K.relu_bwd(x.values, gout))

        return bwd

    return _emit((x,), out_values, make_backward)


def l2_normalize_rows(x: Tensor2D, epsilon: float = 1e-12) -> Tensor2D:
    """Divide each row by max(its L2 norm, epsilon)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out_values, norms = _K.rownorm_fwd(x.values, epsilon)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, _K.rownorm_bwd(out.values, norms, epsilon, gout))

        return bwd

    return _emit((x,), out_values, make_backward)


def gram_matrix(feats: Tensor2D) -> Tensor2D:
    """Pairwise inner products of rows: out[j, k] = <row_j, row_k>."""
    out_values = _K.gram_fwd(feats.values)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(feats):
                _acc(feats, _K.gram_bwd(feats.values, gout))

        return bwd

    return _emit((feats,), out_values, make_backward)


def pairwise_sq_distances(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """out[i, j] = ||a_i - b_j||^2, clamped at 0 to absorb rounding."""
    if a.cols != b.cols:
        raise ShapeMismatchError(
            f"pairwise_sq_distances: feature dims differ, {a.shape} vs {b.shape}"
        )
    out_values = _K.pdist2_fwd(a.values, b.values)

    def make_backward(tape, out):
        def bwd(gout):
            need_a = tape._needs_grad(a)
            need_b = tape._needs_grad(b)
            if not (need_a or need_b):
                return
            ga, gb = _K.pdist2_bwd(a.values, b.values, gout)
            if need_a:
                _acc(a, ga)
            if need_b:
                _acc(b, gb)

        return bwd

    return _emit((a, b), out_values, make_backward)


def frobenius_norm_diff(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """sqrt(sum((a - b)^2)) as a 1x1 tensor; gradient at 0 is defined as 0."""
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"frobenius_norm_diff: shapes differ, {a.shape} vs {b.shape}"
        )
    norm = _K.frobdiff_fwd(a.values, b.values)

    def make_backward(tape, out):
        def bwd(gout):
            if norm == 0.0:
                return
            g = (gout[0, 0] / norm) * (a.values - b.values)
            if tape._needs_grad(a):
                _acc(a, g)
            if tape._needs_grad(b):
                _acc(b, -g)

        return bwd

    return _emit((a, b), [[norm]], make_backward)


def softmax_cross_entropy(logits: Tensor2D, labels) -> Tensor2D:
    """Mean of -log softmax(logits)[label], max-subtraction stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.rows:
        raise ShapeMismatchError(
            f"cross entropy: {labels.shape} labels for {logits.rows} rows"
        )
    loss, probs = _K.softmax_ce_fwd(logits.values, labels)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(logits):
                _acc(logits, _K.softmax_ce_bwd(probs, labels, gout[0, 0]))

        return bwd

    return _emit((logits,), [[loss]], make_backward)


def row_extremum(x: Tensor2D, mask, use_max: bool) -> Tensor2D:
    """Per-row max/min over mask-allowed entries, as an (N, 1) tensor.

    Rows whose mask is empty yield 0 and receive no gradient. Ties resolve
    to the lowest column index, so results are deterministic.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if mask.shape != x.values.shape:
        raise ShapeMismatchError(
            f"row_extremum: mask {mask.shape} does not match {x.shape}"
        )
    vals, idx = _K.row_extremum_fwd(x.values, mask, use_max)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                g = np.zeros_like(x.values)
                rows = np.nonzero(idx >= 0)[0]
                g[rows, idx[rows]] = gout[rows, 0]
                _acc(x, g)

        return bwd

    return _emit((x,), vals, make_backward)


# -- elementwise / reductions (numpy on both backends: never the hot path) ----


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(a):
                _acc(a, gout)
            if tape._needs_grad(b):
                _acc(b, gout)

        return bwd

    return _emit((a, b), a.values + b.values, make_backward)


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: shapes differ, {a.shape} vs {b.shape}")

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(a):
                _acc(a, gout)
            if tape._needs_grad(b):
                _acc(b, -gout)

        return bwd

    return _emit((a, b), a.values - b.values, make_backward)


def mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes differ, {a.shape} vs {b.shape}")

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(a):
                _acc(a, gout * b.values)
            if tape._needs_grad(b):
                _acc(b, gout * a.values)

        return bwd

    return _emit((a, b), a.values * b.values, make_backward)


def scale(x: Tensor2D, c: float) -> Tensor2D:
    c = float(c)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, gout * c)

        return bwd

    return _emit((x,), x.values * c, make_backward)


def add_const(x: Tensor2D, c: float) -> Tensor2D:
    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, gout)

        return bwd

    return _emit((x,), x.values + float(c), make_backward)


def exp(x: Tensor2D) -> Tensor2D:
    out_values = np.exp(x.values)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, gout * out.values)

        return bwd

    return _emit((x,), out_values, make_backward)


def sqrt(x: Tensor2D) -> Tensor2D:
    """Elementwise square root on nonnegative input.

    The derivative blows up at 0; entries that are exactly 0 get gradient 0
    instead (they only occur where downstream masks drop the entry anyway).
    """
    if (x.values < 0).any():
        raise ValueError("sqrt: negative entries")
    out_values = np.sqrt(x.values)

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                safe = np.where(out.values > 0.0, out.values, 1.0)
                g = np.where(out.values > 0.0, gout / (2.0 * safe), 0.0)
                _acc(x, g)

        return bwd

    return _emit((x,), out_values, make_backward)


def sum_all(x: Tensor2D) -> Tensor2D:
    total = float(x.values.sum())

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, np.full_like(x.values, gout[0, 0]))

        return bwd

    return _emit((x,), [[total]], make_backward)


def mean_all(x: Tensor2D) -> Tensor2D:
    n = x.values.size
    total = float(x.values.sum()) / n

    def make_backward(tape, out):
        def bwd(gout):
            if tape._needs_grad(x):
                _acc(x, np.full_like(x.values, gout[0, 0] / n))

        return bwd

    return _emit((x,), [[total]], make_backward)


# -- verification ---------------------------------------------------------------


def finite_difference_check(loss_fn, params, step: float = 1e-5) -> float:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the loss from the current ``params`` values on
    every call and return the scalar tensor. Returns the max over parameter
    entries of |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn().item()
            flat[k] = orig - step
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * step)
            a = ga.reshape(-1)[k]
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst
