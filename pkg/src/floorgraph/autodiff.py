"""Dense fp64 matrices with taped reverse-mode differentiation.

Every model in this package operates on matrices no larger than a few
hundred rows, so this core favors exact reproducibility over throughput:
float64 everywhere, one single-threaded tape per forward pass, strictly
deterministic op order. A tape records each primitive as it executes;
``Tape.backward`` replays the record once in reverse.

Also hosts the Adam optimizer and a central-difference gradient checker,
which together form the two independent routes every gradient in the
test suite is verified against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BCE_EPS = 1e-7
# Denominator floor for relative gradient errors. Central differences with
# eps=1e-6 on an O(10) loss carry ~1e-9 of fp64 cancellation noise, so
# gradient pairs below this scale are compared absolutely against the
# floor rather than relatively against each other.
REL_ERR_FLOOR = 1e-4


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rule."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(shapes)
        msg = f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def as_matrix(value) -> np.ndarray:
    """Coerce scalars / 1-d sequences / 2-d arrays to a 2-d float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError("tensor", arr.shape, detail="only rank <= 2 supported")
    return arr


class Tensor:
    """Handle to one value stored on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def data(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError("item", self.data.shape, detail="expected scalar (1, 1)")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.shape})"


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    """b may equal a, or be a (1, m) row for a (n, m), or a (1, 1) scalar."""
    if a == b:
        return True
    if b == (1, 1):
        return True
    return b[0] == 1 and b[1] == a[1]


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient back onto a broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == (1, 1):
        return grad.sum().reshape(1, 1)
    return grad.sum(axis=0, keepdims=True)


class Tape:
    """Ordered record of primitive ops over 2-d float64 values.

    Topological by construction: every op's inputs are created before the
    op itself, so one reverse sweep visits each node exactly once.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._ops: list[tuple] = []  # (kind, out_idx, input_idxs, meta)
        self._grad_leaves: set[int] = set()
        self.last_backward_visits = 0

    # ------------------------------------------------------------------
    # node creation

    def _push(self, value: np.ndarray) -> Tensor:
        self._values.append(value)
        return Tensor(self, len(self._values) - 1)

    def leaf(self, value) -> Tensor:
        """Register a differentiable leaf (a parameter)."""
        t = self._push(as_matrix(value))
        self._grad_leaves.add(t.idx)
        return t

    def const(self, value) -> Tensor:
        """Register a non-differentiable input."""
        return self._push(as_matrix(value))

    def _record(self, kind: str, out: np.ndarray, inputs: tuple, meta: dict | None) -> Tensor:
        t = self._push(out)
        self._ops.append((kind, t.idx, tuple(i.idx for i in inputs), meta))
        return t

    # ------------------------------------------------------------------
    # primitives

    def apply(self, kind: str, *inputs: Tensor, **meta) -> Tensor:
        """Generic dispatcher; every primitive is reachable by name."""
        fn = getattr(self, kind, None)
        if fn is None or kind.startswith("_") or kind in ("apply", "leaf", "const", "backward", "gradients"):
            raise ValueError(f"unknown op kind {kind!r}")
        return fn(*inputs, **meta)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return self._record("matmul", a.data @ b.data, (a, b), None)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError("add", a.shape, b.shape)
        return self._record("add", a.data + b.data, (a, b), None)

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Fused x @ w + b with a (1, m) bias row."""
        if x.shape[1] != w.shape[0]:
            raise ShapeError("affine", x.shape, w.shape)
        if b.shape != (1, w.shape[1]):
            raise ShapeError("affine", w.shape, b.shape, detail="bias must be (1, out)")
        return self._record("affine", x.data @ w.data + b.data, (x, w, b), None)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; b may broadcast as a row or scalar."""
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError("mul", a.shape, b.shape)
        return self._record("mul", a.data * b.data, (a, b), None)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._record("scale", a.data * float(factor), (a,), {"factor": float(factor)})

    def transpose(self, a: Tensor) -> Tensor:
        return self._record("transpose", a.data.T.copy(), (a,), None)

    def reshape(self, a: Tensor, shape: tuple[int, int]) -> Tensor:
        rows, cols = int(shape[0]), int(shape[1])
        if rows * cols != a.data.size:
            raise ShapeError("reshape", a.shape, (rows, cols))
        return self._record("reshape", a.data.reshape(rows, cols).copy(), (a,), None)

    def gather_rows(self, a: Tensor, indices, scatter: str | None = None) -> Tensor:
        """Select rows (with repetition). ``scatter`` may declare the index
        pattern ("repeat" for repeat(arange(n), k), "tile" for
        tile(arange(n), k)) to enable a reshape-based backward."""
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
            raise ShapeError("gather_rows", a.shape, (idx.size,), detail="index out of range")
        meta = {"idx": idx, "scatter": scatter, "n": a.shape[0]}
        return self._record("gather_rows", a.data[idx].copy(), (a,), meta)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not (0 <= start < stop <= a.shape[1]):
            raise ShapeError("slice_cols", a.shape, (start, stop))
        return self._record("slice_cols", a.data[:, start:stop].copy(), (a,), {"start": start, "stop": stop})

    def concat_cols(self, *tensors: Tensor) -> Tensor:
        if len(tensors) < 2:
            raise ShapeError("concat_cols", *(t.shape for t in tensors), detail="needs >= 2 inputs")
        rows = tensors[0].shape[0]
        if any(t.shape[0] != rows for t in tensors):
            raise ShapeError("concat_cols", *(t.shape for t in tensors))
        widths = [t.shape[1] for t in tensors]
        out = np.concatenate([t.data for t in tensors], axis=1)
        return self._record("concat_cols", out, tensors, {"widths": widths})

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._record("sigmoid", out, (a,), None)

    def leaky_relu(self, a: Tensor, leak: float = 0.2) -> Tensor:
        out = np.where(a.data > 0, a.data, leak * a.data)
        return self._record("leaky_relu", out, (a,), {"leak": float(leak)})

    def elu(self, a: Tensor) -> Tensor:
        out = np.where(a.data > 0, a.data, np.expm1(np.minimum(a.data, 0.0)))
        return self._record("elu", out, (a,), None)

    def clamp(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
        if not lo < hi:
            raise ValueError(f"clamp: lo {lo} must be < hi {hi}")
        out = np.clip(a.data, lo, hi)
        return self._record("clamp", out, (a,), {"lo": float(lo), "hi": float(hi)})

    def softmax_rows(self, logits: Tensor, mask) -> Tensor:
        """Row softmax restricted to mask==True entries.

        Masked entries get exactly 0. A fully masked row yields the zero
        row (used for empty neighborhoods). The mask is data, not a node:
        no gradient flows through it.
        """
        m = np.asarray(mask, dtype=bool)
        if m.shape != logits.shape:
            raise ShapeError("softmax_rows", logits.shape, m.shape)
        x = logits.data
        out = np.zeros_like(x)
        live = m.any(axis=1)
        if live.any():
            shifted = np.where(m, x, -np.inf)
            row_max = shifted[live].max(axis=1, keepdims=True)
            e = np.exp(shifted[live] - row_max)
            e[~m[live]] = 0.0
            out[live] = e / e.sum(axis=1, keepdims=True)
        return self._record("softmax_rows", out, (logits,), {"mask": m})

    def sum_all(self, a: Tensor) -> Tensor:
        return self._record("sum_all", a.data.sum().reshape(1, 1), (a,), None)

    def bce_mean(self, pred: Tensor, target, mask) -> Tensor:
        """Mean binary cross-entropy over mask>0 entries.

        Probabilities are clamped to [BCE_EPS, 1-BCE_EPS] as part of the
        forward definition, so the loss and its gradient stay finite for
        saturated predictions.
        """
        y = as_matrix(target)
        w = as_matrix(mask)
        if y.shape != pred.shape or w.shape != pred.shape:
            raise ShapeError("bce_mean", pred.shape, y.shape, w.shape)
        total_w = w.sum()
        if total_w <= 0:
            raise ValueError("bce_mean: empty mask")
        p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
        terms = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
        out = np.array([[(terms * w).sum() / total_w]])
        return self._record("bce_mean", out, (pred,), {"target": y, "weights": w, "total_w": total_w})

    # ------------------------------------------------------------------
    # reverse sweep

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Seed d(loss)/d(loss)=1 and sweep the record once in reverse.

        Returns gradients for every differentiable leaf, including zeros
        for leaves the loss does not depend on.
        """
        if loss.tape is not self:
            raise ValueError("backward: node is detached from this tape")
        if loss.shape != (1, 1):
            raise ShapeError("backward", loss.shape, detail="loss must be scalar (1, 1)")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones((1, 1))}
        visits = 0
        for kind, out_idx, in_idxs, meta in reversed(self._ops):
            visits += 1
            g = grads.pop(out_idx, None)
            if g is None:
                continue
            ins = [self._values[i] for i in in_idxs]
            out_val = self._values[out_idx]
            contribs = self._vjp(kind, g, ins, out_val, meta)
            for idx, contrib in zip(in_idxs, contribs):
                if contrib is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + contrib
                else:
                    grads[idx] = contrib
        self.last_backward_visits = visits
        return {
            idx: grads.get(idx, np.zeros_like(self._values[idx]))
            for idx in self._grad_leaves
        }

    def gradients(self, loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
        by_idx = self.backward(loss)
        return {name: by_idx[t.idx] for name, t in leaves.items()}

    @staticmethod
    def _vjp(kind, g, ins, out_val, meta):
        if kind == "matmul":
            a, b = ins
            return (g @ b.T, a.T @ g)
        if kind == "affine":
            x, w, _ = ins
            return (g @ w.T, x.T @ g, g.sum(axis=0, keepdims=True))
        if kind == "add":
            a, b = ins
            return (g, _reduce_to(g, b.shape))
        if kind == "mul":
            a, b = ins
            return (g * b, _reduce_to(g * a, b.shape))
        if kind == "scale":
            return (g * meta["factor"],)
        if kind == "transpose":
            return (g.T,)
        if kind == "reshape":
            return (g.reshape(ins[0].shape),)
        if kind == "gather_rows":
            n = meta["n"]
            if meta["scatter"] == "repeat" and meta["idx"].size % n == 0:
                k = meta["idx"].size // n
                return (g.reshape(n, k, -1).sum(axis=1),)
            if meta["scatter"] == "tile" and meta["idx"].size % n == 0:
                k = meta["idx"].size // n
                return (g.reshape(k, n, -1).sum(axis=0),)
            da = np.zeros_like(ins[0])
            np.add.at(da, meta["idx"], g)
            return (da,)
        if kind == "slice_cols":
            da = np.zeros_like(ins[0])
            da[:, meta["start"]:meta["stop"]] = g
            return (da,)
        if kind == "concat_cols":
            out, offset = [], 0
            for w in meta["widths"]:
                out.append(g[:, offset:offset + w])
                offset += w
            return tuple(out)
        if kind == "sigmoid":
            return (g * out_val * (1.0 - out_val),)
        if kind == "leaky_relu":
            return (g * np.where(ins[0] > 0, 1.0, meta["leak"]),)
        if kind == "elu":
            return (g * np.where(ins[0] > 0, 1.0, out_val + 1.0),)
        if kind == "clamp":
            inside = (ins[0] > meta["lo"]) & (ins[0] < meta["hi"])
            return (g * inside,)
        if kind == "softmax_rows":
            y = out_val
            dot = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - dot),)
        if kind == "sum_all":
            return (np.full_like(ins[0], g[0, 0]),)
        if kind == "bce_mean":
            p = np.clip(ins[0], BCE_EPS, 1.0 - BCE_EPS)
            inside = (ins[0] > BCE_EPS) & (ins[0] < 1.0 - BCE_EPS)
            dp = (p - meta["target"]) / (p * (1.0 - p))
            return (g[0, 0] * dp * meta["weights"] * inside / meta["total_w"],)
        raise ValueError(f"unknown op kind {kind!r}")


# ----------------------------------------------------------------------
# gradient verification

def grad_check_report(f, params: dict[str, np.ndarray], epsilon: float = 1e-6) -> dict[str, float]:
    """Per-parameter max relative error of taped vs central-difference grads.

    ``f(tape, leaves)`` must deterministically build a scalar loss from the
    given leaf tensors. Each parameter entry is perturbed by +-epsilon and
    the loss re-evaluated on a fresh tape. The relative error uses a
    denominator floor of REL_ERR_FLOOR so that near-zero gradient pairs
    compare absolutely; identical zeros give error 0.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError(f"grad_check: epsilon {epsilon} outside (0, 1e-3]")
    params = {k: as_matrix(v) for k, v in params.items()}

    def run(p: dict[str, np.ndarray]):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in p.items()}
        out = f(tape, leaves)
        if out.shape != (1, 1):
            raise ShapeError("grad_check", out.shape, detail="f must return a scalar")
        return tape, leaves, out

    tape, leaves, out = run(params)
    analytic = tape.gradients(out, leaves)

    report: dict[str, float] = {}
    for name, base in params.items():
        flat = base.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = run(params)[2].item()
            flat[j] = orig - epsilon
            f_minus = run(params)[2].item()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            an = analytic[name].reshape(-1)[j]
            denom = max(abs(an), abs(fd), REL_ERR_FLOOR)
            worst = max(worst, 0.0 if an == fd else abs(an - fd) / denom)
        report[name] = worst
    return report


def grad_check(f, params: dict[str, np.ndarray], epsilon: float = 1e-6) -> float:
    """Max relative error over all parameters; see grad_check_report."""
    report = grad_check_report(f, params, epsilon=epsilon)
    return max(report.values()) if report else 0.0


# ----------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Standard bias-corrected Adam update, in place."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
