"""Dense tensors with reverse-mode automatic differentiation.

Sized for desk-scale CNNs on CPU: inputs up to 256x256, a few dozen
channels. Values are numpy arrays; the graph is a DAG of closures built
eagerly during the forward pass. Training runs in float32 by default,
gradient checking in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"LUSK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if a.dtype == np.float64 or a.dtype == np.float32:
        return a
    return a.astype(np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array plus an optional gradient and autodiff linkage.

    Tensors are treated as immutable once built; only the optimizer
    mutates parameter data in place between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    # -- graph construction helpers -------------------------------------------

    @staticmethod
    def _lift(value, like: "Tensor") -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=like.dtype))

    def _make(self, data, parents, backward):
        req = any(p.requires_grad or p._parents for p in parents)
        return Tensor(data, requires_grad=False, parents=parents if req else (),
                      backward=backward if req else None)

    def _accumulate(self, g: np.ndarray):
        if self.requires_grad or self._parents:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            self.grad += g

    # -- elementwise arithmetic ----------------------------------------------

    def _binary(self, other, op_name, fwd, bwd_a, bwd_b):
        other = Tensor._lift(other, self)
        try:
            out_data = fwd(self.data, other.data)
        except ValueError:
            raise ShapeError(op_name, self.shape, other.shape)
        out = self._make(out_data, (self, other), None)

        def backward(g):
            self._accumulate(_unbroadcast(bwd_a(g, self.data, other.data), self.shape))
            other._accumulate(_unbroadcast(bwd_b(g, self.data, other.data), other.shape))

        out._backward = backward if out._parents else None
        return out

    def __add__(self, other):
        return self._binary(other, "add", np.add,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return Tensor._lift(other, self) - self

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, "div", np.divide,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return Tensor._lift(other, self) / self

    def __neg__(self):
        return self * -1.0

    def __pow__(self, exponent: float):
        p = float(exponent)
        out = self._make(self.data ** p, (self,), None)

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        out._backward = backward if out._parents else None
        return out

    def sqrt(self):
        return self ** 0.5

    # -- unary nonlinearities ------------------------------------------------

    def exp(self):
        e = np.exp(self.data)
        out = self._make(e, (self,), None)
        out._backward = (lambda g: self._accumulate(g * e)) if out._parents else None
        return out

    def relu(self):
        out = self._make(np.maximum(self.data, 0.0), (self,), None)
        mask = self.data > 0
        out._backward = (lambda g: self._accumulate(g * mask)) if out._parents else None
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = self._make(s, (self,), None)
        out._backward = (lambda g: self._accumulate(g * s * (1.0 - s))) if out._parents else None
        return out

    def clamp(self, lo: float, hi: float):
        out = self._make(np.clip(self.data, lo, hi), (self,), None)
        mask = (self.data >= lo) & (self.data <= hi)
        out._backward = (lambda g: self._accumulate(g * mask)) if out._parents else None
        return out

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape).copy())

        out._backward = backward if out._parents else None
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims=False):
        m = self.data.max(axis=axis, keepdims=keepdims)
        out = self._make(m, (self,), None)

        def backward(g):
            mk = self.data.max(axis=axis, keepdims=True)
            mask = self.data == mk
            count = mask.sum(axis=axis, keepdims=True)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape) * mask / count)

        out._backward = backward if out._parents else None
        return out

    # -- shape manipulation -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self._make(self.data.reshape(shape), (self,), None)
        out._backward = (lambda g: self._accumulate(g.reshape(old))) if out._parents else None
        return out

    def transpose2d(self):
        if self.ndim != 2:
            raise ShapeError("transpose2d", self.shape)
        out = self._make(self.data.T.copy(), (self,), None)
        out._backward = (lambda g: self._accumulate(g.T)) if out._parents else None
        return out

    # -- matrix multiply ---------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = Tensor._lift(other, self)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError("matmul", self.shape, other.shape)
        out = self._make(self.data @ other.data, (self, other), None)

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        out._backward = backward if out._parents else None
        return out

    __matmul__ = matmul

    # -- backward pass -------------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar loss.

        Gradients of all reachable tensors are overwritten, not
        accumulated across calls.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def stop_gradient(t: Tensor) -> Tensor:
    """Pass values through unchanged and block backpropagation."""
    return Tensor(t.data, requires_grad=False)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad or t._parents for t in tensors)
    out = Tensor(out_data, parents=tuple(tensors) if req else ())
    if req:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

        out._backward = backward
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a - b
    return (d * d).mean()


# -- convolution and friends -----------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (w + 2 * pad - kw) // stride + 1
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = v.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, hp * wp)
    return np.ascontiguousarray(cols), hp, wp


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, hp, wp):
    n, c, h, w = x_shape
    g6 = cols.reshape(n, c, kh, kw, hp, wp)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * hp:stride, j:j + stride * wp:stride] += g6[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, hp, wp = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(o, -1)
    out_data = np.matmul(wmat, cols).reshape(n, o, hp, wp)
    parents = [x, w]
    if b is not None:
        if b.shape != (o,):
            raise ShapeError("conv2d bias", b.shape, (o,))
        out_data = out_data + b.data.reshape(1, o, 1, 1)
        parents.append(b)
    req = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(out_data, parents=tuple(parents) if req else ())
    if req:
        def backward(g):
            go = g.reshape(n, o, hp * wp)
            w._accumulate(np.einsum("nol,nkl->ok", go, cols).reshape(w.shape))
            gcols = np.matmul(wmat.T, go)
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding, hp, wp))
            if b is not None:
                b._accumulate(g.sum(axis=(0, 2, 3)))

        out._backward = backward
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape)
    n, c, h, w = x.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(out_data, parents=(x,) if (x.requires_grad or x._parents) else ())
    if out._parents:
        out._backward = lambda g: x._accumulate(
            g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return out


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the spatial dimensions of an NCHW map, per channel."""
    if x.ndim != 4:
        raise ShapeError("spatial_softmax", x.shape)
    m = x.data.max(axis=(2, 3), keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=(2, 3), keepdims=True)
    out = Tensor(p, parents=(x,) if (x.requires_grad or x._parents) else ())
    if out._parents:
        def backward(g):
            dot = (g * p).sum(axis=(2, 3), keepdims=True)
            x._accumulate(p * (g - dot))

        out._backward = backward
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization to zero mean and unit variance."""
    if x.ndim != 4:
        raise ShapeError("instance_norm", x.shape)
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    return xc / (var + eps).sqrt()


# -- Adam optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step count."""

    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        st = self.state
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam_step[{name}]", g.shape, p.data.shape)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter '{name}'")
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + st.epsilon)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    checked: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.1e}, {self.checked} entries)")


def gradcheck(fn, shapes=None, tolerance: float = 1e-4, eps: float = 1e-5,
              seed: int = 0, max_entries: int = 40, inputs=None) -> GradcheckReport:
    """Compare analytic gradients of a scalar-valued fn against central
    differences, at seeded random float64 inputs (or explicit `inputs`).

    Relative error is measured against the largest gradient magnitude of
    each input, so uniformly tiny gradients do not produce spurious
    failures. Failures are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [Tensor(rng.standard_normal(s).astype(np.float64), requires_grad=True)
                  for s in shapes]
    else:
        inputs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    shapes = [t.shape for t in inputs]
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros(s) if t.grad is None else t.grad.copy()
                for s, t in zip(shapes, inputs)]

    def eval_loss():
        return fn(*[Tensor(t.data) for t in inputs]).item()

    max_rel = 0.0
    checked = 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n_entries = flat.size
        idx = np.arange(n_entries)
        if n_entries > max_entries:
            idx = rng.choice(n_entries, size=max_entries, replace=False)
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_loss()
            flat[i] = orig - eps
            f_minus = eval_loss()
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2.0 * eps)
        a_sel = a.reshape(-1)[idx]
        scale = max(np.abs(a_sel).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        rel = np.abs(a_sel - numeric) / scale
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
        checked += len(idx)
    return GradcheckReport(max_rel_err=max_rel, tolerance=tolerance,
                           passed=max_rel < tolerance, checked=checked)


# -- checkpoint records ------------------------------------------------------------


def save_tensors(path, tensors: dict[str, np.ndarray]):
    """Write named arrays as LUSK records: magic, version, then per record
    name length/bytes, rank and dims as u64, float32 little-endian values."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.astype(np.float32)
    return out
