"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record operations on a tape; calling
``backward`` on a scalar loss populates ``grad`` on every tensor with
``requires_grad`` that lies on the path from the loss to the leaves.
Only the primitives needed by the VAE models are provided: 2D
convolution and its transpose, fully connected layers, relu/sigmoid,
MSE / cross-entropy / diagonal-Gaussian-KL losses and the
reparameterization step. No broadcasting beyond bias addition.

Training runs in float32; gradient checking should use float64
(``grad_check`` enforces this).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np


class Tensor:
    """N-dimensional array node on a reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- minimal operator surface ---------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    def __rmul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g, dtype=a.dtype))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid. relu subgradient at 0 is 0."""
    if kind == "relu":
        out_data = np.maximum(a.data, 0)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (a.data > 0))

    elif kind == "sigmoid":
        out_data = _sigmoid(a.data)

        def backward(g, s=out_data):
            if a.requires_grad:
                a._accumulate(g * s * (1 - s))

    else:
        raise ValueError(f"activation: unknown kind {kind!r}")
    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear / convolution layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out = x @ weight + bias; x is [N, D], weight [D, K], bias [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError("linear: x and weight must be 2D")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: inner dims disagree {x.shape} vs {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation; x [N,C,H,W], kernel [F,C,kh,kw], bias [F]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d: x and kernel must be 4D")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d: kernel expects {ck} input channels, got {c}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, f, ho, wo) + bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, f, ho * wo)
        if bias.requires_grad:
            bias._accumulate(gm.sum(axis=(0, 2)))
        if kernel.requires_grad:
            dk = np.einsum("nfp,nkp->fk", gm, cols)
            kernel._accumulate(dk.reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.matmul(kmat.T, gm)
            x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, padding, ho, wo))

    return _make(out, (x, kernel, bias), backward)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2D convolution; x [N,C,H,W], kernel [C,F,kh,kw], bias [F].

    The forward map is exactly the adjoint (input-gradient) of the conv2d
    that takes an [N,F,H',W'] input to [N,C,H,W] with the same kernel,
    stride and padding; H' = (H-1)*stride - 2*padding + kh.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d_transpose: x and kernel must be 4D")
    n, c, h, w = x.shape
    ck, f, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d_transpose: kernel expects {ck} input channels, got {c}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d_transpose: bias shape {bias.shape} != ({f},)")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("conv2d_transpose: output size would be empty")

    kmat = kernel.data.reshape(c, f * kh * kw)
    cols = np.matmul(kmat.T, x.data.reshape(n, c, h * w))
    out = _col2im(cols, (n, f, ho, wo), kh, kw, stride, padding, h, w)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        if x.requires_grad:
            x._accumulate(np.matmul(kmat, gcols).reshape(n, c, h, w))
        if kernel.requires_grad:
            dk = np.einsum("ncp,nkp->ck", x.data.reshape(n, c, h * w), gcols)
            kernel._accumulate(dk.reshape(kernel.shape))

    return _make(out, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# losses and VAE primitives
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accumulate(g * -2.0 * diff / n)

    return _make(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred, target), backward)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    logits is [N, 2]; labels is an integer array in {0, 1}.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("cross_entropy_loss: logits must be [N, 2]")
    if labels.shape != (logits.shape[0],):
        raise ValueError("cross_entropy_loss: labels must be [N]")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("cross_entropy_loss: labels must be in {0, 1}")
    labels = labels.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            grad[np.arange(n), labels] -= 1.0
            logits._accumulate(g * grad / n)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_divergence_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), averaged over the batch axis."""
    _check_same_shape(mu, logvar, "kl_divergence_diag_gaussian")
    n = mu.shape[0] if mu.data.ndim > 0 else 1
    ev = np.exp(logvar.data)
    kl = 0.5 * np.sum(mu.data**2 + ev - 1.0 - logvar.data) / n

    def backward(g):
        if mu.requires_grad:
            mu._accumulate(g * mu.data / n)
        if logvar.requires_grad:
            logvar._accumulate(g * 0.5 * (ev - 1.0) / n)

    return _make(np.asarray(kl, dtype=mu.dtype), (mu, logvar), backward)


def reparameterize(mu: Tensor, logvar: Tensor, epsilon) -> Tensor:
    """z = mu + exp(0.5*logvar) * epsilon, epsilon a fixed caller-supplied array."""
    _check_same_shape(mu, logvar, "reparameterize")
    eps = np.asarray(epsilon, dtype=mu.dtype)
    if eps.ndim == 0:
        eps = np.full(mu.shape, float(eps), dtype=mu.dtype)
    if eps.shape != mu.shape:
        raise ValueError(f"reparameterize: epsilon shape {eps.shape} != {mu.shape}")
    sd = np.exp(0.5 * logvar.data)

    def backward(g):
        if mu.requires_grad:
            mu._accumulate(g)
        if logvar.requires_grad:
            logvar._accumulate(g * 0.5 * sd * eps)

    return _make(mu.data + sd * eps, (mu, logvar), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Repeated calls without zeroing accumulate into existing grads.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad.reshape(node.shape))
    # intermediate grads are not needed after the sweep; free non-leaf buffers
    for node in topo:
        if node._backward is not None and node is not loss:
            node.grad = None


# ---------------------------------------------------------------------------
# parameter collections, Adam, checkpoint I/O
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered (lexicographic) mapping from parameter names to Tensors."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name in sorted(params):
                self.add(name, params[name])

    def add(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        self._params = dict(sorted(self._params.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def values(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            t.data = values[name].astype(t.dtype, copy=True)

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({n: t for n, t in self._params.items() if n.startswith(prefix)})

    # -- serialization: JSON index + little-endian float32 blob ---------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index: dict[str, dict] = {}
        offset = 0
        with open(directory / "params.bin", "wb") as blob:
            for name, t in self._params.items():
                raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                index[name] = {"shape": list(t.shape), "offset": offset}
                blob.write(raw)
                offset += len(raw)
        with open(directory / "index.json", "w") as fh:
            json.dump(index, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory, requires_grad: bool = True) -> "ParamSet":
        directory = Path(directory)
        with open(directory / "index.json") as fh:
            index = json.load(fh)
        blob = (directory / "params.bin").read_bytes()
        ps = cls()
        for name in sorted(index):
            entry = index[name]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(blob):
                raise ValueError(f"params.bin: byte count mismatch for {name!r}")
            arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
            ps.add(name, Tensor(arr.astype(np.float32), requires_grad=requires_grad))
        return ps


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one ParamSet."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def init(self, params: ParamSet) -> "AdamState":
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)
        return self


def adam_step(params: ParamSet, state: AdamState) -> None:
    """In-place bias-corrected Adam update; requires every grad populated."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Compare backward() grads of ``fn()`` against central finite differences.

    ``fn`` must be a closure over ``params`` returning a scalar Tensor.
    All parameters must be float64. Returns the worst relative error,
    where the denominator is floored at 1 so near-zero gradients are
    compared absolutely.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"grad_check: parameter {name!r} must be float64")

    params.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn().data)
            flat[i] = orig - h
            lo = float(fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
