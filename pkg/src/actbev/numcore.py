"""Dense tensors with reverse-mode gradients, tiny-model optimizers, and IO.

A Tensor wraps a float64 numpy array and remembers how it was produced:
each op stores its parents and a closure that routes the output gradient
back to them. backward() runs those closures exactly once each, in
reverse topological order. The graph is whatever the forward pass built;
there is no compilation step and no broadcasting magic beyond numpy's.

Everything is double precision. Gradient checks at 1e-5 relative
tolerance are not feasible in float32, and the desk-scale models here
never need the memory back.
"""

import base64
import json
import threading
from contextlib import contextmanager

import numpy as np

# --------------------------------------------------------------- grad mode

_STATE = threading.local()


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph building in the current thread (inference/eval paths)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


# ------------------------------------------------------------------ tensor

class Tensor:
    """float64 array plus the bookkeeping for reverse-mode accumulation.

    grad is allocated lazily on first accumulation and has the same shape
    as data. Tensors created from raw arrays are leaves; ops produce
    internal nodes carrying (_parents, _backward).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- plumbing

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (delegates to module functions)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self):
        return tmean(self)

    def backward(self):
        run_backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Wrap an op result; builds graph only when enabled and useful."""
    out = Tensor(data)
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------- backward

def topo_order(root: Tensor):
    """Depth-first topological order (parents before children)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def run_backward(root: Tensor, order=None, free_graph=True):
    """Accumulate gradients of a scalar root into every reachable leaf.

    order, when given, must be a valid topological order of the graph
    under root (parents before children); any such order yields the same
    gradients, which the tests rely on.
    """
    if root.data.size != 1:
        raise ValueError("backward root must be a scalar")
    if order is None:
        order = topo_order(root)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            if free_graph:
                node._backward = None
                node._parents = ()
                node.grad = None  # internal grads are not needed after routing

    # note: leaves keep their grads; internal nodes are stripped so large
    # per-step graphs do not outlive the step.


# -------------------------------------------------------------- primitives

def _unbroadcast(g, shape):
    """Sum g down to shape, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def reshape(x, *shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))

    return _make(data, (x,), backward)


def tsum(x, axis=None):
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make(data, (x,), backward)


def tmean(x):
    x = as_tensor(x)
    n = x.data.size
    data = x.data.mean()

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return _make(data, (x,), backward)


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _make(data, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    data = np.empty_like(x.data)
    pos = x.data >= 0.0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return _make(data, (x,), backward)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data)

    return _make(data, (x,), backward)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(data, (x,), backward)


def tabs(x):
    x = as_tensor(x)
    data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.sign(x.data))

    return _make(data, (x,), backward)


def softmax(x):
    """Softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - inner))

    return _make(data, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def take_axis(x, index, axis):
    """Select one slice along an axis (removing it), e.g. one attention head."""
    x = as_tensor(x)
    data = np.take(x.data, index, axis=axis)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = index
            gx[tuple(sl)] = g
            x._accumulate(gx)

    return _make(data, (x,), backward)


def index_rows(x, idx):
    """Gather rows of a 2D tensor; backward scatter-adds (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return _make(data, (x,), backward)


def segment_sum(x, segments, num_segments):
    """Sum rows of x into num_segments buckets given per-row segment ids."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape[0] != x.data.shape[0]:
        raise ValueError("one segment id per row required")
    data = np.zeros((num_segments,) + x.data.shape[1:])
    np.add.at(data, segments, x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g[segments])

    return _make(data, (x,), backward)


def bilinear_sample(f, pos):
    """Sample a feature map at continuous positions with zero padding.

    f: (H, W, C) tensor on the integer grid; pos: (..., 2) positions as
    (u, v) = (column, row). Corners outside the grid contribute nothing,
    so samples fade to zero beyond the border instead of clamping.
    Differentiable in f everywhere and in pos away from integer grid
    lines (floor switches corner sets there).
    """
    f, pos = as_tensor(f), as_tensor(pos)
    h, w, c = f.data.shape
    u = pos.data[..., 0]
    v = pos.data[..., 1]
    x0 = np.floor(u)
    y0 = np.floor(v)
    du = u - x0
    dv = v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def corner(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = f.data[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0), ok

    f00, ok00 = corner(y0, x0)
    f01, ok01 = corner(y0, x1)
    f10, ok10 = corner(y1, x0)
    f11, ok11 = corner(y1, x1)
    w00 = (1.0 - du) * (1.0 - dv)
    w01 = du * (1.0 - dv)
    w10 = (1.0 - du) * dv
    w11 = du * dv
    data = (w00[..., None] * f00 + w01[..., None] * f01
            + w10[..., None] * f10 + w11[..., None] * f11)

    def backward(g):
        if f.requires_grad:
            gf = np.zeros_like(f.data)
            for ok, yi, xi, wt in ((ok00, y0, x0, w00), (ok01, y0, x1, w01),
                                   (ok10, y1, x0, w10), (ok11, y1, x1, w11)):
                contrib = g * wt[..., None]
                np.add.at(gf, (yi[ok], xi[ok]), contrib[ok])
            f._accumulate(gf)
        if pos.requires_grad:
            d_du = ((1.0 - dv)[..., None] * (f01 - f00)
                    + dv[..., None] * (f11 - f10))
            d_dv = ((1.0 - du)[..., None] * (f10 - f00)
                    + du[..., None] * (f11 - f01))
            gp = np.empty_like(pos.data)
            gp[..., 0] = (g * d_du).sum(axis=-1)
            gp[..., 1] = (g * d_dv).sum(axis=-1)
            pos._accumulate(gp)

    return _make(data, (f, pos), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            gh = g * gamma.data
            # standard layer-norm backward over the normalized axis
            gx = (gh - gh.mean(axis=-1, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv
            x._accumulate(gx)

    return _make(data, (x, gamma, beta), backward)


def bce_with_logits(logits, targets, pos_weight=1.0):
    """Per-element binary cross entropy on raw logits, overflow-safe.

    loss = pos_weight * t * softplus(-x) + (1 - t) * softplus(x)
    """
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)

    def softplus(z):
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    data = pos_weight * t * softplus(-x.data) + (1.0 - t) * softplus(x.data)

    def backward(g):
        if x.requires_grad:
            s = np.empty_like(x.data)
            pos = x.data >= 0.0
            s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
            ex = np.exp(x.data[~pos])
            s[~pos] = ex / (1.0 + ex)
            x._accumulate(g * ((1.0 - t) * s - pos_weight * t * (1.0 - s)))

    return _make(data, (x,), backward)


# ------------------------------------------------------------- linear maps

class LinearParams:
    """weight: (C_out, C_in), bias: (C_out,); y = x @ weight.T + bias."""

    __slots__ = ("weight", "bias")

    def __init__(self, weight: Tensor, bias: Tensor):
        w, b = weight.data, bias.data
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError("weight must be (C_out, C_in) with matching bias")
        self.weight = weight
        self.bias = bias

    @staticmethod
    def create(rng, c_in, c_out, zero=False):
        """Uniform +-sqrt(1/C_in) init, or all-zero for offset/weight predictors.

        Zero init keeps initial deformable sampling at the reference point
        and initial attention uniform, which stabilizes early training.
        """
        if zero:
            w = np.zeros((c_out, c_in))
        else:
            bound = np.sqrt(1.0 / c_in)
            w = rng.uniform(-bound, bound, size=(c_out, c_in))
        return LinearParams(Tensor(w, requires_grad=True),
                            Tensor(np.zeros(c_out), requires_grad=True))

    def named(self, prefix):
        return {prefix + ".weight": self.weight, prefix + ".bias": self.bias}


def linear(x, p: LinearParams):
    x = as_tensor(x)
    w, b = p.weight, p.bias
    c_out, c_in = w.data.shape
    if x.data.shape[-1] != c_in:
        raise ValueError(f"linear expects trailing dim {c_in}, got {x.data.shape[-1]}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, c_in)
    data = (x2 @ w.data.T + b.data).reshape(lead + (c_out,))

    def backward(g):
        g2 = g.reshape(-1, c_out)
        if x.requires_grad:
            x._accumulate((g2 @ w.data).reshape(x.data.shape))
        if w.requires_grad:
            w._accumulate(g2.T @ x2)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _make(data, (x, w, b), backward)


def mlp2(x, p1: LinearParams, p2: LinearParams):
    """Two linear layers with a ReLU between, the interest-scorer head shape."""
    return linear(relu(linear(x, p1)), p2)


# --------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction, global-norm clipping, per-name lr multipliers.

    lr_mults maps a parameter-name prefix to a multiplier; the longest
    matching prefix wins. Gradients are clipped to clip_norm by global
    norm before the moment updates.
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm=10.0, lr_mults=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.lr_mults = dict(lr_mults or {})
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _mult(self, name):
        best, mult = -1, 1.0
        for prefix, m in self.lr_mults.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, mult = len(prefix), m
        return mult

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p.data -= self.lr * self._mult(k) * mhat / (np.sqrt(vhat) + self.eps)


# ------------------------------------------------------------ verification

def grad_check(fn, params: dict, h=1e-5, max_entries=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    fn must rebuild its graph on each call and return a scalar Tensor.
    Relative error per entry: |a - n| / max(1e-8, |a| + |n|). When
    max_entries is set, that many entries per parameter are checked
    (seeded subsample); otherwise every entry is.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    run_backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if max_entries is not None and n_entries > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            idxs = picker.choice(n_entries, size=max_entries, replace=False)
        else:
            idxs = range(n_entries)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            rel = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, rel)
    return worst


# ------------------------------------------------------------- persistence

def save_checkpoint(params: dict, path):
    """One JSON manifest: name -> shape + base64 little-endian float64 bytes."""
    manifest = {}
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        manifest[name] = {
            "shape": list(arr.shape),
            "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    with open(path, "w") as fh:
        json.dump(manifest, fh)


def load_checkpoint(path, params: dict = None):
    """Read a manifest; copy into params when given (shapes must match)."""
    with open(path) as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, entry in manifest.items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[name] = arr.astype(np.float64)
    if params is not None:
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in params.items():
            if tuple(arrays[name].shape) != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arrays[name].copy()
    return arrays


def make_rng(seed):
    """The one RNG constructor used everywhere: seeded PCG64 generator."""
    return np.random.Generator(np.random.PCG64(seed))
