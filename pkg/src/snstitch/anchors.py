"""Plain pre-norm transformer anchors with hand-written reverse mode.

Activations are kept as ``(batch, tokens, width)`` arrays. There is no class
token: the head layer-norms the final activations, mean-pools over tokens and
applies a linear classifier, so every block boundary carries a plain
``tokens x width`` activation that a stitching layer can map.

Gradients flow through a :class:`Tape` of backward closures. The same tape is
shared by a standalone anchor forward and by a stitched route, which is how
stitched training reuses these kernels.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError

LN_EPS = 1e-6
INIT_STD = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)

BLOCK_TENSORS = (
    "norm1.weight", "norm1.bias",
    "attn.qkv.weight", "attn.qkv.bias",
    "attn.proj.weight", "attn.proj.bias",
    "norm2.weight", "norm2.bias",
    "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
)


@dataclass(frozen=True)
class AnchorSpec:
    depth: int
    width: int
    heads: int
    mlp_ratio: float = 4.0
    patch_dim: int = 16
    num_classes: int = 10
    seq_len: int = 16

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.heads < 1 or self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.patch_dim < 1 or self.num_classes < 1:
            raise ValueError("patch_dim and num_classes must be positive")
        if self.hidden < 1:
            raise ValueError("mlp_ratio too small")

    @property
    def hidden(self):
        return int(round(self.width * self.mlp_ratio))

    def tensor_shapes(self):
        """Ordered ``name -> shape`` table of every parameter tensor."""
        d, h = self.width, self.hidden
        shapes = {"embed.weight": (self.patch_dim, d), "embed.bias": (d,)}
        per_block = dict(zip(BLOCK_TENSORS, [
            (d,), (d,), (d, 3 * d), (3 * d,), (d, d), (d,),
            (d,), (d,), (d, h), (h,), (h, d), (d,),
        ]))
        for i in range(self.depth):
            for name, shape in per_block.items():
                shapes[f"blocks.{i}.{name}"] = shape
        shapes.update({
            "norm.weight": (d,), "norm.bias": (d,),
            "head.weight": (d, self.num_classes), "head.bias": (self.num_classes,),
        })
        return shapes


class Tape:
    """Records backward closures during a forward pass.

    Each closure maps an upstream gradient to ``(downstream_grad, {name: grad})``;
    names are qualified with the prefix given at record time.
    """

    def __init__(self):
        self._records = []

    def record(self, prefix, backward_fn):
        self._records.append((prefix, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, grad):
        grads = {}
        for prefix, fn in reversed(self._records):
            grad, local = fn(grad)
            for name, g in local.items():
                key = prefix + name
                grads[key] = grads[key] + g if key in grads else g
        return grads


# -- primitive ops -------------------------------------------------------------

def _layernorm(x, w, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * w + b, (xhat, rstd)


def _layernorm_backward(dy, w, cache):
    xhat, rstd = cache
    dxhat = dy * w
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = dy.reshape(-1, dy.shape[-1])
    dw = (flat * xhat.reshape(flat.shape)).sum(axis=0)
    db = flat.sum(axis=0)
    return dx, dw, db


def _gelu_tanh(x):
    return np.tanh(_GELU_C * (x + 0.044715 * x * x * x))


def gelu(x):
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x, t):
    # t is _gelu_tanh(x), reused from the forward pass
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _linear(x, w, b):
    return x @ w + b


def _linear_backward(dy, x, w):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, flat_x.T @ flat_dy, flat_dy.sum(axis=0)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), labels]))
    probs = _softmax(logits)
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


# -- model ---------------------------------------------------------------------

class TransformerBlock:
    """One pre-norm block: ``h + attn(ln1(h))`` then ``h + mlp(ln2(h))``."""

    def __init__(self, params, heads):
        missing = [k for k in BLOCK_TENSORS if k not in params]
        if missing:
            raise ShapeError(f"block is missing tensors {missing}")
        self.params = params
        self.heads = heads

    def forward(self, h):
        p = self.params
        bsz, n, d = h.shape
        nh = self.heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)

        a, ln1 = _layernorm(h, p["norm1.weight"], p["norm1.bias"])
        qkv = _linear(a, p["attn.qkv.weight"], p["attn.qkv.bias"])
        qkv_h = qkv.reshape(bsz, n, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv_h[0], qkv_h[1], qkv_h[2]
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, n, d)
        h1 = h + _linear(o, p["attn.proj.weight"], p["attn.proj.bias"])

        c, ln2 = _layernorm(h1, p["norm2.weight"], p["norm2.bias"])
        u = _linear(c, p["mlp.fc1.weight"], p["mlp.fc1.bias"])
        t = _gelu_tanh(u)
        g = 0.5 * u * (1.0 + t)
        out = h1 + _linear(g, p["mlp.fc2.weight"], p["mlp.fc2.bias"])
        cache = (a, ln1, q, k, v, att, o, c, ln2, u, t, g)
        return out, cache

    def backward(self, cache, dout):
        p = self.params
        a, ln1, q, k, v, att, o, c, ln2, u, t, g = cache
        bsz, n, d = dout.shape
        nh = self.heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)
        grads = {}

        dg, grads["mlp.fc2.weight"], grads["mlp.fc2.bias"] = _linear_backward(dout, g, p["mlp.fc2.weight"])
        du = dg * _gelu_grad(u, t)
        dc, grads["mlp.fc1.weight"], grads["mlp.fc1.bias"] = _linear_backward(du, c, p["mlp.fc1.weight"])
        dh1_ln, grads["norm2.weight"], grads["norm2.bias"] = _layernorm_backward(dc, p["norm2.weight"], ln2)
        dh1 = dout + dh1_ln

        do, grads["attn.proj.weight"], grads["attn.proj.bias"] = _linear_backward(dh1, o, p["attn.proj.weight"])
        do = do.reshape(bsz, n, nh, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, n, 3 * d)
        da, grads["attn.qkv.weight"], grads["attn.qkv.bias"] = _linear_backward(dqkv, a, p["attn.qkv.weight"])
        dh_ln, grads["norm1.weight"], grads["norm1.bias"] = _layernorm_backward(da, p["norm1.weight"], ln1)
        return dh1 + dh_ln, grads


class AnchorModel:
    """Parameters of one anchor. ``params`` is the single owner of every tensor;
    blocks hold references to the same arrays, so in-place updates are shared."""

    def __init__(self, spec, params):
        shapes = spec.tensor_shapes()
        if list(params) != list(shapes):
            extra = set(params) ^ set(shapes)
            raise ShapeError(f"parameter table does not match spec: {sorted(extra)[:5]}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.spec = spec
        self.params = params
        self.blocks = [
            TransformerBlock(
                {k: params[f"blocks.{i}.{k}"] for k in BLOCK_TENSORS}, spec.heads)
            for i in range(spec.depth)
        ]

    def named_parameters(self):
        return self.params.items()

    def copy(self):
        return AnchorModel(self.spec, {k: v.copy() for k, v in self.params.items()})

    def num_params(self, names=None):
        names = self.params if names is None else names
        return sum(self.params[n].size for n in names)


def init_anchor(spec, rng):
    params = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            params[name] = np.ones(shape)
        elif name.endswith(".weight"):
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            params[name] = np.zeros(shape)
    return AnchorModel(spec, params)


# -- staged forward ------------------------------------------------------------

def embed(model, x, tape=None, prefix=""):
    x = np.asarray(x, dtype=np.float64)
    s = model.spec
    if x.ndim != 3 or x.shape[1:] != (s.seq_len, s.patch_dim):
        raise ShapeError(f"expected input (batch, {s.seq_len}, {s.patch_dim}), got {x.shape}")
    w = model.params["embed.weight"]
    h = _linear(x, w, model.params["embed.bias"])
    if tape is not None:
        def backward(dh):
            _, dw, db = _linear_backward(dh, x, w)
            return None, {"embed.weight": dw, "embed.bias": db}
        tape.record(prefix, backward)
    return h


def forward_range(model, h, from_block, to_block, tape=None, prefix="", boundaries=None):
    """Apply blocks ``[from_block, to_block)`` to ``h``.

    When ``boundaries`` is a list, the activation entering each block and the
    final output are appended to it.
    """
    if not 0 <= from_block <= to_block <= model.spec.depth:
        raise IndexError(
            f"block range [{from_block}, {to_block}) outside [0, {model.spec.depth}]")
    if h.ndim != 3 or h.shape[-1] != model.spec.width:
        raise ShapeError(f"expected activations (..., {model.spec.width}), got {h.shape}")
    if boundaries is not None:
        boundaries.append(h)
    for i in range(from_block, to_block):
        block = model.blocks[i]
        h, cache = block.forward(h)
        if tape is not None:
            tape.record(f"{prefix}blocks.{i}.", _block_backward(block, cache))
        if boundaries is not None:
            boundaries.append(h)
    return h


def _block_backward(block, cache):
    return lambda dout: block.backward(cache, dout)


def head(model, h, tape=None, prefix=""):
    p = model.params
    z, ln = _layernorm(h, p["norm.weight"], p["norm.bias"])
    pooled = z.mean(axis=1)
    logits = _linear(pooled, p["head.weight"], p["head.bias"])
    if tape is not None:
        n = h.shape[1]

        def backward(dlogits):
            dpooled, dw, db = _linear_backward(dlogits, pooled, p["head.weight"])
            dz = np.broadcast_to(dpooled[:, None, :] / n, z.shape)
            dh, dnw, dnb = _layernorm_backward(dz, p["norm.weight"], ln)
            return dh, {"norm.weight": dnw, "norm.bias": dnb, "head.weight": dw, "head.bias": db}
        tape.record(prefix, backward)
    return logits


@dataclass
class ForwardResult:
    logits: np.ndarray
    activations: list
    tape: Tape = None

    def boundary(self, k):
        """Activation entering block ``k`` (``k == depth`` is the last block's output),
        flattened to ``(batch * tokens, width)``."""
        a = self.activations[k]
        return a.reshape(-1, a.shape[-1])


def forward(model, x, record=True):
    tape = Tape() if record else None
    acts = []
    h = embed(model, x, tape)
    h = forward_range(model, h, 0, model.spec.depth, tape, boundaries=acts)
    logits = head(model, h, tape)
    return ForwardResult(logits, acts, tape)


def backward(model, result, dlogits):
    """Parameter gradients for the forward pass that produced ``result``."""
    if result is None or result.tape is None:
        raise StateError("backward needs a forward pass run with record=True")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != result.logits.shape:
        raise ShapeError(f"gradient shape {dlogits.shape} != logits shape {result.logits.shape}")
    return result.tape.backward(dlogits)


def predict(model, x):
    return forward(model, x, record=False).logits
