"""Stitch routes between a small and a large anchor, and the layers that join them.

A route is an ordered list of block segments that alternate between the two
anchors. Moving between anchors goes through a *crossing*: a direction plus a
boundary ``l`` on the small anchor, paired with boundary ``m = l * ratio`` on
the large one, where ``ratio = large.depth // small.depth``. Each crossing owns
exactly one stitching layer, shared by every route that passes through it.

Route families:

* ``FS``  small[0,l) -> large[m,Ll)
* ``SF``  large[0,m) -> small[l,Ls)
* ``FSF`` small[0,l1) -> large[m1,m2) -> small[l2,Ls)
* ``SFS`` large[0,m1) -> small[l1,l2) -> large[m2,Ll)

plus the two untouched anchors.
"""
import itertools
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import anchors as nn
from .errors import ShapeError, StateError, UnsupportedArchitectureError
from .linalg import DEFAULT_PINV_TOL, gaussian, pinv

SMALL, LARGE = "small", "large"
S2L, L2S = "s2l", "l2s"
ANCHOR_SMALL, ANCHOR_LARGE = "AnchorSmall", "AnchorLarge"
KINDS = (ANCHOR_SMALL, ANCHOR_LARGE, "FS", "SF", "FSF", "SFS")
MODES = ("V1-FS", "TWS")

DEFAULT_RANK = 16
DEFAULT_B_STD = 0.02


@dataclass(frozen=True, order=True)
class CrossingId:
    direction: str
    small_boundary: int

    def __post_init__(self):
        if self.direction not in (S2L, L2S):
            raise ValueError(f"unknown crossing direction {self.direction!r}")

    @property
    def key(self):
        return f"{self.direction}.{self.small_boundary}"

    @classmethod
    def parse(cls, key):
        direction, boundary = key.split(".")
        return cls(direction, int(boundary))

    def source(self):
        return SMALL if self.direction == S2L else LARGE


class Segment(NamedTuple):
    anchor: str
    start: int
    stop: int


@dataclass(frozen=True)
class StitchConfig:
    kind: str
    segments: tuple
    crossings: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown route kind {self.kind!r}")
        if len(self.crossings) != len(self.segments) - 1:
            raise ValueError("a route needs exactly one crossing between consecutive segments")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.anchor == b.anchor:
                raise ValueError("consecutive segments must alternate anchors")
        for seg in self.segments:
            if seg.start >= seg.stop:
                raise ValueError(f"empty segment {seg}")

    @property
    def head_anchor(self):
        return self.segments[-1].anchor

    @property
    def is_anchor(self):
        return len(self.segments) == 1

    @property
    def name(self):
        if self.is_anchor:
            return self.kind
        return f"{self.kind}({','.join(str(c.small_boundary) for c in self.crossings)})"


class StitchLayer:
    """``X @ M + X @ B @ A``. ``B`` and ``A`` are ``None`` when the layer has no low-rank update."""

    def __init__(self, M, B=None, A=None):
        self.M = np.asarray(M, dtype=np.float64)
        if (B is None) != (A is None):
            raise ValueError("B and A must both be set or both be None")
        if B is not None:
            B = np.asarray(B, dtype=np.float64)
            A = np.asarray(A, dtype=np.float64)
            d_in, d_out = self.M.shape
            r = B.shape[1]
            if B.shape != (d_in, r) or A.shape != (r, d_out):
                raise ShapeError(f"low-rank factors {B.shape} x {A.shape} do not fit M {self.M.shape}")
            if r > min(d_in, d_out):
                raise ShapeError(f"rank {r} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
        self.B = B
        self.A = A

    @property
    def d_in(self):
        return self.M.shape[0]

    @property
    def d_out(self):
        return self.M.shape[1]

    @property
    def rank(self):
        return 0 if self.B is None else self.B.shape[1]

    def tensors(self):
        out = {"M": self.M}
        if self.B is not None:
            out["B"] = self.B
            out["A"] = self.A
        return out

    def merged(self):
        return self.M if self.B is None else self.M + self.B @ self.A


def stitch_layer_forward(layer, X, tape=None, prefix=""):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != layer.d_in:
        raise ShapeError(f"stitch layer expects width {layer.d_in}, got {X.shape[-1]}")
    out = X @ layer.M
    xb = None
    if layer.B is not None:
        xb = X @ layer.B
        out = out + xb @ layer.A
    if tape is not None:
        M, B, A = layer.M, layer.B, layer.A

        def backward(dy):
            flat_x = X.reshape(-1, X.shape[-1])
            flat_dy = dy.reshape(-1, dy.shape[-1])
            grads = {"M": flat_x.T @ flat_dy}
            dx = dy @ M.T
            if B is not None:
                dxb = dy @ A.T
                grads["A"] = xb.reshape(-1, xb.shape[-1]).T @ flat_dy
                grads["B"] = flat_x.T @ dxb.reshape(-1, dxb.shape[-1])
                dx = dx + dxb @ B.T
            return dx, grads
        tape.record(prefix, backward)
    return out


def ls_init(x_in, x_out, tol=DEFAULT_PINV_TOL):
    """Least-squares map ``M = pinv(x_in) @ x_out`` between two activation sets."""
    x_in = np.asarray(x_in, dtype=np.float64)
    x_out = np.asarray(x_out, dtype=np.float64)
    if x_in.ndim != 2 or x_out.ndim != 2 or x_in.shape[0] != x_out.shape[0]:
        raise ShapeError(f"need paired (N, D) activations, got {x_in.shape} and {x_out.shape}")
    p, rank = pinv(x_in, tol=tol, return_rank=True)
    _check_rank(rank, x_in.shape[1])
    return p @ x_out


def _check_rank(rank, d_in):
    if rank < d_in:
        warnings.warn(
            f"calibration activations are rank-deficient ({rank} < {d_in}); "
            "using the minimum-norm least-squares solution",
            RuntimeWarning, stacklevel=3)


class StitchSpace:
    """Every route between two anchors plus the shared stitching layers.

    ``layers`` starts empty; :func:`init_layers` fills it from calibration data.
    """

    def __init__(self, small, large, mode, configs):
        self.small = small
        self.large = large
        self.mode = mode
        self.configs = list(configs)
        self.layers = {}
        self._index = {c: i for i, c in enumerate(self.configs)}
        if len(self._index) != len(self.configs):
            raise ValueError("duplicate configs in stitch space")

    def __len__(self):
        return len(self.configs)

    @property
    def ratio(self):
        return self.large.depth // self.small.depth

    @property
    def anchor_ids(self):
        return (self.index(anchor_config(self.small, SMALL)),
                self.index(anchor_config(self.large, LARGE)))

    def index(self, config):
        try:
            return self._index[config]
        except KeyError:
            raise LookupError(f"config {config} is not in this stitch space") from None

    def resolve(self, config):
        if isinstance(config, (int, np.integer)):
            if not 0 <= config < len(self.configs):
                raise LookupError(f"config id {config} out of range")
            return int(config), self.configs[config]
        return self.index(config), config

    def crossings(self):
        return sorted({c for cfg in self.configs for c in cfg.crossings})

    def spec(self, anchor):
        return self.small if anchor == SMALL else self.large

    def large_boundary(self, crossing):
        return crossing.small_boundary * self.ratio

    def layer_tensors(self):
        out = {}
        for cid in sorted(self.layers):
            for name, arr in self.layers[cid].tensors().items():
                out[f"stitch.{cid.key}.{name}"] = arr
        return out


def anchor_config(spec, which):
    kind = ANCHOR_SMALL if which == SMALL else ANCHOR_LARGE
    return StitchConfig(kind, (Segment(which, 0, spec.depth),), ())


def _check_pair(small, large):
    if large.depth % small.depth:
        raise UnsupportedArchitectureError(
            f"large depth {large.depth} is not a multiple of small depth {small.depth}")
    if small.width > large.width:
        raise UnsupportedArchitectureError("small anchor must not be wider than the large anchor")
    for field in ("seq_len", "patch_dim", "num_classes"):
        if getattr(small, field) != getattr(large, field):
            raise UnsupportedArchitectureError(f"anchors disagree on {field}")


def enumerate_space(small, large, mode="TWS"):
    """All routes of the chosen family. ``V1-FS``: anchors + FS; ``TWS``: also SF, FSF, SFS."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    _check_pair(small, large)
    Ls, Ll = small.depth, large.depth
    r = Ll // Ls
    bounds = range(1, Ls)
    s2l = lambda l: CrossingId(S2L, l)  # noqa: E731
    l2s = lambda l: CrossingId(L2S, l)  # noqa: E731

    configs = [anchor_config(small, SMALL), anchor_config(large, LARGE)]
    for l in bounds:
        configs.append(StitchConfig("FS", (Segment(SMALL, 0, l), Segment(LARGE, l * r, Ll)), (s2l(l),)))
    if mode == "TWS":
        for l in bounds:
            configs.append(StitchConfig("SF", (Segment(LARGE, 0, l * r), Segment(SMALL, l, Ls)), (l2s(l),)))
        for l1, l2 in itertools.combinations(bounds, 2):
            configs.append(StitchConfig(
                "FSF",
                (Segment(SMALL, 0, l1), Segment(LARGE, l1 * r, l2 * r), Segment(SMALL, l2, Ls)),
                (s2l(l1), l2s(l2))))
        for l1, l2 in itertools.combinations(bounds, 2):
            configs.append(StitchConfig(
                "SFS",
                (Segment(LARGE, 0, l1 * r), Segment(SMALL, l1, l2), Segment(LARGE, l2 * r, Ll)),
                (l2s(l1), s2l(l2))))
    return StitchSpace(small, large, mode, configs)


def tws_count(small_depth):
    """Closed-form size of the two-way space for a small anchor of the given depth."""
    k = small_depth - 1
    return 2 + 2 * k + k * (k - 1)


def init_layers(space, small, large, calib_x, rank=DEFAULT_RANK, rng=None,
                b_std=DEFAULT_B_STD, tol=DEFAULT_PINV_TOL):
    """Least-squares initialise every crossing from calibration inputs.

    With ``rank > 0`` each layer also gets a Gaussian ``B`` and a zero ``A``,
    so the initial low-rank update is exactly zero.
    """
    if rank and rng is None:
        raise ValueError("an rng is required to initialise low-rank factors")
    acts = {
        SMALL: nn.forward(small, calib_x, record=False),
        LARGE: nn.forward(large, calib_x, record=False),
    }
    pinv_cache = {}

    def solve(src, src_bound, dst, dst_bound):
        if (src, src_bound) not in pinv_cache:
            x_in = acts[src].boundary(src_bound)
            p, r = pinv(x_in, tol=tol, return_rank=True)
            _check_rank(r, x_in.shape[1])
            pinv_cache[src, src_bound] = p
        return pinv_cache[src, src_bound] @ acts[dst].boundary(dst_bound)

    layers = {}
    for cid in space.crossings():
        l, m = cid.small_boundary, space.large_boundary(cid)
        if cid.direction == S2L:
            M = solve(SMALL, l, LARGE, m)
        else:
            M = solve(LARGE, m, SMALL, l)
        if rank:
            B = gaussian(rng, M.shape[0], rank, b_std)
            A = np.zeros((rank, M.shape[1]))
            layers[cid] = StitchLayer(M, B, A)
        else:
            layers[cid] = StitchLayer(M)
    space.layers = layers
    return space


@dataclass
class StitchedResult:
    logits: np.ndarray
    trace: list
    tape: nn.Tape = None


def forward_stitched(space, config, small, large, x, record=True):
    """Run one route. Pure-anchor routes execute exactly the anchor's own forward."""
    cid, config = space.resolve(config)
    models = {SMALL: small, LARGE: large}
    for which, model in models.items():
        if model.spec != space.spec(which):
            raise ShapeError(f"{which} model does not match the spec the space was built for")
    tape = nn.Tape() if record else None
    trace = []

    first = config.segments[0]
    h = nn.embed(models[first.anchor], x, tape, prefix=f"{first.anchor}.")
    for i, seg in enumerate(config.segments):
        if i:
            crossing = config.crossings[i - 1]
            layer = space.layers.get(crossing)
            if layer is None:
                raise StateError(f"stitching layer {crossing.key} has not been initialised")
            h = stitch_layer_forward(layer, h, tape, prefix=f"stitch.{crossing.key}.")
            trace.append(("stitch", crossing.key))
        h = nn.forward_range(models[seg.anchor], h, seg.start, seg.stop, tape, prefix=f"{seg.anchor}.")
        trace.append(tuple(seg))
    logits = nn.head(models[config.head_anchor], h, tape, prefix=f"{config.head_anchor}.")
    trace.append(("head", config.head_anchor))
    return StitchedResult(logits, trace, tape)


def backward_stitched(result, dlogits):
    """Gradients keyed ``small.<param>``, ``large.<param>`` and ``stitch.<crossing>.<M|B|A>``."""
    if result.tape is None:
        raise StateError("backward needs a forward pass run with record=True")
    return result.tape.backward(np.asarray(dlogits, dtype=np.float64))


def route_params(space, config):
    """Qualified names of every parameter a route touches (anchor tensors and stitch layers)."""
    _, config = space.resolve(config)
    names = []
    first = config.segments[0].anchor
    names += [f"{first}.embed.weight", f"{first}.embed.bias"]
    for i, seg in enumerate(config.segments):
        if i:
            cid = config.crossings[i - 1]
            names += [f"stitch.{cid.key}.{k}" for k in ("M", "B", "A")
                      if cid in space.layers and k in space.layers[cid].tensors()]
        names += [f"{seg.anchor}.blocks.{b}.{t}" for b in range(seg.start, seg.stop)
                  for t in nn.BLOCK_TENSORS]
    last = config.head_anchor
    names += [f"{last}.{t}" for t in ("norm.weight", "norm.bias", "head.weight", "head.bias")]
    return names


# -- JSON ----------------------------------------------------------------------

def space_to_json(space, container=None):
    """Serializable description: config list plus a layer table whose tensors live in
    ``container`` (an SNV2 file) under ``stitch.<crossing>.<M|B|A>``."""
    configs = [
        {
            "id": i,
            "kind": c.kind,
            "name": c.name,
            "crossings": [x.key for x in c.crossings],
            "segments": [list(s) for s in c.segments],
        }
        for i, c in enumerate(space.configs)
    ]
    layers = []
    for cid in space.crossings():
        layer = space.layers.get(cid)
        entry = {
            "crossing": cid.key,
            "direction": cid.direction,
            "small_boundary": cid.small_boundary,
            "large_boundary": space.large_boundary(cid),
            "rank": layer.rank if layer else None,
            "tensors": ({k: f"stitch.{cid.key}.{k}" for k in layer.tensors()} if layer else {}),
        }
        layers.append(entry)
    return {
        "format": "snstitch-space",
        "version": 1,
        "mode": space.mode,
        "small": asdict(space.small),
        "large": asdict(space.large),
        "container": container,
        "configs": configs,
        "layers": layers,
    }


def space_from_json(doc, tensors=None):
    """Rebuild a space. Stitch layers are restored when ``tensors`` (a loaded container) is given."""
    if doc.get("format") != "snstitch-space":
        raise ValueError("not a stitch-space document")
    small = nn.AnchorSpec(**doc["small"])
    large = nn.AnchorSpec(**doc["large"])
    space = enumerate_space(small, large, doc["mode"])
    listed = [(c["kind"], c["crossings"]) for c in doc["configs"]]
    expected = [(c.kind, [x.key for x in c.crossings]) for c in space.configs]
    if listed != expected:
        raise ValueError("config list does not match the enumeration for these anchors")
    if tensors is not None:
        for entry in doc["layers"]:
            refs = entry["tensors"]
            if not refs:
                continue
            cid = CrossingId.parse(entry["crossing"])
            try:
                parts = {k: tensors[ref] for k, ref in refs.items()}
            except KeyError as exc:
                raise ValueError(f"container is missing tensor {exc}") from None
            space.layers[cid] = StitchLayer(parts["M"], parts.get("B"), parts.get("A"))
    return space
