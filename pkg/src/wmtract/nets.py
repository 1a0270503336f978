"""3D U-Net and V-Net builders and the weighted segmentation losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import ShapeError, SpecError

ARCHITECTURES = ("unet", "vnet")
LOSSES = ("wip", "wce")
WCE_EPS = 1e-7


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str = "unet"
    in_channels: int = 6
    levels: int = 2
    base_channels: int = 8

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise SpecError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.in_channels < 1 or self.levels < 1 or self.base_channels < 1:
            raise SpecError("in_channels, levels and base_channels must all be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "wip"
    weight: float = 3.0

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise SpecError(f"loss kind must be one of {LOSSES}, got {self.kind!r}")
        if not 1.0 <= self.weight <= 1000.0:
            raise SpecError(f"tract weight must lie in [1, 1000], got {self.weight}")

    def __call__(self, p, r):
        fn = loss_wip if self.kind == "wip" else loss_wce
        return fn(p, r, self.weight)


# ---------------------------------------------------------------------- losses


def _check_pair(p, r):
    if p.shape != r.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match reference {r.shape}")


def loss_wip(p, r, w: float):
    """Weighted inner product loss and its gradient wrt ``p``.

    L = -(1/N) sum_i [w r_i p_i + (1 - r_i)(1 - p_i)]
    """
    _check_pair(p, r)
    n = p.size
    p64 = np.asarray(p, dtype=np.float64)
    r64 = np.asarray(r, dtype=np.float64)
    loss = -(w * (r64 * p64).sum() + ((1 - r64) * (1 - p64)).sum()) / n
    grad = (-(w * r64 - (1 - r64)) / n).astype(p.dtype)
    return float(loss), grad


def loss_wce(p, r, w: float):
    """Weighted cross entropy and its gradient wrt ``p``.

    L = -(1/N) sum_i [w r_i log p_i + (1 - r_i) log(1 - p_i)], with ``p``
    clamped to [1e-7, 1 - 1e-7].
    """
    _check_pair(p, r)
    n = p.size
    pc = np.clip(np.asarray(p, dtype=np.float64), WCE_EPS, 1 - WCE_EPS)
    r64 = np.asarray(r, dtype=np.float64)
    loss = -(w * (r64 * np.log(pc)).sum() + ((1 - r64) * np.log1p(-pc)).sum()) / n
    grad = (-(w * r64 / pc - (1 - r64) / (1 - pc)) / n).astype(p.dtype)
    return float(loss), grad


# -------------------------------------------------------------------- networks


class ConvBlock:
    """conv 3x3x3 -> batch norm -> PReLU."""

    def __init__(self, cin, cout, rng, dtype, stride=1):
        self.conv = ag.Conv3d(cin, cout, 3, stride, "same", rng=rng, dtype=dtype)
        self.bn = ag.BatchNorm3d(cout, dtype=dtype)
        self.act = ag.PReLU(cout, dtype=dtype)

    def layers(self):
        return {"conv": self.conv, "bn": self.bn, "act": self.act}

    def forward(self, x, training):
        return self.act.forward(self.bn.forward(self.conv.forward(x, training), training), training)

    def backward(self, dy, need_dx=True):
        return self.conv.backward(self.bn.backward(self.act.backward(dy)), need_dx)


class Stage:
    """Two conv blocks; V-Net stages add the first block's output back in."""

    def __init__(self, cin, cout, residual, rng, dtype):
        self.b1 = ConvBlock(cin, cout, rng, dtype)
        self.b2 = ConvBlock(cout, cout, rng, dtype)
        self.residual = residual

    def layers(self):
        out = {}
        for name, blk in (("b1", self.b1), ("b2", self.b2)):
            out.update({f"{name}.{k}": v for k, v in blk.layers().items()})
        return out

    def forward(self, x, training):
        h = self.b1.forward(x, training)
        y = self.b2.forward(h, training)
        return ag.residual_add(h, y) if self.residual else y

    def backward(self, dy, need_dx=True):
        dh = self.b2.backward(dy)
        if self.residual:
            dh = dh + dy
        return self.b1.backward(dh, need_dx)


class Network:
    """Encoder/decoder segmentation network producing per-voxel probabilities.

    Parameters live in the layer objects; ``params()``, ``grads()`` and
    ``buffers()`` expose them under stable dotted names.
    """

    def __init__(self, spec: NetworkSpec, seed: int | np.random.Generator = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        residual = spec.architecture == "vnet"
        L = spec.levels
        self.enc = []
        self.down = []
        cin = spec.in_channels
        for lvl in range(L):
            c = spec.channels(lvl)
            self.enc.append(Stage(cin, c, residual, rng, dtype))
            if lvl < L - 1:
                if residual:
                    self.down.append(ConvBlock(c, c, rng, dtype, stride=2))
                else:
                    self.down.append(ag.MaxPool3d())
            cin = c
        self.up = []
        self.dec = []
        for lvl in range(L - 2, -1, -1):
            c = spec.channels(lvl)
            self.up.append(ag.ConvTranspose3d(spec.channels(lvl + 1), c, rng=rng, dtype=dtype))
            self.dec.append(Stage(2 * c, c, residual, rng, dtype))
        self.head = ag.Conv3d(spec.channels(0), 1, 1, rng=rng, dtype=dtype)
        self.out = ag.Sigmoid()

    # ------------------------------------------------------------- structure

    def layers(self) -> dict[str, ag.Layer]:
        out = {}
        for i, st in enumerate(self.enc):
            out.update({f"enc{i}.{k}": v for k, v in st.layers().items()})
        for i, d in enumerate(self.down):
            if isinstance(d, ConvBlock):
                out.update({f"down{i}.{k}": v for k, v in d.layers().items()})
        for i, (u, st) in enumerate(zip(self.up, self.dec)):
            lvl = self.spec.levels - 2 - i
            out[f"up{lvl}"] = u
            out.update({f"dec{lvl}.{k}": v for k, v in st.layers().items()})
        out["head"] = self.head
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers().items() for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers().items() for k, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers().items() for k, v in layer.buffers.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        layers = self.layers()
        expected = set(self.state_dict())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for key, arr in state.items():
            lname, _, pname = key.rpartition(".")
            layer = layers[lname]
            store = layer.params if pname in layer.params else layer.buffers
            if store[pname].shape != arr.shape:
                raise ShapeError(f"{key}: shape {arr.shape} != {store[pname].shape}")
            store[pname][...] = arr

    def num_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def zero_grad(self) -> None:
        for layer in self.layers().values():
            layer.zero_grad()

    def astype(self, dtype) -> "Network":
        for layer in self.layers().values():
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    # ------------------------------------------------------------- compute

    def check_input(self, shape) -> None:
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected (B, {self.spec.in_channels}, X, Y, Z) input, got {tuple(shape)}")
        m = 2 ** (self.spec.levels - 1)
        for axis, n in zip("XYZ", shape[2:]):
            if n % m:
                raise ShapeError(f"axis {axis} has size {n}, not divisible by {m} for {self.spec.levels} levels")

    def forward(self, x, training: bool = True):
        """Probabilities in (0, 1), shape (B, 1, X, Y, Z)."""
        self.check_input(x.shape)
        h = np.asarray(x, dtype=self.dtype)
        skips = []
        for lvl, st in enumerate(self.enc):
            h = st.forward(h, training)
            if lvl < len(self.down):
                skips.append(h)
                h = self.down[lvl].forward(h, training)
        self._split = []
        for u, st in zip(self.up, self.dec):
            skip = skips.pop()
            up = u.forward(h, training)
            self._split.append(skip.shape[1])
            h = st.forward(ag.concat_channels(skip, up), training)
        return self.out.forward(self.head.forward(h, training), training)

    def backward(self, dprob):
        """Accumulate parameter gradients for upstream gradient wrt probabilities."""
        dh = self.head.backward(self.out.backward(dprob))
        dskips = []  # indexed by level, shallowest first
        for u, st, c1 in zip(reversed(self.up), reversed(self.dec), reversed(self._split)):
            dcat = st.backward(dh)
            dskip, dup = ag.concat_channels_backward(dcat, c1)
            dskips.append(dskip)
            dh = u.backward(np.ascontiguousarray(dup))
        for lvl in range(len(self.enc) - 1, -1, -1):
            if lvl < len(self.down):
                dh = self.down[lvl].backward(dh) + dskips[lvl]
            dh = self.enc[lvl].backward(dh, need_dx=lvl > 0)
        return dh


def build_network(spec: NetworkSpec, seed=0, dtype=np.float32) -> Network:
    return Network(spec, seed, dtype)


def expected_param_count(spec: NetworkSpec) -> int:
    """Closed-form parameter count of ``build_network(spec)``."""

    def block(cin, cout):  # conv w + b, BN gamma + beta, PReLU slopes
        return cin * cout * 27 + cout + 2 * cout + cout

    total = 0
    cin = spec.in_channels
    for lvl in range(spec.levels):
        c = spec.channels(lvl)
        total += block(cin, c) + block(c, c)
        if lvl < spec.levels - 1 and spec.architecture == "vnet":
            total += block(c, c)
        cin = c
    for lvl in range(spec.levels - 1):
        c = spec.channels(lvl)
        total += spec.channels(lvl + 1) * c * 8
        total += block(2 * c, c) + block(c, c)
    return total + spec.channels(0) + 1
