"""Toy-width networks for the two training phases.

All image inputs/outputs live in [-1, 1].  Roles:

- ``G1``  initial generator, (image at initial_hw, label) -> image at initial_hw
- ``G2``  enhancer, initial_hw image -> full_hw image, bilinear upsample plus
          a zero-initialized residual branch
- ``T``   initial-phase discriminator at initial_hw
- ``D``   enhancing-phase discriminator at full_hw (one extra block)
- ``Duv`` geometry-map predictor, ``Da`` attribute classifier,
          ``Phi`` identity classifier whose penultimate layer is the embedding
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, name_scope, ops
from .autodiff.tensor import ShapeError
from .toydata import DomainSpec

ROLES = ("G1", "G2", "T", "D", "Duv", "Da", "Phi")
SCORE_MARGIN = 1e-9


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResolutionPlan:
    initial_hw: int = 16
    full_hw: int = 32
    channels: int = 3

    def __post_init__(self) -> None:
        if self.full_hw != 2 * self.initial_hw:
            raise ValueError(f"full_hw ({self.full_hw}) must be exactly 2 x initial_hw ({self.initial_hw})")
        if self.initial_hw % 8:
            raise ValueError(f"initial_hw must be a multiple of 8, got {self.initial_hw}")


class Network:
    """Named parameters plus a forward function.

    Parameters are created in a fixed order from the builder's RNG, so a
    seed fully determines the initial weights.
    """

    role = ""

    def __init__(self, name: str, arch: dict, rng: np.random.Generator) -> None:
        self.name = name
        self.arch = dict(arch)
        self.params: dict[str, Tensor] = {}
        self.frozen = False
        self._rng = rng
        self._build()
        del self._rng

    def _build(self) -> None:
        raise NotImplementedError

    # -- parameter helpers --------------------------------------------------

    def _param(self, name: str, shape: Sequence[int], fan_in: int | None = None, zero: bool = False) -> None:
        if zero:
            data = np.zeros(shape)
        else:
            s = np.sqrt(1.0 / fan_in)
            data = self._rng.uniform(-s, s, size=shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def _conv(self, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
        self._param(f"{name}.w", (cout, cin, k, k), cin * k * k, zero)
        self._param(f"{name}.b", (cout,), cin * k * k, zero)

    def _convT(self, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
        self._param(f"{name}.w", (cin, cout, k, k), cout * k * k, zero)
        self._param(f"{name}.b", (cout,), cout * k * k, zero)

    def _linear(self, name: str, nin: int, nout: int) -> None:
        self._param(f"{name}.w", (nin, nout), nin)
        self._param(f"{name}.b", (nout,), nin)

    def _norm(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)

    # -- layer application --------------------------------------------------

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
        w = self.params[f"{name}.w"]
        pad = (w.shape[2] - 1) // 2 if padding is None else padding
        with name_scope(name):
            return ops.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)

    def down(self, name: str, x: Tensor) -> Tensor:
        return self.conv(name, x, stride=2, padding=1)

    def up(self, name: str, x: Tensor) -> Tensor:
        with name_scope(name):
            return ops.conv_transpose2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=2, padding=1)

    def linear(self, name: str, x: Tensor) -> Tensor:
        with name_scope(name):
            return ops.add(ops.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def norm(self, name: str, x: Tensor) -> Tensor:
        with name_scope(name):
            return ops.instance_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    # -- bookkeeping --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: self.params[k] for k in sorted(self.params)}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        """Toggle gradient tracking without changing the frozen status."""
        if flag and self.frozen:
            raise FrozenError(f"{self.name} is frozen")
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_bytes(self) -> bytes:
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    def _check_image(self, x: Tensor, hw: int, channels: int = 3) -> None:
        if x.ndim != 4 or x.shape[1] != channels or x.shape[2:] != (hw, hw):
            raise ShapeError(f"{self.name} expects images of shape (N, {channels}, {hw}, {hw}), got {x.shape}")

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"{type(self).__name__}({self.name!r}, {self.num_parameters()} params, {state})"


SKIP_SCALE = 0.98
HEAD_SCALE = 0.1


def _atanh_skip(x: Tensor) -> Tensor:
    """atanh(SKIP_SCALE * x), so a zero head would make the generator 0.98 * x."""
    u = ops.mul(x, SKIP_SCALE)
    return ops.mul(ops.sub(ops.log(ops.add(u, 1.0)), ops.log(ops.sub(1.0, u))), 0.5)


class InitialGenerator(Network):
    role = "G1"

    def _build(self) -> None:
        a = self.arch
        ch, L = a["channels"], a["label_size"]
        self._conv("in", 3 + L, ch, 3)
        self._norm("in_norm", ch)
        self._conv("down1", ch, 2 * ch, 4)
        self._norm("down1_norm", 2 * ch)
        self._conv("down2", 2 * ch, 4 * ch, 4)
        self._norm("down2_norm", 4 * ch)
        for i in range(a["res_blocks"]):
            self._conv(f"res{i}.conv1", 4 * ch, 4 * ch, 3)
            self._norm(f"res{i}.norm1", 4 * ch)
            self._conv(f"res{i}.conv2", 4 * ch, 4 * ch, 3)
            self._norm(f"res{i}.norm2", 4 * ch)
        self._convT("up1", 4 * ch, 2 * ch, 4)
        self._norm("up1_norm", 2 * ch)
        self._convT("up2", 2 * ch, ch, 4)
        self._norm("up2_norm", ch)
        self._conv("out", ch, 3, 3)
        # small head: starts near the input skip but still label dependent
        for k in ("out.w", "out.b"):
            self.params[k].data *= HEAD_SCALE

    def __call__(self, x: Tensor, c) -> Tensor:
        hw = self.arch["hw"]
        self._check_image(x, hw)
        c = c if isinstance(c, Tensor) else Tensor(c)
        if c.shape != (x.shape[0], self.arch["label_size"]):
            raise ShapeError(f"{self.name}: label batch {c.shape} does not match ({x.shape[0]}, {self.arch['label_size']})")
        with name_scope(self.name):
            cmap = ops.broadcast_to(ops.reshape(c, (c.shape[0], c.shape[1], 1, 1)), (c.shape[0], c.shape[1], hw, hw))
            h = ops.concat([x, cmap], axis=1)
            h = ops.relu(self.norm("in_norm", self.conv("in", h)))
            h = ops.relu(self.norm("down1_norm", self.down("down1", h)))
            h = ops.relu(self.norm("down2_norm", self.down("down2", h)))
            for i in range(self.arch["res_blocks"]):
                r = ops.relu(self.norm(f"res{i}.norm1", self.conv(f"res{i}.conv1", h)))
                r = self.norm(f"res{i}.norm2", self.conv(f"res{i}.conv2", r))
                h = ops.add(h, r)
            h = ops.relu(self.norm("up1_norm", self.up("up1", h)))
            h = ops.relu(self.norm("up2_norm", self.up("up2", h)))
            return ops.tanh(ops.add(_atanh_skip(x), self.conv("out", h)))


class Enhancer(Network):
    """upsample(y) + alpha * r(y).

    r works at the input resolution and ends in a stride-2 transposed conv
    (sub-pixel head) that starts at exactly zero.
    """

    role = "G2"

    def _build(self) -> None:
        ch = self.arch["channels"]
        self._conv("in", 3, ch, 3)
        for i in range(self.arch["res_blocks"]):
            self._conv(f"res{i}.conv1", ch, ch, 3)
            self._conv(f"res{i}.conv2", ch, ch, 3)
        self._convT("out", ch, 3, 4, zero=True)

    def __call__(self, y: Tensor, alpha: float = 1.0) -> Tensor:
        self._check_image(y, self.arch["hw"])
        with name_scope(self.name):
            base = ops.upsample_bilinear(y, 2)
            h = ops.relu(self.conv("in", y))
            for i in range(self.arch["res_blocks"]):
                r = ops.relu(self.conv(f"res{i}.conv1", h))
                h = ops.add(h, self.conv(f"res{i}.conv2", r))
            residual = self.up("out", ops.relu(h))
            if alpha != 1.0:
                residual = ops.mul(residual, alpha)
            return ops.add(base, residual)


class _Trunk(Network):
    """Stride-2 conv blocks with leaky ReLU; shared by T, D, Da and Phi."""

    def _build_trunk(self) -> int:
        a = self.arch
        ch, cin = a["channels"], 3
        for i in range(a["blocks"]):
            cout = ch * 2**i
            self._conv(f"block{i}", cin, cout, 4)
            cin = cout
        side = a["hw"] // 2 ** a["blocks"]
        return cin * side * side

    def trunk(self, x: Tensor) -> Tensor:
        self._check_image(x, self.arch["hw"])
        h = x
        for i in range(self.arch["blocks"]):
            h = ops.leaky_relu(self.down(f"block{i}", h), 0.2)
        return ops.reshape(h, (h.shape[0], -1))


class Discriminator(_Trunk):
    """Scalar realness score per image: probability for vanilla, raw for lsgan."""

    def _build(self) -> None:
        self._linear("head", self._build_trunk(), 1)

    @property
    def role(self) -> str:  # type: ignore[override]
        return self.arch["role"]

    def __call__(self, x: Tensor) -> Tensor:
        with name_scope(self.name):
            score = ops.reshape(self.linear("head", self.trunk(x)), (x.shape[0],))
            if self.arch["family"] == "lsgan":
                return score
            # squeeze into the open interval so saturated logits stay valid probabilities
            return ops.add(ops.mul(ops.sigmoid(score), 1.0 - 2 * SCORE_MARGIN), SCORE_MARGIN)


class AttributeClassifier(_Trunk):
    role = "Da"

    def _build(self) -> None:
        self._linear("head", self._build_trunk(), self.arch["label_size"])

    def __call__(self, x: Tensor) -> Tensor:
        with name_scope(self.name):
            return self.linear("head", self.trunk(x))


EMBED_LOGIT_SCALE = 10.0


class Embedder(_Trunk):
    """Identity classifier; ``embed`` returns the normalized penultimate layer."""

    role = "Phi"

    def _build(self) -> None:
        self._linear("embed", self._build_trunk(), self.arch["embed_dim"])
        self._linear("classes", self.arch["embed_dim"], self.arch["n_classes"])

    def embed(self, x: Tensor) -> Tensor:
        """Unit-length embedding, so distances between images lie in [0, 2]."""
        with name_scope(self.name):
            z = self.linear("embed", self.trunk(x))
            return ops.div(z, ops.reshape(ops.norm(z, axis=1), (z.shape[0], 1)))

    def __call__(self, x: Tensor) -> Tensor:
        # cosine-style identity logits on the scaled unit embedding
        return self.linear("classes", ops.mul(self.embed(x), EMBED_LOGIT_SCALE))


class UVPredictor(Network):
    role = "Duv"

    def _build(self) -> None:
        ch = self.arch["channels"]
        self._conv("in", 3, ch, 3)
        self._conv("down1", ch, 2 * ch, 4)
        self._conv("down2", 2 * ch, 4 * ch, 4)
        self._convT("up1", 4 * ch, 2 * ch, 4)
        self._convT("up2", 2 * ch, ch, 4)
        self._conv("out", ch, 2, 3)

    def __call__(self, x: Tensor) -> Tensor:
        self._check_image(x, self.arch["hw"])
        with name_scope(self.name):
            h = ops.leaky_relu(self.conv("in", x), 0.2)
            h = ops.leaky_relu(self.down("down1", h), 0.2)
            h = ops.leaky_relu(self.down("down2", h), 0.2)
            h = ops.leaky_relu(self.up("up1", h), 0.2)
            h = ops.leaky_relu(self.up("up2", h), 0.2)
            return ops.sigmoid(self.conv("out", h))


# -- builders -----------------------------------------------------------------

DEFAULT_WIDTHS = {"G1": 16, "G2": 16, "T": 32, "D": 16, "Duv": 16, "Da": 32, "Phi": 32}


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build_initial_generator(spec: DomainSpec, plan: ResolutionPlan, rng=0, channels: int = DEFAULT_WIDTHS["G1"], res_blocks: int = 3) -> InitialGenerator:
    arch = {"hw": plan.initial_hw, "label_size": spec.label_size, "channels": channels, "res_blocks": res_blocks}
    return InitialGenerator("G1", arch, _rng(rng))


def build_enhancer(plan: ResolutionPlan, rng=0, channels: int = DEFAULT_WIDTHS["G2"], res_blocks: int = 2) -> Enhancer:
    return Enhancer("G2", {"hw": plan.initial_hw, "channels": channels, "res_blocks": res_blocks}, _rng(rng))


def build_discriminator(
    phase: str, plan: ResolutionPlan, rng=0, family: str = "lsgan", channels: int | None = None
) -> Discriminator:
    if phase not in ("initial", "enhancing"):
        raise ValueError(f"phase must be 'initial' or 'enhancing', got {phase!r}")
    if family not in ("vanilla", "lsgan"):
        raise ValueError(f"unknown objective family {family!r}")
    role = "T" if phase == "initial" else "D"
    channels = DEFAULT_WIDTHS[role] if channels is None else channels
    hw = plan.initial_hw if phase == "initial" else plan.full_hw
    blocks = 3 if phase == "initial" else 4
    arch = {"hw": hw, "blocks": blocks, "channels": channels, "family": family, "role": role}
    return Discriminator(role, arch, _rng(rng))


def build_uv_predictor(plan: ResolutionPlan, rng=0, channels: int = DEFAULT_WIDTHS["Duv"]) -> UVPredictor:
    return UVPredictor("Duv", {"hw": plan.initial_hw, "channels": channels}, _rng(rng))


def build_attribute_classifier(spec: DomainSpec, plan: ResolutionPlan, rng=0, channels: int = DEFAULT_WIDTHS["Da"], name: str = "Da") -> AttributeClassifier:
    arch = {"hw": plan.initial_hw, "blocks": 3, "channels": channels, "label_size": spec.label_size}
    return AttributeClassifier(name, arch, _rng(rng))


def build_embedder(plan: ResolutionPlan, n_classes: int, rng=0, channels: int = DEFAULT_WIDTHS["Phi"], embed_dim: int = 32) -> Embedder:
    arch = {"hw": plan.initial_hw, "blocks": 3, "channels": channels, "embed_dim": embed_dim, "n_classes": n_classes}
    return Embedder("Phi", arch, _rng(rng))


NETWORK_TYPES = {
    "InitialGenerator": InitialGenerator,
    "Enhancer": Enhancer,
    "Discriminator": Discriminator,
    "AttributeClassifier": AttributeClassifier,
    "Embedder": Embedder,
    "UVPredictor": UVPredictor,
}


def describe(net: Network) -> dict:
    """Architecture descriptor from which ``rebuild`` recreates the network."""
    return {"type": type(net).__name__, "name": net.name, "arch": net.arch, "frozen": net.frozen}


def rebuild(desc: dict) -> Network:
    cls = NETWORK_TYPES[desc["type"]]
    net = cls(desc["name"], desc["arch"], np.random.default_rng(0))
    if desc.get("frozen"):
        net.freeze()
    return net


# -- forward helpers ----------------------------------------------------------


def downsample(x: Tensor) -> Tensor:
    """2x2 average pooling, full_hw -> initial_hw."""
    return ops.avg_pool2d(x, 2)


def enhanced_forward(G1: InitialGenerator, G2: Enhancer, x: Tensor, c, alpha: float = 1.0) -> Tensor:
    """G(x, c) = G2(G1(downsample(x), c)) for x at full resolution."""
    full = 2 * G1.arch["hw"]
    if x.ndim != 4 or x.shape[2:] != (full, full):
        raise ShapeError(f"enhanced generator expects (N, 3, {full}, {full}) input, got {x.shape}")
    return G2(G1(downsample(x), c), alpha=alpha)


def embed(phi: Embedder, x: Tensor) -> Tensor:
    return phi.embed(x)


def predict_uv(duv: UVPredictor, x: Tensor) -> Tensor:
    return duv(x)


def classify_attrs(da: AttributeClassifier, x: Tensor, spec: DomainSpec) -> list[Tensor]:
    """Logits split per one-hot group and per binary flag."""
    logits = da(x)
    if logits.shape[1] != spec.label_size:
        raise ShapeError(f"{da.name} emits {logits.shape[1]} logits but {spec.describe()} needs {spec.label_size}")
    heads = [ops.getitem(logits, (slice(None), sl)) for sl in spec.group_slices()]
    heads += [ops.getitem(logits, (slice(None), slice(i, i + 1))) for i in spec.flag_indices()]
    return heads


def predict_labels(da: AttributeClassifier, x: Tensor, spec: DomainSpec) -> np.ndarray:
    """Hard label predictions (argmax per group, threshold 0 per flag)."""
    logits = da(x).data
    out = np.zeros_like(logits)
    for sl in spec.group_slices():
        out[np.arange(len(logits)), sl.start + np.argmax(logits[:, sl], axis=1)] = 1.0
    for i in spec.flag_indices():
        out[:, i] = (logits[:, i] > 0).astype(np.float64)
    return out
