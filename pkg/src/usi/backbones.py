"""Toy members of the four architecture families behind one model interface."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import Tensor, no_grad

FAMILIES = ("mlp", "cnn", "mobile_dw", "tiny_transformer", "tiny_mixer")
SIZES = ("student", "teacher")
PATCH = 4


class ConfigurationError(ValueError):
    pass


class TeacherNotStrongerError(RuntimeError):
    pass


# widths per (family, size); teacher members carry >= 4x the student parameters.
# Convolutional stems downsample 2x immediately so desk-scale runs stay cheap.
ARCH = {
    ("mlp", "student"): {"hidden": 64},
    ("mlp", "teacher"): {"hidden": 256},
    ("cnn", "student"): {"stem": 8, "blocks": ((16, 2), (12, 1))},
    ("cnn", "teacher"): {"stem": 16, "blocks": ((32, 2), (32, 1))},
    ("mobile_dw", "student"): {"stem": 8, "stages": (16, 32)},
    ("mobile_dw", "teacher"): {"stem": 16, "stages": (48, 96)},
    ("tiny_transformer", "student"): {"dim": 32, "hidden": 64, "depth": 2},
    ("tiny_transformer", "teacher"): {"dim": 64, "hidden": 256, "depth": 2},
    ("tiny_mixer", "student"): {"dim": 32, "token_hidden": 32, "channel_hidden": 64, "depth": 2},
    ("tiny_mixer", "teacher"): {"dim": 64, "token_hidden": 64, "channel_hidden": 256, "depth": 2},
}


def conv_bn_relu(c_in, c_out, kernel, stride, pad, rng, groups=1):
    return [nn.Conv2d(c_in, c_out, kernel, rng, stride, pad, groups), nn.BatchNorm2d(c_out), nn.ReLU()]


def _stem(c, width, rng):
    return conv_bn_relu(c, width, 4, 2, 1, rng)


def _cnn(arch, c, k, rng):
    """conv-BN-ReLU stack; (width, stride) blocks use 3x3/s1 or 4x4/s2 kernels."""
    layers = _stem(c, arch["stem"], rng)
    prev = arch["stem"]
    for width, stride in arch["blocks"]:
        if stride == 2:
            layers += conv_bn_relu(prev, width, 4, 2, 1, rng)
        else:
            layers += conv_bn_relu(prev, width, 3, 1, 1, rng)
        prev = width
    return nn.Sequential(*layers, nn.GlobalAvgPool(), nn.Linear(prev, k, rng))


def _mobile(arch, c, size, k, rng):
    """Depthwise then pointwise 1x1 per stage. The depthwise conv halves the
    map with 4x4/s2 while it is at least 4 wide and even, else keeps it with 3x3/s1."""
    layers = _stem(c, arch["stem"], rng)
    prev = arch["stem"]
    size //= 2
    for width in arch["stages"]:
        if size >= 4 and size % 2 == 0:
            layers += conv_bn_relu(prev, prev, 4, 2, 1, rng, groups=prev)
            size //= 2
        else:
            layers += conv_bn_relu(prev, prev, 3, 1, 1, rng, groups=prev)
        layers += conv_bn_relu(prev, width, 1, 1, 0, rng)
        prev = width
    return nn.Sequential(*layers, nn.GlobalAvgPool(), nn.Linear(prev, k, rng))


def _mlp(arch, c, h, w, k, rng):
    hid = arch["hidden"]
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(c * h * w, hid, rng),
        nn.ReLU(),
        nn.Linear(hid, hid, rng),
        nn.ReLU(),
        nn.Linear(hid, k, rng),
    )


def _tokens(h, w):
    if h % PATCH or w % PATCH:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {PATCH}")
    return (h // PATCH) * (w // PATCH)


def _transformer(arch, c, h, w, k, rng, drop_path, seed):
    tokens = _tokens(h, w)
    d = arch["dim"]
    blocks = [
        nn.TransformerBlock(d, arch["hidden"], rng, drop_path, seed + i) for i in range(arch["depth"])
    ]
    return nn.Sequential(
        nn.PatchEmbed(c, PATCH, d, tokens, rng), *blocks, nn.LayerNorm(d), nn.TokenMean(), nn.Linear(d, k, rng)
    )


def _mixer(arch, c, h, w, k, rng, drop_path, seed):
    tokens = _tokens(h, w)
    d = arch["dim"]
    blocks = [
        nn.MixerBlock(tokens, d, arch["token_hidden"], arch["channel_hidden"], rng, drop_path, seed + i)
        for i in range(arch["depth"])
    ]
    return nn.Sequential(
        nn.PatchEmbed(c, PATCH, d, tokens, rng), *blocks, nn.LayerNorm(d), nn.TokenMean(), nn.Linear(d, k, rng)
    )


@dataclass
class Backbone:
    name: str
    family: str
    size: str
    num_classes: int
    image_shape: tuple[int, int, int]
    net: nn.Module
    drop_path: float = 0.0
    frozen: bool = field(default=False)

    @property
    def mode(self) -> str:
        return "train" if self.net.training else "eval"

    def train(self) -> "Backbone":
        if self.frozen:
            raise RuntimeError("teacher backbones are permanently in eval mode")
        self.net.train()
        return self

    def eval(self) -> "Backbone":
        self.net.eval()
        return self

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.shape[1:] != tuple(self.image_shape):
            raise ConfigurationError(f"{self.name} expects images {self.image_shape}, got {x.shape[1:]}")
        return self.net(x)

    __call__ = forward

    def predict(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(images).data

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.net.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.net.named_buffers())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.net.named_parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise KeyError(f"state mismatch for {self.name}: missing {missing}, unexpected {unexpected}")
        for k, target in own.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != target.shape:
                raise ValueError(f"{k}: shape {src.shape} != {target.shape}")
            target[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def model_name(family: str, size: str, num_classes: int, image_shape) -> str:
    c, h, w = image_shape
    return f"{family}-{size}-{c}x{h}x{w}-k{num_classes}"


def parse_model_name(name: str) -> tuple[str, str, int, tuple[int, int, int]]:
    try:
        family, size, shape, k = name.rsplit("-", 3)
        c, h, w = (int(v) for v in shape.split("x"))
        return family, size, int(k.lstrip("k")), (c, h, w)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse model name {name!r}") from exc


def build(
    family: str,
    size: str,
    num_classes: int,
    image_shape=(1, 32, 32),
    seed: int = 0,
    drop_path: float = 0.0,
) -> Backbone:
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if size not in SIZES:
        raise ConfigurationError(f"unknown size {size!r}; expected one of {SIZES}")
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    c, h, w = (int(v) for v in image_shape)
    if family not in ("tiny_transformer", "tiny_mixer") and drop_path:
        raise ConfigurationError("drop_path is only defined for transformer and mixer blocks")
    rng = np.random.default_rng(seed)
    arch = ARCH[family, size]
    if family == "mlp":
        net = _mlp(arch, c, h, w, num_classes, rng)
    elif family == "cnn":
        net = _cnn(arch, c, num_classes, rng)
    elif family == "mobile_dw":
        net = _mobile(arch, c, min(h, w), num_classes, rng)
    elif family == "tiny_transformer":
        net = _transformer(arch, c, h, w, num_classes, rng, drop_path, seed)
    else:
        net = _mixer(arch, c, h, w, num_classes, rng, drop_path, seed)
    name = model_name(family, size, num_classes, (c, h, w))
    return Backbone(name, family, size, num_classes, (c, h, w), net, drop_path)


@dataclass
class TeacherHandle:
    """A frozen, eval-only backbone. Forward passes run on a BN-fused copy."""

    backbone: Backbone
    accuracy_on_val: float
    _fused: Backbone | None = field(default=None, repr=False)

    def logits(self, images: np.ndarray) -> np.ndarray:
        if self._fused is None:
            self._fused = fuse_batchnorm(self.backbone)
        return self._fused.predict(images)

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes


def freeze_as_teacher(model: Backbone, val_accuracy: float) -> TeacherHandle:
    model.eval()
    for p in model.parameters().values():
        p.requires_grad = False
        p.grad = None
    model.frozen = True
    return TeacherHandle(model, float(val_accuracy))


def check_teacher(teacher: TeacherHandle, student_baseline: float | None, allow_weak_teacher: bool = False) -> None:
    """Distillation needs a teacher that outperforms the student baseline."""
    if student_baseline is None or allow_weak_teacher:
        return
    if teacher.accuracy_on_val <= student_baseline:
        raise TeacherNotStrongerError(
            f"teacher accuracy {teacher.accuracy_on_val:.4f} does not exceed "
            f"student baseline {student_baseline:.4f}; set allow_weak_teacher to override"
        )


def _fuse_pair(conv: nn.Conv2d, bn: nn.BatchNorm2d) -> nn.Conv2d:
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    fused = copy.copy(conv)
    w = conv.weight.data * scale.reshape(-1, 1, 1, 1)
    b = conv.bias.data if hasattr(conv, "bias") else np.zeros(w.shape[0])
    fused.weight = nn.Parameter(w)
    fused.weight.requires_grad = conv.weight.requires_grad
    fused.bias = nn.Parameter(bn.beta.data + (b - bn.running_mean) * scale)
    fused.bias.requires_grad = conv.weight.requires_grad
    fused.training = False
    return fused


def _fuse_module(module: nn.Module) -> None:
    for _, child in module.children():
        _fuse_module(child)
    if not isinstance(module, nn.Sequential):
        return
    layers = module.layers()
    out, i = [], 0
    while i < len(layers):
        cur = layers[i]
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(cur, nn.Conv2d) and isinstance(nxt, nn.BatchNorm2d):
            out.append(_fuse_pair(cur, nxt))
            i += 2
        else:
            out.append(cur)
            i += 1
    if len(out) != len(layers):
        module.replace(out)


def fuse_batchnorm(model: Backbone) -> Backbone:
    """Return an eval-mode copy with every conv -> BN pair folded into one conv."""
    if model.mode != "eval":
        raise RuntimeError("fuse_batchnorm needs an eval-mode model")
    fused = copy.deepcopy(model)
    _fuse_module(fused.net)
    fused.net.eval()
    return fused


def activation_elements(model: Backbone) -> int:
    """Elements of every intermediate tensor a single-sample training forward records."""
    from .tensor import Tape

    x = Tensor(np.zeros((1,) + tuple(model.image_shape)))
    was_training = model.mode == "train"
    saved = {k: v.copy() for k, v in model.buffers().items()}
    params = model.parameters().values()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        model.net.eval()
        out = model.net(x)
        tape = Tape.record(out)
        leaves = {id(p) for p in params}
        count = x.size + sum(t.size for t in tape.order if id(t) not in leaves)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        model.net.train(was_training)
        for k, v in model.buffers().items():
            v[...] = saved[k]
    return count
