"""Multi-exit convolutional classifiers.

A model is a backbone (flat list of layers; residual blocks count as one
entry) plus a list of classifier heads. Each head attaches after a
backbone layer; the last head is the network's own output classifier and
always attaches after the final backbone layer. Internal heads use a
learnable mixed max-average pooling before their linear classifier, the
final head uses global average pooling.

Exit placement is driven by multiply-accumulate counts: internal heads
go at the eligible attach points whose cumulative compute fraction is
closest to the requested targets (ties resolve to the later layer, so a
free layer after a costly one absorbs the exit).
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from .nn.layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    ShapeError,
    build_layer,
)

CHECKPOINT_FORMAT_VERSION = 1

DEFAULT_EXIT_FRACTIONS = (0.15, 0.30, 0.45, 0.60, 0.75, 0.90)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class MixedPoolHead(Layer):
    """sigma(m)*maxpool + (1-sigma(m))*avgpool to a small grid, then linear.

    The flattened pooled activations are the exit's representation; they
    are cached on every forward and reachable via `last_repr`.
    """

    kind = "mixed-pool-head"

    def __init__(self, in_channels, in_hw, num_classes, target_hw=4,
                 rng=None, dtype=np.float32):
        if in_hw % target_hw != 0:
            raise ShapeError(
                f"head input side {in_hw} not divisible by pool target {target_hw}")
        self.in_channels = in_channels
        self.in_hw = in_hw
        self.num_classes = num_classes
        self.target_hw = target_hw
        k = in_hw // target_hw
        self.maxpool = MaxPool2d(k)
        self.avgpool = AvgPool2d(k)
        self.flatten = Flatten()
        self.mix = np.zeros(1, dtype=dtype)
        self.fc = Linear(in_channels * target_hw * target_hw, num_classes,
                         rng=rng, dtype=dtype)
        self._grads = {}
        self._cache = None
        self.last_repr = None

    @property
    def repr_dim(self):
        return self.in_channels * self.target_hw * self.target_hw

    def params(self):
        out = {"mix": self.mix}
        for name, p in self.fc.params().items():
            out[f"fc.{name}"] = p
        return out

    def grads(self):
        out = dict(self._grads)
        for name, g in self.fc.grads().items():
            out[f"fc.{name}"] = g
        return out

    def out_shape(self, in_shape):
        if in_shape != (self.in_channels, self.in_hw, self.in_hw):
            raise ShapeError(
                f"head expects {(self.in_channels, self.in_hw, self.in_hw)}, "
                f"got {in_shape}")
        return (self.num_classes,)

    def macs(self, in_shape):
        return self.fc.macs((self.repr_dim,))

    def forward(self, x, train=False):
        mx = self.maxpool.forward(x, train)
        av = self.avgpool.forward(x, train)
        s = _sigmoid(self.mix[0])
        z = s * mx + (1.0 - s) * av
        f = self.flatten.forward(z, train)
        self.last_repr = f
        y = self.fc.forward(f, train)
        if train:
            self._cache = (mx, av, s)
        return y

    def backward(self, grad_out):
        mx, av, s = self._require_cache()
        df = self.fc.backward(grad_out)
        dz = self.flatten.backward(df)
        dm = float(np.sum(dz * (mx - av))) * s * (1.0 - s)
        self._grads = {"mix": np.array([dm], dtype=self.mix.dtype)}
        gx = self.maxpool.backward(s * dz) + self.avgpool.backward((1.0 - s) * dz)
        self._cache = None
        return gx

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "in_hw": self.in_hw, "num_classes": self.num_classes,
                "target_hw": self.target_hw}


class GlobalPoolHead(Layer):
    """Global average pool + linear: the network's own output classifier."""

    kind = "global-pool-head"

    def __init__(self, in_channels, in_hw, num_classes, rng=None,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.in_hw = in_hw
        self.num_classes = num_classes
        self.pool = AvgPool2d(in_hw)
        self.flatten = Flatten()
        self.fc = Linear(in_channels, num_classes, rng=rng, dtype=dtype)
        self.last_repr = None

    @property
    def repr_dim(self):
        return self.in_channels

    def params(self):
        return {f"fc.{name}": p for name, p in self.fc.params().items()}

    def grads(self):
        return {f"fc.{name}": g for name, g in self.fc.grads().items()}

    def out_shape(self, in_shape):
        if in_shape != (self.in_channels, self.in_hw, self.in_hw):
            raise ShapeError(
                f"head expects {(self.in_channels, self.in_hw, self.in_hw)}, "
                f"got {in_shape}")
        return (self.num_classes,)

    def macs(self, in_shape):
        return self.fc.macs((self.in_channels,))

    def forward(self, x, train=False):
        f = self.flatten.forward(self.pool.forward(x, train), train)
        self.last_repr = f
        return self.fc.forward(f, train)

    def backward(self, grad_out):
        df = self.fc.backward(grad_out)
        return self.pool.backward(self.flatten.backward(df))

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "in_hw": self.in_hw, "num_classes": self.num_classes}


_HEAD_KINDS = {
    MixedPoolHead.kind: MixedPoolHead,
    GlobalPoolHead.kind: GlobalPoolHead,
}


def build_head(spec: dict, rng=None, dtype=np.float32):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _HEAD_KINDS:
        raise ValueError(f"unknown head kind: {kind!r}")
    return _HEAD_KINDS[kind](rng=rng, dtype=dtype, **spec)


def place_exits(layer_macs, fractions, eligible=None):
    """Pick one attach index per compute-fraction target.

    `layer_macs[i]` is the cost of backbone layer i; the cumulative
    fraction after layer i is sum(layer_macs[:i+1]) / sum(layer_macs).
    For each target the closest eligible index wins, ties going to the
    later index. Duplicates collapse; the result is strictly increasing.
    """
    fractions = list(fractions)
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise ValueError(f"target fractions must lie in (0, 1): {fractions}")
    if fractions != sorted(fractions):
        raise ValueError(f"target fractions must be sorted: {fractions}")
    layer_macs = np.asarray(layer_macs, dtype=np.float64)
    total = layer_macs.sum()
    if total <= 0:
        raise ValueError("backbone has no compute to place exits against")
    cum = np.cumsum(layer_macs) / total
    if eligible is None:
        eligible = range(len(layer_macs))
    eligible = sorted(eligible)
    if not eligible:
        raise ValueError("no eligible attach points for exits")
    picks = []
    for f in fractions:
        best, best_dist = None, np.inf
        for i in eligible:
            # ascending scan with <= lets the later index win exact ties
            # (a free layer right after a costly one absorbs the exit)
            d = abs(cum[i] - f)
            if d <= best_dist + 1e-12:
                best, best_dist = i, min(d, best_dist)
        picks.append(best)
    unique = sorted(set(picks))
    if len(unique) < len(picks):
        warnings.warn(
            f"{len(picks) - len(unique)} exit target(s) collapsed onto an "
            "already-used layer; keeping one exit per layer", stacklevel=2)
    return unique


class MultiExitModel:
    """Backbone + exit heads with explicit multi-head backward."""

    def __init__(self, backbone, heads, attach, input_shape, num_classes,
                 arch_name="custom"):
        if len(heads) != len(attach):
            raise ValueError("one attach index per head required")
        if list(attach) != sorted(attach):
            raise ValueError(f"attach indices must be non-decreasing: {attach}")
        if attach[-1] != len(backbone) - 1:
            raise ValueError("final head must attach after the last backbone layer")
        self.backbone = list(backbone)
        self.heads = list(heads)
        self.attach = list(attach)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch_name = arch_name
        self._validate_shapes()
        costs = self.exit_cost_fractions()
        if any(b <= a for a, b in zip(costs, costs[1:])):
            raise ValueError(f"exit cost fractions not strictly increasing: {costs}")
        if costs[-1] != 1.0:
            raise ValueError(f"final exit must cost exactly 1.0, got {costs[-1]}")

    def _validate_shapes(self):
        shapes = []
        shape = self.input_shape
        for layer in self.backbone:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        self._backbone_shapes = shapes
        for head, at in zip(self.heads, self.attach):
            out = head.out_shape(shapes[at])
            if out != (self.num_classes,):
                raise ShapeError(
                    f"head at layer {at} produces {out}, expected "
                    f"({self.num_classes},)")

    @property
    def num_exits(self):
        return len(self.heads)

    # ---- parameter plumbing -------------------------------------------

    def named_params(self):
        out = {}
        for i, layer in enumerate(self.backbone):
            for name, p in layer.params().items():
                out[f"backbone.{i}.{name}"] = p
        for h, head in enumerate(self.heads):
            for name, p in head.params().items():
                out[f"head.{h}.{name}"] = p
        return out

    def named_grads(self):
        out = {}
        for i, layer in enumerate(self.backbone):
            for name, g in layer.grads().items():
                out[f"backbone.{i}.{name}"] = g
        for h, head in enumerate(self.heads):
            for name, g in head.grads().items():
                out[f"head.{h}.{name}"] = g
        return out

    def named_buffers(self):
        out = {}
        for i, layer in enumerate(self.backbone):
            for name, b in layer.buffers().items():
                out[f"backbone.{i}.{name}"] = b
        for h, head in enumerate(self.heads):
            for name, b in head.buffers().items():
                out[f"head.{h}.{name}"] = b
        return out

    def bn_layers(self):
        """All batch-norm layers, including those inside residual blocks."""
        found = []
        for layer in self.backbone:
            if isinstance(layer, BatchNorm2d):
                found.append(layer)
            elif isinstance(layer, ResidualBlock):
                for child in layer._children().values():
                    if isinstance(child, BatchNorm2d):
                        found.append(child)
        return found

    # ---- compute accounting -------------------------------------------

    def layer_macs(self):
        macs = []
        shape = self.input_shape
        for layer in self.backbone:
            macs.append(layer.macs(shape))
            shape = layer.out_shape(shape)
        return macs

    def head_macs(self):
        return [head.macs(self._backbone_shapes[at])
                for head, at in zip(self.heads, self.attach)]

    def exit_cost_fractions(self):
        """Compute fraction spent when inference stops at each exit.

        The denominator is the full-network cost: whole backbone plus
        the final head. Earlier exits pay the backbone prefix up to
        their attach layer plus their own head.
        """
        lm = self.layer_macs()
        hm = self.head_macs()
        cum = np.cumsum(lm)
        full = cum[-1] + hm[-1]
        return [float((cum[at] + h) / full)
                for at, h in zip(self.attach, hm)]

    # ---- forward / backward -------------------------------------------

    def forward_all_exits(self, x, train=False, need_repr=False):
        """Logits from every exit; optionally the pooled representations.

        Returns a list of (N, num_classes) arrays, one per exit. With
        `need_repr`, returns (logits_list, reprs_list) instead, where
        reprs_list[i] is the (N, repr_dim_i) flattened pooled features
        feeding exit i's linear classifier.
        """
        logits = [None] * self.num_exits
        h = x
        head_pos = 0
        for i, layer in enumerate(self.backbone):
            h = layer.forward(h, train)
            while head_pos < self.num_exits and self.attach[head_pos] == i:
                logits[head_pos] = self.heads[head_pos].forward(h, train)
                head_pos += 1
        if need_repr:
            return logits, [head.last_repr for head in self.heads]
        return logits

    def backward(self, grad_logits):
        """Backprop per-exit logit grads; grads land in named_grads()."""
        if len(grad_logits) != self.num_exits:
            raise ValueError(
                f"expected {self.num_exits} gradient arrays, got {len(grad_logits)}")
        head_pos = self.num_exits - 1
        g = None
        for i in range(len(self.backbone) - 1, -1, -1):
            while head_pos >= 0 and self.attach[head_pos] == i:
                gh = self.heads[head_pos].backward(grad_logits[head_pos])
                g = gh if g is None else g + gh
                head_pos -= 1
            g = self.backbone[i].backward(g)
        return g

    # ---- structure ----------------------------------------------------

    def arch_spec(self):
        return {
            "name": self.arch_name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "backbone": [layer.spec() for layer in self.backbone],
            "heads": [head.spec() for head in self.heads],
            "attach": list(self.attach),
        }

    @classmethod
    def from_arch_spec(cls, spec, rng=None, dtype=np.float32):
        backbone = [build_layer(s, rng=rng, dtype=dtype)
                    for s in spec["backbone"]]
        heads = [build_head(s, rng=rng, dtype=dtype) for s in spec["heads"]]
        return cls(backbone, heads, spec["attach"],
                   tuple(spec["input_shape"]), spec["num_classes"],
                   arch_name=spec.get("name", "custom"))


# ---- builders ---------------------------------------------------------


def _conv_unit(cin, cout, rng, dtype):
    return [Conv2d(cin, cout, 3, padding=1, rng=rng, dtype=dtype),
            BatchNorm2d(cout, dtype=dtype),
            ReLU()]


def _attach_heads(backbone, eligible, input_shape, num_classes, fractions,
                  rng, dtype, arch_name):
    shapes = []
    shape = input_shape
    macs = []
    for layer in backbone:
        macs.append(layer.macs(shape))
        shape = layer.out_shape(shape)
        shapes.append(shape)
    attach_internal = place_exits(macs, fractions, eligible=eligible)
    last = len(backbone) - 1
    attach_internal = [a for a in attach_internal if a != last]
    if not attach_internal:
        raise ValueError(
            "backbone too shallow: every exit target lands on the final layer")
    heads = []
    for at in attach_internal:
        c, hw, _ = shapes[at]
        heads.append(MixedPoolHead(c, hw, num_classes, rng=rng, dtype=dtype))
    c, hw, _ = shapes[last]
    heads.append(GlobalPoolHead(c, hw, num_classes, rng=rng, dtype=dtype))
    return MultiExitModel(backbone, heads, attach_internal + [last],
                          input_shape, num_classes, arch_name=arch_name)


def build_convnet8(num_classes=10, input_shape=(3, 32, 32), rng=None,
                   fractions=DEFAULT_EXIT_FRACTIONS, dtype=np.float32):
    """8-conv VGG-style backbone: 16,16,16 / pool / 32,32,32 / pool / 64,64."""
    if rng is None:
        rng = np.random.default_rng(0)
    b = []
    b += _conv_unit(input_shape[0], 16, rng, dtype)
    b += _conv_unit(16, 16, rng, dtype)
    b += _conv_unit(16, 16, rng, dtype)
    b.append(MaxPool2d(2))
    b += _conv_unit(16, 32, rng, dtype)
    b += _conv_unit(32, 32, rng, dtype)
    b += _conv_unit(32, 32, rng, dtype)
    b.append(MaxPool2d(2))
    b += _conv_unit(32, 64, rng, dtype)
    b += _conv_unit(64, 64, rng, dtype)
    # attach only where a unit is complete: after a relu or a pool
    eligible = [i for i, layer in enumerate(b)
                if isinstance(layer, (ReLU, MaxPool2d))]
    return _attach_heads(b, eligible, input_shape, num_classes, fractions,
                         rng, dtype, "convnet8")


def build_resnet8(num_classes=10, input_shape=(3, 32, 32), rng=None,
                  fractions=DEFAULT_EXIT_FRACTIONS, dtype=np.float32):
    """Stem + three residual blocks with pooling between stages."""
    if rng is None:
        rng = np.random.default_rng(0)
    b = []
    b += _conv_unit(input_shape[0], 16, rng, dtype)
    b.append(ResidualBlock(16, 16, rng=rng, dtype=dtype))
    b.append(MaxPool2d(2))
    b.append(ResidualBlock(16, 32, rng=rng, dtype=dtype))
    b.append(MaxPool2d(2))
    b.append(ResidualBlock(32, 64, rng=rng, dtype=dtype))
    eligible = [i for i, layer in enumerate(b)
                if isinstance(layer, (ReLU, MaxPool2d, ResidualBlock))]
    return _attach_heads(b, eligible, input_shape, num_classes, fractions,
                         rng, dtype, "resnet8")


ARCHITECTURES = {
    "convnet8": build_convnet8,
    "resnet8": build_resnet8,
}


def build_model(arch, num_classes=10, input_shape=(3, 32, 32), rng=None,
                fractions=DEFAULT_EXIT_FRACTIONS, dtype=np.float32):
    if arch not in ARCHITECTURES:
        raise ValueError(
            f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](num_classes=num_classes,
                               input_shape=input_shape, rng=rng,
                               fractions=fractions, dtype=dtype)


# ---- checkpoints ------------------------------------------------------


def save_checkpoint(model: MultiExitModel, path, meta=None):
    """Write arch spec + every param/buffer to one .npz; exact round-trip."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.arch_spec(),
        "cost_table": model.exit_cost_fractions(),
        "meta": dict(meta or {}),
    }
    arrays = {"__header__": np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, p in model.named_params().items():
        arrays[f"param/{name}"] = p
    for name, b in model.named_buffers().items():
        arrays[f"buffer/{name}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild a model from `save_checkpoint` output. Strict: every stored
    array must land somewhere and every model array must be covered."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format: {header.get('format_version')}")
        model = MultiExitModel.from_arch_spec(header["arch"], dtype=dtype)
        params = model.named_params()
        buffers = model.named_buffers()
        seen = set()
        for key in z.files:
            if key == "__header__":
                continue
            group, _, name = key.partition("/")
            target = params if group == "param" else \
                buffers if group == "buffer" else None
            if target is None or name not in target:
                raise ValueError(f"checkpoint key {key!r} has no destination")
            arr = z[key]
            if target[name].shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {key}: model {target[name].shape}, "
                    f"file {arr.shape}")
            target[name][...] = arr.astype(target[name].dtype, copy=False)
            seen.add(key)
    missing = ({f"param/{n}" for n in params} |
               {f"buffer/{n}" for n in buffers}) - seen
    if missing:
        raise ValueError(f"checkpoint missing arrays: {sorted(missing)}")
    return model, header["meta"]
