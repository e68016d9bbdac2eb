"""Equivariant network layers over the 8-orientation dihedral group.

Every layer maps group feature maps [N, C, G, H, W] (G = 8, or 1 for the
plain-CNN twin used in ablations) to group feature maps, except the input
layer (planar image in) and the output pool (planar map out).  Convolution
layers store ONE canonical kernel per output channel; its transformed uses
are materialized on demand into a planar filter bank, so the whole stack
runs on ndtensor.correlate2d.

Each layer implements `forward(x, train: bool)` and `backward(dout)`;
caches for the backward pass are recorded only on train-mode forwards.
A layer instance is not safe for concurrent mutation; frozen inference is.
"""

from __future__ import annotations

import numpy as np

from . import dihedral as dh
from . import ndtensor as nd
from .errors import ShapeError, StateError


class Layer:
    """Base: named parameters/gradients/buffers, optionally nested children."""

    kind = "layer"
    _params: tuple[str, ...] = ()
    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.children: dict[str, Layer] = {}
        self._cache = None

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward")
        return self._cache

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [(n, getattr(self, n)) for n in self._params if getattr(self, n) is not None]
        for cname, child in self.children.items():
            items += [(f"{cname}.{n}", a) for n, a in child.param_items()]
        return items

    def grad_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for n in self._params:
            if getattr(self, n) is None:
                continue
            g = getattr(self, "d_" + n, None)
            if g is None:
                raise StateError(f"gradient for {n} not computed; call backward first")
            items.append((n, g))
        for cname, child in self.children.items():
            items += [(f"{cname}.{n}", a) for n, a in child.grad_items()]
        return items

    def buffer_items(self) -> list[tuple[str, np.ndarray]]:
        items = [(n, getattr(self, n)) for n in self._buffers]
        for cname, child in self.children.items():
            items += [(f"{cname}.{n}", a) for n, a in child.buffer_items()]
        return items


def _check_group_size(group_size: int) -> int:
    if group_size not in (1, 8):
        raise ValueError(f"group_size must be 1 or 8, got {group_size}")
    return group_size


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class GroupInputConv(Layer):
    """Lifting convolution: planar image -> group feature map.

    The single stored kernel is correlated in all `group_size` transformed
    versions; orientation plane g of the output is the correlation of the
    input with the g-transformed kernel.
    """

    kind = "group_input_conv"
    _params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 group_size=8, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.group_size = _check_group_size(group_size)
        self.spec = nd.ConvSpec(kernel_size, stride, padding)
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype)
        else:
            self.weight = he_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None

    def _bank(self) -> np.ndarray:
        if self.group_size == 1:
            return self.weight
        planes = [dh.transform_kernel_z2(g, self.weight) for g in dh.ELEMENTS]
        co, ci, k, _ = self.weight.shape
        return np.stack(planes, axis=1).reshape(co * 8, ci, k, k)

    def forward(self, x, train: bool = False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected [N,{self.in_channels},H,W] input, got {x.shape}")
        bank = self._bank()
        out, cols = nd.correlate2d_with_cols(x, bank, self.spec)
        n, _, ho, wo = out.shape
        out = out.reshape(n, self.out_channels, self.group_size, ho, wo)
        if self.bias is not None:
            out += self.bias[None, :, None, None, None]
        if train:
            self._cache = (cols, x.shape, bank)
        return out

    def backward(self, dout):
        cols, x_shape, bank = self._need_cache()
        n, co, g, ho, wo = dout.shape
        if self.bias is not None:
            self.d_bias = dout.sum(axis=(0, 2, 3, 4))
        dflat = np.ascontiguousarray(dout).reshape(n, co * g, ho, wo)
        dx, dbank = nd.correlate2d_vjp_from_cols(cols, x_shape, bank, dflat, self.spec)
        if self.group_size == 1:
            self.d_weight = dbank
        else:
            k = self.weight.shape[-1]
            dbank = dbank.reshape(co, 8, self.in_channels, k, k)
            self.d_weight = sum(
                dh.transform_kernel_z2(dh.inverse(gel), dbank[:, gel.index])
                for gel in dh.ELEMENTS
            )
        return dx


class GroupHiddenConv(Layer):
    """Group-to-group convolution: one kernel per output channel, defined on
    (input channel, orientation, spatial offset); applied through all
    transformed versions at once as a single planar correlation."""

    kind = "group_hidden_conv"
    _params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1,
                 group_size=8, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.group_size = _check_group_size(group_size)
        self.spec = nd.ConvSpec(kernel_size, stride, padding)
        shape = (out_channels, in_channels, group_size, kernel_size, kernel_size)
        fan_in = in_channels * group_size * kernel_size * kernel_size
        self.weight = np.zeros(shape, dtype=dtype) if rng is None else he_init(rng, shape, fan_in, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None

    def _bank(self) -> np.ndarray:
        co, ci, g, k, _ = self.weight.shape
        if self.group_size == 1:
            return self.weight.reshape(co, ci, k, k)
        banks = [dh.transform_kernel_g(gel, self.weight) for gel in dh.ELEMENTS]
        # [co, 8(out), ci, 8(in), k, k] -> planar [co*8, ci*8, k, k]
        return np.stack(banks, axis=1).reshape(co * 8, ci * 8, k, k)

    def forward(self, x, train: bool = False):
        if x.ndim != 5 or x.shape[1] != self.in_channels or x.shape[2] != self.group_size:
            raise ShapeError(
                f"expected [N,{self.in_channels},{self.group_size},H,W] input, got {x.shape}"
            )
        n, ci, g, h, w = x.shape
        xflat = np.ascontiguousarray(x).reshape(n, ci * g, h, w)
        bank = self._bank()
        out, cols = nd.correlate2d_with_cols(xflat, bank, self.spec)
        ho, wo = out.shape[-2:]
        out = out.reshape(n, self.out_channels, self.group_size, ho, wo)
        if self.bias is not None:
            out += self.bias[None, :, None, None, None]
        if train:
            self._cache = (cols, xflat.shape, bank, x.shape)
        return out

    def backward(self, dout):
        cols, flat_shape, bank, xshape = self._need_cache()
        n, co, g, ho, wo = dout.shape
        if self.bias is not None:
            self.d_bias = dout.sum(axis=(0, 2, 3, 4))
        dflat = np.ascontiguousarray(dout).reshape(n, co * g, ho, wo)
        dxflat, dbank = nd.correlate2d_vjp_from_cols(cols, flat_shape, bank, dflat, self.spec)
        if self.group_size == 1:
            self.d_weight = dbank.reshape(self.weight.shape)
        else:
            ci, k = self.in_channels, self.weight.shape[-1]
            dbank = dbank.reshape(co, 8, ci, 8, k, k)
            self.d_weight = sum(
                dh.transform_kernel_g(dh.inverse(gel), dbank[:, gel.index])
                for gel in dh.ELEMENTS
            )
        return dxflat.reshape(xshape)


class GroupBatchNorm(Layer):
    """Batch norm with statistics pooled over batch, orientation and space.

    Pooling over the orientation axis is what keeps normalization
    equivariant: the statistics are invariant under any input transform.
    """

    kind = "group_batchnorm"
    _params = ("gamma", "beta")
    _buffers = ("running_mean", "running_var", "num_updates")

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_updates = np.zeros(1, dtype=dtype)

    def forward(self, x, train: bool = False):
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"expected [N,{self.channels},G,H,W], got {x.shape}")
        axes = (0, 2, 3, 4)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean
            self.running_var *= 1.0 - m
            self.running_var += m * var
            self.num_updates += 1
            self._cache = (xhat, inv_std)
        else:
            if self.num_updates[0] == 0:
                raise StateError("batch norm evaluated before any training step populated its statistics")
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        return self.gamma[None, :, None, None, None] * xhat + self.beta[None, :, None, None, None]

    def backward(self, dout):
        xhat, inv_std = self._need_cache()
        axes = (0, 2, 3, 4)
        m = float(np.prod([dout.shape[a] for a in axes]))
        self.d_gamma = (dout * xhat).sum(axis=axes)
        self.d_beta = dout.sum(axis=axes)
        dxhat = dout * self.gamma[None, :, None, None, None]
        s1 = dxhat.sum(axis=axes)[None, :, None, None, None]
        s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None, None]
        return (inv_std[None, :, None, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class GroupReLU(Layer):
    kind = "group_relu"

    def forward(self, x, train: bool = False):
        out = nd.relu(x)
        if train:
            self._cache = x > 0
        return out

    def backward(self, dout):
        mask = self._need_cache()
        return dout * mask


class GroupUpsample(Layer):
    """Doubles spatial resolution of each orientation plane independently.

    `nearest` commutes exactly with every group action; `bilinear` is kept
    for completeness and is only approximately equivariant at the border.
    """

    kind = "group_upsample"

    def __init__(self, mode="nearest"):
        super().__init__()
        if mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.mode = mode

    def forward(self, x, train: bool = False):
        if self.mode == "nearest":
            return nd.upsample_nearest2x(x)
        return nd.upsample_bilinear2x(x)

    def backward(self, dout):
        if self.mode == "nearest":
            return nd.upsample_nearest2x_vjp(dout)
        return nd.upsample_bilinear2x_vjp(dout)


class GroupSkip(Layer):
    """Fuses encoder and decoder group features orientation-by-orientation."""

    kind = "group_skip"

    def __init__(self, mode="add"):
        super().__init__()
        if mode not in ("add", "concat"):
            raise ValueError(f"unknown skip mode {mode!r}")
        self.mode = mode
        self._split = None

    def forward(self, a, b, train: bool = False):
        if self.mode == "add":
            return nd.add(a, b)
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(f"skip concat mismatch: {a.shape} vs {b.shape}")
        self._split = a.shape[1]
        return nd.concat([a, b], axis=1)

    def backward(self, dout):
        if self.mode == "add":
            return dout, dout
        if self._split is None:
            raise StateError("skip concat backward called without a forward")
        return dout[:, : self._split], dout[:, self._split :]


class GroupDownsample(Layer):
    """Halves resolution via a hidden conv: stride 2, or stride 1 + 2x2 mean pool.

    The pooled variant commutes exactly with all eight group actions on even
    square grids; the strided variant does not commute with center rotations
    and its discrepancy is reported by the verification tools instead.
    """

    kind = "group_downsample"

    def __init__(self, in_channels, out_channels, method="conv_then_avgpool",
                 group_size=8, rng=None, dtype=np.float64):
        super().__init__()
        if method not in ("strided_conv", "conv_then_avgpool"):
            raise ValueError(f"unknown downsample method {method!r}")
        self.method = method
        stride = 2 if method == "strided_conv" else 1
        self.conv = GroupHiddenConv(in_channels, out_channels, 3, stride, 1,
                                    group_size=group_size, rng=rng, dtype=dtype)
        self.children = {"conv": self.conv}

    def forward(self, x, train: bool = False):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {x.shape}")
        out = self.conv.forward(x, train)
        if self.method == "conv_then_avgpool":
            out = nd.avgpool2x2(out)
        return out

    def backward(self, dout):
        if self.method == "conv_then_avgpool":
            dout = nd.avgpool2x2_vjp(dout)
        return self.conv.backward(dout)


class GroupOutputPool(Layer):
    """Orientation average: group feature map -> planar map, out = mean over G.

    This is the step that returns predictions to the pixel grid while
    preserving equivariance: pooling a transformed feature map equals
    transforming the pooled planar map.
    """

    kind = "group_output_pool"

    def __init__(self, group_size=8):
        super().__init__()
        self.group_size = _check_group_size(group_size)

    def forward(self, x, train: bool = False):
        if x.ndim != 5 or x.shape[2] != self.group_size:
            raise ShapeError(f"expected [N,C,{self.group_size},H,W], got {x.shape}")
        if self.group_size == 1:
            return x[:, :, 0].copy()
        # balanced pairwise sum: exact for constant orientation fibers
        pairs = x[:, :, 0::2] + x[:, :, 1::2]
        quads = pairs[:, :, 0::2] + pairs[:, :, 1::2]
        return (quads[:, :, 0] + quads[:, :, 1]) * x.dtype.type(0.125)

    def backward(self, dout):
        g = self.group_size
        return np.repeat(dout[:, :, None], g, axis=2) / dout.dtype.type(g)


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn plus identity (or 1x1 conv) shortcut, then relu."""

    kind = "res_block"

    def __init__(self, in_channels, out_channels, group_size=8, rng=None, dtype=np.float64):
        super().__init__()
        self.conv1 = GroupHiddenConv(in_channels, out_channels, 3, 1, 1,
                                     group_size=group_size, rng=rng, dtype=dtype)
        self.bn1 = GroupBatchNorm(out_channels, dtype=dtype)
        self.relu1 = GroupReLU()
        self.conv2 = GroupHiddenConv(out_channels, out_channels, 3, 1, 1,
                                     group_size=group_size, rng=rng, dtype=dtype)
        self.bn2 = GroupBatchNorm(out_channels, dtype=dtype)
        self.relu_out = GroupReLU()
        self.shortcut = None
        if in_channels != out_channels:
            self.shortcut = GroupHiddenConv(in_channels, out_channels, 1, 1, 0,
                                            group_size=group_size, bias=False, rng=rng, dtype=dtype)
        self.children = {
            n: l
            for n, l in (
                ("conv1", self.conv1), ("bn1", self.bn1), ("relu1", self.relu1),
                ("conv2", self.conv2), ("bn2", self.bn2),
                ("relu_out", self.relu_out), ("shortcut", self.shortcut),
            )
            if l is not None
        }

    def forward(self, x, train: bool = False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.relu_out.forward(h + s, train)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dh = self.bn2.backward(d)
        dh = self.conv2.backward(dh)
        dh = self.relu1.backward(dh)
        dh = self.bn1.backward(dh)
        dx = self.conv1.backward(dh)
        ds = d if self.shortcut is None else self.shortcut.backward(d)
        return dx + ds
