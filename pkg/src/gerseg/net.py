"""Network assembly: residual encoder-decoder built from group layers.

`group` mode uses 8-orientation layers throughout and ends with the
orientation-average pool; `regular` mode runs the identical topology with
orientation-axis length 1, i.e. a plain residual U-Net, which is the
ablation baseline.  Widths can be scaled (1/sqrt(8) on the group net
matches stored-parameter counts against the regular twin at scale 1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import glayers as gl
from .errors import CheckpointError, ConfigError, ShapeError

SKIP_MODES = ("add", "concat")
DOWNSAMPLE_METHODS = ("conv_then_avgpool", "strided_conv")
UPSAMPLE_MODES = ("nearest", "bilinear")
GROUP_MODES = ("group", "regular")


@dataclass(frozen=True)
class NetConfig:
    base_width: int = 8
    stages: int = 4
    blocks_per_stage: int = 2
    skip_mode: str = "add"
    downsample: str = "conv_then_avgpool"
    upsample_mode: str = "nearest"
    group_mode: str = "group"
    n_classes: int = 2
    width_scale: float = 1.0
    in_channels: int = 1

    def __post_init__(self):
        if self.base_width < 1 or self.stages < 1 or self.blocks_per_stage < 1:
            raise ConfigError("base_width, stages and blocks_per_stage must be positive")
        if self.n_classes < 1 or self.in_channels < 1:
            raise ConfigError("n_classes and in_channels must be positive")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}")
        if self.downsample not in DOWNSAMPLE_METHODS:
            raise ConfigError(f"downsample must be one of {DOWNSAMPLE_METHODS}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.group_mode not in GROUP_MODES:
            raise ConfigError(f"group_mode must be one of {GROUP_MODES}")

    @property
    def group_size(self) -> int:
        return 8 if self.group_mode == "group" else 1

    def stage_width(self, stage: int) -> int:
        return max(1, int(round(self.base_width * (2 ** stage) * self.width_scale)))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "float":
                v = repr(float(v))  # builtin-float repr round-trips exactly
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def config_from_text(text: str) -> NetConfig:
    kinds = {f.name: f.type for f in fields(NetConfig)}
    values = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown net config key {key!r}")
        if kinds[key] == "int":
            values[key] = int(val)
        elif kinds[key] == "float":
            values[key] = float(val)
        else:
            values[key] = val
    return NetConfig(**values)


class Network:
    """Built layer graph with a named parameter store and explicit topology."""

    def __init__(self, config: NetConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype).type
        g = config.group_size
        widths = [config.stage_width(s) for s in range(config.stages)]
        self.widths = widths
        enc_stages = config.stages - 1
        d = dtype

        self._layers: list[tuple[str, gl.Layer]] = []

        def reg(name, layer):
            self._layers.append((name, layer))
            return layer

        self.input_conv = reg("input_conv", gl.GroupInputConv(
            config.in_channels, widths[0], 3, 1, 1, group_size=g, rng=rng, dtype=d))

        self.enc_blocks, self.downs, self.down_bns, self.down_relus = [], [], [], []
        for s in range(enc_stages):
            blocks = [
                reg(f"enc{s}.block{b}", gl.ResidualBlock(widths[s], widths[s], g, rng, d))
                for b in range(config.blocks_per_stage)
            ]
            self.enc_blocks.append(blocks)
            self.downs.append(reg(f"enc{s}.down", gl.GroupDownsample(
                widths[s], widths[s + 1], config.downsample, g, rng, d)))
            self.down_bns.append(reg(f"enc{s}.down_bn", gl.GroupBatchNorm(widths[s + 1], dtype=d)))
            self.down_relus.append(reg(f"enc{s}.down_relu", gl.GroupReLU()))

        self.mid_blocks = [
            reg(f"mid.block{b}", gl.ResidualBlock(widths[-1], widths[-1], g, rng, d))
            for b in range(config.blocks_per_stage)
        ]

        self.ups, self.aligns, self.skips, self.dec_blocks = [], [], [], []
        for s in reversed(range(enc_stages)):
            self.ups.append(reg(f"dec{s}.up", gl.GroupUpsample(config.upsample_mode)))
            self.aligns.append(reg(f"dec{s}.align", gl.GroupHiddenConv(
                widths[s + 1], widths[s], 1, 1, 0, group_size=g, rng=rng, dtype=d)))
            self.skips.append(reg(f"dec{s}.skip", gl.GroupSkip(config.skip_mode)))
            first_in = widths[s] * (2 if config.skip_mode == "concat" else 1)
            blocks = []
            for b in range(config.blocks_per_stage):
                cin = first_in if b == 0 else widths[s]
                blocks.append(reg(f"dec{s}.block{b}", gl.ResidualBlock(cin, widths[s], g, rng, d)))
            self.dec_blocks.append(blocks)

        self.head = reg("head", gl.GroupHiddenConv(
            widths[0], config.n_classes, 1, 1, 0, group_size=g, rng=rng, dtype=d))
        self.output_pool = reg("output_pool", gl.GroupOutputPool(g))

    # -- execution ---------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [N,{self.config.in_channels},H,W] input, got {x.shape}")
        div = 2 ** (self.config.stages - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"input spatial dims {x.shape[2:]} not divisible by {div}")
        if x.dtype.type is not self.dtype:
            raise ShapeError(f"input dtype {x.dtype} does not match network dtype {np.dtype(self.dtype)}")

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Image batch [N,C,H,W] -> logits [N,n_classes,H,W]."""
        self._check_input(x)
        f = self.input_conv.forward(x, train)
        enc_feats = []
        for s in range(self.config.stages - 1):
            for blk in self.enc_blocks[s]:
                f = blk.forward(f, train)
            enc_feats.append(f)
            f = self.downs[s].forward(f, train)
            f = self.down_bns[s].forward(f, train)
            f = self.down_relus[s].forward(f, train)
        for blk in self.mid_blocks:
            f = blk.forward(f, train)
        for i, s in enumerate(reversed(range(self.config.stages - 1))):
            f = self.ups[i].forward(f, train)
            f = self.aligns[i].forward(f, train)
            f = self.skips[i].forward(f, enc_feats[s], train)
            for blk in self.dec_blocks[i]:
                f = blk.forward(f, train)
        f = self.head.forward(f, train)
        return self.output_pool.forward(f, train)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Propagate logit gradients back to the input; fills parameter grads."""
        df = self.output_pool.backward(dlogits)
        df = self.head.backward(df)
        enc_stages = self.config.stages - 1
        dskips = [None] * enc_stages
        for i in reversed(range(enc_stages)):
            s = enc_stages - 1 - i
            for blk in reversed(self.dec_blocks[i]):
                df = blk.backward(df)
            df, dskip = self.skips[i].backward(df)
            dskips[s] = dskip
            df = self.aligns[i].backward(df)
            df = self.ups[i].backward(df)
        for blk in reversed(self.mid_blocks):
            df = blk.backward(df)
        for s in reversed(range(enc_stages)):
            df = self.down_relus[s].backward(df)
            df = self.down_bns[s].backward(df)
            df = self.downs[s].backward(df)
            df = df + dskips[s]
            for blk in reversed(self.enc_blocks[s]):
                df = blk.backward(df)
        return self.input_conv.backward(df)

    # -- introspection -----------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers:
            for pname, arr in layer.param_items():
                out[f"{name}.{pname}"] = arr
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers:
            for pname, arr in layer.grad_items():
                out[f"{name}.{pname}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers:
            for bname, arr in layer.buffer_items():
                out[f"{name}.{bname}"] = arr
        return out

    def param_count(self) -> int:
        """Stored trainable floats; every canonical kernel counts once."""
        return sum(a.size for a in self.params().values())

    def describe(self) -> list[dict]:
        rows = []
        for name, layer in self._layers:
            items = layer.param_items()
            rows.append({
                "name": name,
                "kind": layer.kind,
                "shapes": {pname: tuple(arr.shape) for pname, arr in items},
                "params": sum(a.size for _, a in items),
            })
        return rows


def build(config: NetConfig, seed: int | None = None, dtype=np.float64) -> Network:
    rng = None if seed is None else np.random.default_rng([seed, 0x6E65])
    return Network(config, rng=rng, dtype=dtype)


# -- checkpoint io ----------------------------------------------------------

MAGIC = b"GERU"
VERSION = 1


def _write_tensor(f, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(net: Network, path, training_state: dict | None = None):
    """Write config + parameters (+ buffers) as little-endian f32 tensors.

    Float64 networks are cast down to f32 on save; the roundtrip is
    bit-exact for f32 networks.
    """
    tensors = list(net.params().items()) + list(net.buffers().items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        cfg = net.config.to_text().encode("utf-8")
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)
        if training_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            state_tensors = training_state.get("tensors", {})
            scalars = {k: v for k, v in training_state.items() if k != "tensors"}
            blob = json.dumps(scalars, sort_keys=True).encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(state_tensors)))
            for name, arr in state_tensors.items():
                _write_tensor(f, name, arr)


def load_checkpoint(path, expect_config: NetConfig | None = None, dtype=np.float32):
    """Rebuild the network stored at `path`; returns (net, training_state|None)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        config = config_from_text(_read_exact(f, cfg_len).decode("utf-8"))
        if expect_config is not None and config != expect_config:
            raise CheckpointError(
                f"{path}: checkpoint network config does not match the requested one"
            )
        net = Network(config, rng=None, dtype=dtype)
        store = dict(net.params().items()) | dict(net.buffers().items())
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        seen = set()
        for _ in range(n_tensors):
            name, data = _read_tensor(f)
            if name not in store:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            if store[name].shape != data.shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: {data.shape} vs {store[name].shape}"
                )
            store[name][...] = data.astype(dtype)
            seen.add(name)
        missing = set(store) - seen
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        (flag,) = struct.unpack("<B", _read_exact(f, 1))
        training_state = None
        if flag == 1:
            (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
            training_state = json.loads(_read_exact(f, blob_len).decode("utf-8"))
            (n_state,) = struct.unpack("<I", _read_exact(f, 4))
            tensors = {}
            for _ in range(n_state):
                name, data = _read_tensor(f)
                tensors[name] = data.astype(dtype)
            training_state["tensors"] = tensors
    return net, training_state
