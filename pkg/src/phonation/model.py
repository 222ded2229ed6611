"""Frequency-biased CNN with a soft-mask residual attention block."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.ops import conv_output_size

N_CLASSES = 4
LAYER_NAMES = ("conv1", "conv2", "conv3", "conv4")


class ConfigError(ValueError):
    pass


class FrequencyBiasError(ConfigError):
    """A convolution filter is not taller (frequency) than it is wide (time)."""


@dataclass(frozen=True)
class FilterShape:
    n: int  # frequency extent
    m: int  # time extent

    def check(self, where: str) -> None:
        if self.n < 1 or self.m < 1:
            raise ConfigError(f"{where}: filter extents must be positive, got {self.n}x{self.m}")
        if not self.m < self.n:
            raise FrequencyBiasError(
                f"{where}: filter {self.n}x{self.m} is not frequency-biased (need time extent < frequency extent)"
            )


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    filter: FilterShape = FilterShape(5, 3)
    padding: tuple[int, int] | None = None  # None means same-padding

    def pad(self) -> tuple[int, int]:
        if self.padding is not None:
            return tuple(self.padding)
        return (self.filter.n - 1) // 2, (self.filter.m - 1) // 2


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)


@dataclass(frozen=True)
class MaskBranchSpec:
    pool: PoolSpec = PoolSpec()
    conv: ConvSpec = ConvSpec(32)
    per_layer: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    convs: tuple[ConvSpec, ...] = (ConvSpec(16), ConvSpec(32), ConvSpec(64), ConvSpec(64))
    pools: tuple[PoolSpec, ...] = (PoolSpec(), PoolSpec())
    mask: MaskBranchSpec | None = MaskBranchSpec()
    dense_hidden: int = 128
    n_classes: int = N_CLASSES
    input_shape: tuple[int, int, int] = (1, 128, 12)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        def conv(c):
            pad = c.get("padding")
            return ConvSpec(c["channels"], FilterShape(**c["filter"]), tuple(pad) if pad is not None else None)

        def pool(p):
            return PoolSpec(tuple(p["window"]), tuple(p["stride"]))

        mask = d.get("mask")
        return cls(
            convs=tuple(conv(c) for c in d["convs"]),
            pools=tuple(pool(p) for p in d["pools"]),
            mask=None if mask is None else MaskBranchSpec(pool(mask["pool"]), conv(mask["conv"]),
                                                          bool(mask.get("per_layer", False))),
            dense_hidden=d["dense_hidden"],
            n_classes=d["n_classes"],
            input_shape=tuple(d["input_shape"]),
            seed=d["seed"],
        )


def shape_walk(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Validate ``config`` and return the per-sample shape after every stage."""
    if len(config.convs) != 4 or len(config.pools) != 2:
        raise ConfigError("network needs exactly four conv layers and two pools")
    if config.n_classes != N_CLASSES:
        raise ConfigError(f"output layer must have {N_CLASSES} units")
    c, h, w = config.input_shape
    shapes = {"input": (c, h, w)}

    def conv(spec, c, h, w, where):
        spec.filter.check(where)
        ph, pw = spec.pad()
        try:
            return spec.channels, conv_output_size(h, spec.filter.n, ph, 1), conv_output_size(w, spec.filter.m, pw, 1)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def pool(spec, c, h, w, where):
        kh, kw = spec.window
        sh, sw = spec.stride
        if kh > h or kw > w:
            raise ConfigError(f"{where}: {h}x{w} map too small for {kh}x{kw} pooling")
        return c, (h - kh) // sh + 1, (w - kw) // sw + 1

    for i in range(2):
        c, h, w = conv(config.convs[i], c, h, w, f"conv{i + 1}")
        shapes[f"conv{i + 1}"] = (c, h, w)
        c, h, w = pool(config.pools[i], c, h, w, f"pool{i + 1}")
        shapes[f"pool{i + 1}"] = (c, h, w)

    if config.mask is not None:
        mc, mh, mw = pool(config.mask.pool, c, h, w, "mask pool")
        mc, mh, mw = conv(config.mask.conv, mc, mh, mw, "mask conv")
        if mh < 1 or mw < 1:
            raise ConfigError("mask branch collapses to an empty map")
        shapes["mask_low"] = (mc, mh, mw)
    c3 = conv(config.convs[2], c, h, w, "conv3")
    shapes["conv3"] = c3
    c4 = conv(config.convs[3], *c3, "conv4")
    shapes["conv4"] = c4
    if config.mask is not None:
        if c3[1:] != (h, w) or c4[1:] != (h, w):
            raise ConfigError("conv3/conv4 must preserve spatial size so the mask can gate them")
        if not config.mask.per_layer and c3[0] != c4[0]:
            raise ConfigError("a shared mask needs conv3 and conv4 to have equal channel counts")
        if mh > h or mw > w:
            raise ConfigError("mask branch bottom is larger than the trunk map")
        shapes["mask"] = c3
    flat = int(np.prod(c4))
    shapes["flatten"] = (flat,)
    shapes["dense1"] = (config.dense_hidden,)
    shapes["logits"] = (config.n_classes,)
    if config.dense_hidden < 1:
        raise ConfigError("dense_hidden must be positive")
    return shapes


class PhonationNet:
    """Parameter container plus forward pass.

    Parameters live in an ordered dict keyed by name; ``forward`` records
    onto whatever :class:`~phonation.autodiff.Tape` is active.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.shapes = shape_walk(config)

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "PhonationNet":
        return PhonationNet(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                          for k, v in self.params.items()})

    def copy(self) -> "PhonationNet":
        return PhonationNet(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                          for k, v in self.params.items()})

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- forward ---------------------------------------------------------

    def _conv(self, name: str, x: Tensor, spec: ConvSpec) -> Tensor:
        return ad.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=spec.pad())

    def mask_branch(self, features: Tensor, prefix: str = "mask") -> Tensor:
        """Pool, convolve, upsample back and squash to a (0, 1) gate."""
        spec = self.config.mask
        h, w = features.shape[2:]
        low = ad.maxpool2d(features, spec.pool.window, spec.pool.stride)
        low = ad.relu(self._conv(f"{prefix}.conv", low, spec.conv))
        up = ad.upsample_bilinear(low, (h, w))
        logits = ad.conv2d(up, self.params[f"{prefix}.out.weight"], self.params[f"{prefix}.out.bias"])
        return ad.sigmoid(logits)

    def forward(self, batch, capture: dict | None = None) -> Tensor:
        """Logits for a batch shaped (N, 1, bands, frames).

        When ``capture`` is a dict it is filled with the tensors of every
        named stage (``conv1``..``conv4``, ``trunk3``, ``trunk4``, ``mask``).
        """
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ValueError(f"expected input (N, {self.config.input_shape}), got {x.shape}")
        cfg = self.config
        store = capture if capture is not None else {}

        for i in range(2):
            name = f"conv{i + 1}"
            x = ad.relu(self._conv(name, x, cfg.convs[i]))
            store[name] = x
            x = ad.maxpool2d(x, cfg.pools[i].window, cfg.pools[i].stride)

        mask = None
        if cfg.mask is not None:
            mask = self.mask_branch(x, "mask")
            store["mask"] = mask
        for i in (2, 3):
            name = f"conv{i + 1}"
            if cfg.mask is not None and cfg.mask.per_layer and i == 3:
                mask = self.mask_branch(x, "mask4")
                store["mask4"] = mask
            t = ad.relu(self._conv(name, x, cfg.convs[i]))
            store[f"trunk{i + 1}"] = t
            x = attention_apply(t, mask) if mask is not None else t
            store[name] = x

        x = ad.flatten(x)
        x = ad.relu(ad.dense(x, self.params["dense1.weight"], self.params["dense1.bias"]))
        return ad.dense(x, self.params["dense2.weight"], self.params["dense2.bias"])

    __call__ = forward

    def predict(self, values: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax class per segment; exact ties go to the lowest index."""
        values = np.asarray(values)
        if values.ndim == 3:
            values = values[:, None]
        out = []
        for s in range(0, values.shape[0], batch_size):
            out.append(np.argmax(self.forward(values[s:s + batch_size].astype(self.dtype)).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def attention_apply(trunk: Tensor, mask: Tensor) -> Tensor:
    """Residual gating ``(1 + mask) * trunk``."""
    if trunk.shape != mask.shape:
        raise ValueError(f"trunk {trunk.shape} and mask {mask.shape} differ in shape")
    return ad.mul(ad.add_scalar(mask, 1.0), trunk)


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_network(config: NetworkConfig = NetworkConfig(), dtype=np.float64) -> PhonationNet:
    """Validate ``config`` and initialise weights (He-uniform, zero biases)."""
    shapes = shape_walk(config)
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}

    def add_conv(name, c_in, spec_channels, n, m):
        fan_in = c_in * n * m
        params[f"{name}.weight"] = Tensor(_he_uniform(rng, (spec_channels, c_in, n, m), fan_in, dtype),
                                          requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(spec_channels, dtype=dtype), requires_grad=True,
                                        name=f"{name}.bias")

    c_in = config.input_shape[0]
    for i, spec in enumerate(config.convs):
        add_conv(f"conv{i + 1}", c_in, spec.channels, spec.filter.n, spec.filter.m)
        c_in = spec.channels

    if config.mask is not None:
        prefixes = ["mask"] + (["mask4"] if config.mask.per_layer else [])
        gate_inputs = {"mask": shapes["pool2"][0], "mask4": config.convs[2].channels}
        gate_outputs = {"mask": config.convs[2].channels, "mask4": config.convs[3].channels}
        for prefix in prefixes:
            f = config.mask.conv.filter
            add_conv(f"{prefix}.conv", gate_inputs[prefix], config.mask.conv.channels, f.n, f.m)
            # pointwise projection to the trunk's channel count
            add_conv(f"{prefix}.out", config.mask.conv.channels, gate_outputs[prefix], 1, 1)

    for name, d_in, d_out in (("dense1", shapes["flatten"][0], config.dense_hidden),
                              ("dense2", config.dense_hidden, config.n_classes)):
        params[f"{name}.weight"] = Tensor(_he_uniform(rng, (d_in, d_out), d_in, dtype),
                                          requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name=f"{name}.bias")
    return PhonationNet(config, params)


def expected_parameter_count(config: NetworkConfig) -> int:
    """Parameter count derived from the config alone."""
    shapes = shape_walk(config)
    total = 0
    c_in = config.input_shape[0]
    for spec in config.convs:
        total += spec.channels * (c_in * spec.filter.n * spec.filter.m + 1)
        c_in = spec.channels
    if config.mask is not None:
        mc = config.mask.conv
        branches = [(shapes["pool2"][0], config.convs[2].channels)]
        if config.mask.per_layer:
            branches.append((config.convs[2].channels, config.convs[3].channels))
        for c_gate_in, c_gate_out in branches:
            total += mc.channels * (c_gate_in * mc.filter.n * mc.filter.m + 1)
            total += c_gate_out * (mc.channels + 1)
    total += (shapes["flatten"][0] + 1) * config.dense_hidden
    total += (config.dense_hidden + 1) * config.n_classes
    return total
