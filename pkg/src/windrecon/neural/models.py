"""The three reconstruction networks and their input encoding.

All models consume a 3-channel 15x15 input (u at sensors, v at sensors,
binary sensor mask) and emit a 2-channel velocity field. Channel widths,
patch geometry, and depths are fixed here as named constants on
``ArchitectureSpec``; parameter counts are part of the test contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..fields import GridSpec, VelocityField
from ..placement import SensorLayout
from . import engine as en
from .engine import Tensor

__all__ = [
    "ArchitectureSpec",
    "encode_input",
    "build_model",
    "UNet",
    "CWGAN",
    "ViTAE",
]


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hyperparameters of one architecture variant, all frozen constants."""

    variant: str
    in_channels: int = 3
    out_channels: int = 2
    # UNet: encoder double-conv widths; decoder projection/double-conv widths.
    unet_encoder: tuple[int, ...] = (32, 64, 128)
    unet_decoder: tuple[int, ...] = (64, 32, 16)
    # CWGAN generator: encoder widths, bottleneck width, decoder widths,
    # extra noise channels; critic widths.
    cwgan_gen_encoder: tuple[int, ...] = (64, 128, 256)
    cwgan_gen_bottleneck: int = 512
    cwgan_gen_decoder: tuple[int, ...] = (256, 128, 64)
    cwgan_noise_channels: int = 1
    # The sensor channels are sparse and O(1); a dense unit-variance noise
    # channel would dominate them at initialization, so the noise input is
    # scaled down by this constant.
    cwgan_noise_std: float = 0.1
    cwgan_critic: tuple[int, ...] = (64, 128, 256, 512)
    # ViTAE: patch size, embedding, transformer depth/heads/MLP ratio, and
    # the unpatch/conv widths of the CNN decoder.
    vitae_patch: int = 3
    vitae_embed: int = 64
    vitae_blocks: int = 8
    vitae_heads: int = 8
    vitae_mlp_ratio: float = 4.0
    vitae_unpatch_channels: int = 32
    vitae_decoder: tuple[int, ...] = (64, 32)

    def __post_init__(self) -> None:
        if self.variant not in ("unet", "cwgan", "vitae"):
            raise ConfigError(f"unknown variant {self.variant!r}")

    @classmethod
    def unet(cls) -> "ArchitectureSpec":
        return cls(variant="unet")

    @classmethod
    def cwgan(cls) -> "ArchitectureSpec":
        return cls(variant="cwgan")

    @classmethod
    def vitae(cls) -> "ArchitectureSpec":
        return cls(variant="vitae")


def encode_input(layout: SensorLayout, fld: VelocityField) -> np.ndarray:
    """Sparse model input (3, ny, nx): u/v at sensor cells, zero elsewhere, mask."""
    grid = fld.grid
    out = np.zeros((3, grid.ny, grid.nx))
    for x, y in layout.cells:
        out[0, y, x] = fld.values[y, x, 0]
        out[1, y, x] = fld.values[y, x, 1]
        out[2, y, x] = 1.0
    return out


def encode_input_batch(layout: SensorLayout, values: np.ndarray) -> np.ndarray:
    """Batched encoding: (n, ny, nx, 2) fields -> (n, 3, ny, nx) inputs."""
    n, ny, nx, _ = values.shape
    out = np.zeros((n, 3, ny, nx))
    xs = np.array([c[0] for c in layout.cells])
    ys = np.array([c[1] for c in layout.cells])
    out[:, 0, ys, xs] = values[:, ys, xs, 0]
    out[:, 1, ys, xs] = values[:, ys, xs, 1]
    out[:, 2, ys, xs] = 1.0
    return out


# --- parameter registry and layers ------------------------------------------


class _Registry:
    """Creates parameters in a deterministic order and tracks them."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: list[Tensor] = []
        self.buffers: list[np.ndarray] = []

    def he_uniform(self, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(6.0 / fan_in)
        p = Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.params.append(p)
        return p

    def constant(self, shape: tuple[int, ...], value: float) -> Tensor:
        p = Tensor(np.full(shape, value), requires_grad=True)
        self.params.append(p)
        return p

    def from_array(self, arr: np.ndarray) -> Tensor:
        p = Tensor(arr, requires_grad=True)
        self.params.append(p)
        return p

    def buffer(self, arr: np.ndarray) -> np.ndarray:
        self.buffers.append(arr)
        return arr


class _Conv2d:
    def __init__(self, reg: _Registry, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0):
        self.w = reg.he_uniform((c_out, c_in, k, k), fan_in=c_in * k * k)
        self.b = reg.constant((c_out,), 0.0)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return en.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _Dense:
    def __init__(self, reg: _Registry, d_in: int, d_out: int):
        self.w = reg.he_uniform((d_in, d_out), fan_in=d_in)
        self.b = reg.constant((d_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return en.dense(x, self.w, self.b)


class _BatchNorm2d:
    def __init__(self, reg: _Registry, c: int):
        self.gamma = reg.constant((c,), 1.0)
        self.beta = reg.constant((c,), 0.0)
        self.running = {"mean": reg.buffer(np.zeros(c)), "var": reg.buffer(np.ones(c))}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return en.batchnorm2d(x, self.gamma, self.beta, self.running, training=training)


class _LayerNorm:
    def __init__(self, reg: _Registry, d: int):
        self.gamma = reg.constant((d,), 1.0)
        self.beta = reg.constant((d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return en.layernorm(x, self.gamma, self.beta)


class _DoubleConv:
    """Two 3x3 same-padding convolutions, each followed by ReLU."""

    def __init__(self, reg: _Registry, c_in: int, c_out: int):
        self.c1 = _Conv2d(reg, c_in, c_out, 3, padding=1)
        self.c2 = _Conv2d(reg, c_out, c_out, 3, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return en.relu(self.c2(en.relu(self.c1(x))))


def _sinusoid_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """2-d sinusoidal position table (rows*cols, dim): half row-, half col-encoded."""
    half = dim // 2

    def table(n_pos: int, d: int) -> np.ndarray:
        pos = np.arange(n_pos)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        out = np.zeros((n_pos, d))
        out[:, 0::2] = np.sin(angle[:, 0::2])
        out[:, 1::2] = np.cos(angle[:, 1::2])
        return out

    row_t = table(rows, half)
    col_t = table(cols, dim - half)
    grid = np.zeros((rows * cols, dim))
    for r in range(rows):
        for c in range(cols):
            grid[r * cols + c, :half] = row_t[r]
            grid[r * cols + c, half:] = col_t[c]
    return grid


class _ModelBase:
    """Shared parameter bookkeeping for all three architectures."""

    spec: ArchitectureSpec
    _reg: _Registry

    def params(self) -> list[Tensor]:
        return self._reg.params

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self._reg.params))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self._reg.params])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.param_count:
            raise ConfigError(f"flat vector has {vec.size} values, model has {self.param_count}")
        off = 0
        for p in self._reg.params:
            p.data = vec[off : off + p.size].reshape(p.data.shape).astype(p.data.dtype)
            off += p.size

    def get_buffers(self) -> np.ndarray:
        bufs = self._reg.buffers
        return np.concatenate([b.ravel() for b in bufs]) if bufs else np.empty(0)

    def set_buffers(self, vec: np.ndarray) -> None:
        off = 0
        for b in self._reg.buffers:
            b[...] = vec[off : off + b.size].reshape(b.shape)
            off += b.size

    def zero_grad(self) -> None:
        for p in self._reg.params:
            p.grad = None


class UNet(_ModelBase):
    """Encoder 32-64-128 double-convs with 2x2 max-pooling down to a 2x2
    bottleneck; decoder upsamples, halves channels with a 1x1 projection,
    concatenates the skip, and applies a double-conv; 1x1 head, pad/crop
    keeps the 15x15 frame."""

    def __init__(self, spec: ArchitectureSpec, seed: int):
        self.spec = spec
        self._reg = reg = _Registry(np.random.default_rng(seed))
        w1, w2, w3 = spec.unet_encoder
        d1, d2, d3 = spec.unet_decoder
        cin = spec.in_channels
        self.enc1 = _DoubleConv(reg, cin, w1)
        self.enc2 = _DoubleConv(reg, w1, w2)
        self.enc3 = _DoubleConv(reg, w2, w3)
        self.proj1 = _Conv2d(reg, w3, d1, 1)
        self.dec1 = _DoubleConv(reg, d1 + w3, d1)
        self.proj2 = _Conv2d(reg, d1, d2, 1)
        self.dec2 = _DoubleConv(reg, d2 + w2, d2)
        self.proj3 = _Conv2d(reg, d2, d3, 1)
        self.dec3 = _DoubleConv(reg, d3 + w1, d3)
        self.head = _Conv2d(reg, d3, spec.out_channels, 1)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = x.data.shape[2]
        z = en.pad2d(x)  # 15 -> 16
        e1 = self.enc1(z)
        e2 = self.enc2(en.maxpool2x2(e1))
        e3 = self.enc3(en.maxpool2x2(e2))
        bott = en.maxpool2x2(e3)
        u = self.dec1(en.concat([self.proj1(en.upsample2x(bott)), e3]))
        u = self.dec2(en.concat([self.proj2(en.upsample2x(u)), e2]))
        u = self.dec3(en.concat([self.proj3(en.upsample2x(u)), e1]))
        return en.crop2d(self.head(u), h, h)


class _GenUNet:
    """CWGAN generator: UNet shape with a 512-wide double-conv bottleneck."""

    def __init__(self, reg: _Registry, spec: ArchitectureSpec):
        w1, w2, w3 = spec.cwgan_gen_encoder
        wb = spec.cwgan_gen_bottleneck
        d1, d2, d3 = spec.cwgan_gen_decoder
        cin = spec.in_channels + spec.cwgan_noise_channels
        self.enc1 = _DoubleConv(reg, cin, w1)
        self.enc2 = _DoubleConv(reg, w1, w2)
        self.enc3 = _DoubleConv(reg, w2, w3)
        self.bott = _DoubleConv(reg, w3, wb)
        self.proj1 = _Conv2d(reg, wb, d1, 1)
        self.dec1 = _DoubleConv(reg, d1 + w3, d1)
        self.proj2 = _Conv2d(reg, d1, d2, 1)
        self.dec2 = _DoubleConv(reg, d2 + w2, d2)
        self.proj3 = _Conv2d(reg, d2, d3, 1)
        self.dec3 = _DoubleConv(reg, d3 + w1, d3)
        self.head = _Conv2d(reg, d3, spec.out_channels, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = x.data.shape[2]
        z = en.pad2d(x)
        e1 = self.enc1(z)
        e2 = self.enc2(en.maxpool2x2(e1))
        e3 = self.enc3(en.maxpool2x2(e2))
        b = self.bott(en.maxpool2x2(e3))
        u = self.dec1(en.concat([self.proj1(en.upsample2x(b)), e3]))
        u = self.dec2(en.concat([self.proj2(en.upsample2x(u)), e2]))
        u = self.dec3(en.concat([self.proj3(en.upsample2x(u)), e1]))
        return en.crop2d(self.head(u), h, h)


class _Critic:
    """Strided-conv critic on (condition, field) pairs; no output activation."""

    def __init__(self, reg: _Registry, spec: ArchitectureSpec):
        w1, w2, w3, w4 = spec.cwgan_critic
        cin = spec.in_channels + spec.out_channels
        self.c1 = _Conv2d(reg, cin, w1, 3, stride=2, padding=1)
        self.c2 = _Conv2d(reg, w1, w2, 3, stride=2, padding=1)
        self.bn2 = _BatchNorm2d(reg, w2)
        self.c3 = _Conv2d(reg, w2, w3, 3, stride=2, padding=1)
        self.bn3 = _BatchNorm2d(reg, w3)
        self.c4 = _Conv2d(reg, w3, w4, 3, stride=2, padding=1)
        self.bn4 = _BatchNorm2d(reg, w4)
        self.out = _Dense(reg, w4, 1)
        self._w4 = w4

    def __call__(self, cond: Tensor, fld: Tensor, training: bool) -> Tensor:
        z = en.pad2d(en.concat([cond, fld]))  # 15 -> 16
        z = en.leaky_relu(self.c1(z))
        z = en.leaky_relu(self.bn2(self.c2(z), training))
        z = en.leaky_relu(self.bn3(self.c3(z), training))
        z = en.leaky_relu(self.bn4(self.c4(z), training))
        return self.out(z.reshape(z.data.shape[0], self._w4))


class CWGAN(_ModelBase):
    """Conditional Wasserstein GAN: generator + critic in one registry.

    The generator consumes the 3-channel sensor encoding concatenated with a
    Gaussian noise channel. Generator parameters come first in the registry,
    so optimizers and weight clipping can address the two halves separately.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int):
        self.spec = spec
        self._reg = reg = _Registry(np.random.default_rng(seed))
        self.generator = _GenUNet(reg, spec)
        self._n_gen_params = len(reg.params)
        self.critic = _Critic(reg, spec)

    def generator_params(self) -> list[Tensor]:
        return self._reg.params[: self._n_gen_params]

    def critic_params(self) -> list[Tensor]:
        return self._reg.params[self._n_gen_params :]

    def forward(self, x: Tensor, noise: np.ndarray | Tensor | None = None, training: bool = False) -> Tensor:
        if noise is None:
            noise = np.zeros((x.data.shape[0], self.spec.cwgan_noise_channels, *x.data.shape[2:]))
        z = noise if isinstance(noise, Tensor) else Tensor(noise)
        return self.generator(en.concat([x, z]))

    def criticize(self, cond: Tensor, fld: Tensor, training: bool = True) -> Tensor:
        return self.critic(cond, fld, training)

    def clip_critic(self, bound: float) -> None:
        for p in self.critic_params():
            np.clip(p.data, -bound, bound, out=p.data)


class _TransformerBlock:
    """Pre-norm block: LN -> MHA -> residual, LN -> MLP -> residual."""

    def __init__(self, reg: _Registry, d: int, heads: int, mlp_ratio: float):
        self.heads = heads
        self.ln1 = _LayerNorm(reg, d)
        self.wq = reg.he_uniform((d, d), fan_in=d)
        self.bq = reg.constant((d,), 0.0)
        self.wk = reg.he_uniform((d, d), fan_in=d)
        self.bk = reg.constant((d,), 0.0)
        self.wv = reg.he_uniform((d, d), fan_in=d)
        self.bv = reg.constant((d,), 0.0)
        self.wo = reg.he_uniform((d, d), fan_in=d)
        self.bo = reg.constant((d,), 0.0)
        self.ln2 = _LayerNorm(reg, d)
        hidden = int(d * mlp_ratio)
        self.fc1 = _Dense(reg, d, hidden)
        self.fc2 = _Dense(reg, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        a = en.multi_head_attention(
            self.ln1(x), self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.heads
        )
        x = x + a
        return x + self.fc2(en.relu(self.fc1(self.ln2(x))))


class ViTAE(_ModelBase):
    """Patch-attention autoencoder: 3x3 patches -> 64-d tokens with trainable
    sinusoid-initialized 2-d position encodings -> 8 transformer blocks ->
    token unpatching -> small CNN decoder."""

    def __init__(self, spec: ArchitectureSpec, seed: int, grid: GridSpec | None = None):
        self.spec = spec
        grid = grid or GridSpec()
        p = spec.vitae_patch
        if grid.ny % p or grid.nx % p:
            raise ConfigError(f"patch size {p} does not tile {grid.ny}x{grid.nx}")
        self.rows, self.cols = grid.ny // p, grid.nx // p
        n_patches = self.rows * self.cols
        d = spec.vitae_embed
        self._reg = reg = _Registry(np.random.default_rng(seed))
        self.embed = _Dense(reg, spec.in_channels * p * p, d)
        self.pos = reg.from_array(_sinusoid_2d(self.rows, self.cols, d))
        self.blocks = [
            _TransformerBlock(reg, d, spec.vitae_heads, spec.vitae_mlp_ratio)
            for _ in range(spec.vitae_blocks)
        ]
        self.ln = _LayerNorm(reg, d)
        cu = spec.vitae_unpatch_channels
        self.unpatch = _Dense(reg, d, cu * p * p)
        dw1, dw2 = spec.vitae_decoder
        self.dc1 = _Conv2d(reg, cu, dw1, 3, padding=1)
        self.dc2 = _Conv2d(reg, dw1, dw2, 3, padding=1)
        self.head = _Conv2d(reg, dw2, spec.out_channels, 1)
        self._n_patches = n_patches

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        n, c, h, w = x.data.shape
        p = self.spec.vitae_patch
        r, ccols = self.rows, self.cols
        # (n,c,h,w) -> (n, patches, c*p*p), every cell covered exactly once
        tok = (
            x.reshape(n, c, r, p, ccols, p)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n, self._n_patches, c * p * p)
        )
        z = self.embed(tok) + self.pos
        for blk in self.blocks:
            z = blk(z)
        z = self.ln(z)
        cu = self.spec.vitae_unpatch_channels
        img = (
            self.unpatch(z)
            .reshape(n, r, ccols, cu, p, p)
            .transpose(0, 3, 1, 4, 2, 5)
            .reshape(n, cu, h, w)
        )
        img = en.relu(self.dc1(img))
        img = en.relu(self.dc2(img))
        return self.head(img)


def build_model(spec: ArchitectureSpec, seed: int):
    """Instantiate an untrained model; deterministic per seed."""
    if spec.variant == "unet":
        return UNet(spec, seed)
    if spec.variant == "cwgan":
        return CWGAN(spec, seed)
    if spec.variant == "vitae":
        return ViTAE(spec, seed)
    raise ConfigError(f"unknown variant {spec.variant!r}")
