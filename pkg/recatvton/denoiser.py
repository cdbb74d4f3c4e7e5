"""Noise predictors: a tiny trainable UNet and an analytic Gaussian oracle.

Both implement the `Denoiser` protocol: ``predict(x, t)`` maps a batch of
model inputs ``(N, 2C+1, 2H, W)`` and timesteps ``(N,)`` to noise
predictions ``(N, C, 2H, W)``.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, Protocol, Tuple
import numpy as np
from . import layers
from .errors import InvalidConfig, ShapeMismatch, StaleTape
from .gridcore import check_same_shape, DuoGrid, elementwise, LatentGrid
from .guidance import ModelInput
from .rng import Stream, stream
from .schedule import NoiseSchedule


class Denoiser(Protocol):
    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        ...


# ----------------------------------------------------------------------
# Timestep embedding

def timestep_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal embedding: entry 2k = sin(t·w_k), entry 2k+1 = cos(t·w_k).

    Args:
        t (int | np.ndarray): Timestep index or a batch of indices.
        dim (int): Even embedding width.
        T (int): Schedule length; timesteps must lie in [0, T).

    Returns:
        np.ndarray: Shape (dim,) for a scalar `t`, (N, dim) for a batch.
    """
    if dim % 2:
        raise InvalidConfig(f"Embedding dim must be even, got {dim}.")
    steps = np.asarray(t, dtype=np.float64)
    if np.any(steps < 0) or np.any(steps >= T):
        raise InvalidConfig(f"Timesteps must lie in [0, {T}).")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = steps[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# ----------------------------------------------------------------------
# Configuration and parameters

@dataclass(frozen=True)
class DenoiserInputSpec:
    latent_channels: int
    region_height: int
    width: int

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.in_channels, 2 * self.region_height, self.width)


@dataclass(frozen=True)
class TinyUNetConfig:
    """Architecture of the toy denoiser.

    The timestep embedding has `features` entries. `garment_timestep=False`
    restricts the timestep signal to the person rows.
    """

    input_spec: DenoiserInputSpec
    features: int = 32
    groups: int = 8
    T: int = 1000
    garment_timestep: bool = True

    def __post_init__(self):
        if self.features < 2 or self.features % 2:
            raise InvalidConfig(f"Feature count must be even, got {self.features}.")
        if self.features % self.groups:
            raise InvalidConfig(
                f"Feature count {self.features} is not divisible by {self.groups} groups."
            )
        if self.input_spec.width % 2:
            raise InvalidConfig(f"Width must be even for pooling, got {self.input_spec.width}.")


def parameter_shapes(config: TinyUNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of all parameters, in a fixed order."""
    f = config.features
    c = config.input_spec.latent_channels
    shapes = {
        "stem.weight": (f, config.input_spec.in_channels, 3, 3),
        "stem.bias": (f,),
    }
    for block in ("block1", "block2"):
        if block == "block2":
            shapes["down.weight"] = (f, f, 3, 3)
            shapes["down.bias"] = (f,)
            shapes["up.weight"] = (f, f, 3, 3)
            shapes["up.bias"] = (f,)
        shapes.update({
            f"{block}.norm1.gamma": (f,),
            f"{block}.norm1.beta": (f,),
            f"{block}.conv1.weight": (f, f, 3, 3),
            f"{block}.conv1.bias": (f,),
            f"{block}.temb.weight": (f, f),
            f"{block}.temb.bias": (f,),
            f"{block}.norm2.gamma": (f,),
            f"{block}.norm2.beta": (f,),
            f"{block}.conv2.weight": (f, f, 3, 3),
            f"{block}.conv2.bias": (f,),
        })
    shapes.update({
        "head.norm.gamma": (f,),
        "head.norm.beta": (f,),
        "head.conv.weight": (c, f, 3, 3),
        "head.conv.bias": (c,),
    })
    return shapes


class TinyUNetParams:
    """Named float64 parameter arrays; also used for gradients and optimizer moments."""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def zeros_like(self) -> "TinyUNetParams":
        return TinyUNetParams({k: np.zeros_like(v) for k, v in self.items()})

    def copy(self) -> "TinyUNetParams":
        return TinyUNetParams({k: v.copy() for k, v in self.items()})

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def same_layout(self, other: "TinyUNetParams") -> bool:
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape for k in self
        )


@dataclass
class Tape:
    """Activations recorded by one forward pass for its backward pass."""

    params: TinyUNetParams
    caches: Dict[str, object] = field(default_factory=dict)
    consumed: bool = False


# ----------------------------------------------------------------------
# Network

class TinyUNet:
    """Conv denoiser: stem, two residual blocks with additive timestep
    projections around one 2× down/up pair with a skip connection, and a head.
    """

    def __init__(self, config: TinyUNetConfig):
        self.config = config

    def init_params(self, seed: int) -> TinyUNetParams:
        """Random weights with std sqrt(1/fan_in); unit norm gains; zero biases."""
        rng = stream(seed, Stream.INIT)
        tensors = {}
        for name, shape in parameter_shapes(self.config).items():
            if name.endswith("gamma"):
                tensors[name] = np.ones(shape)
            elif name.endswith("weight"):
                fan_in = int(np.prod(shape[1:]))
                tensors[name] = rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)
            else:
                tensors[name] = np.zeros(shape)
        return TinyUNetParams(tensors)

    def zero_params(self) -> TinyUNetParams:
        return TinyUNetParams(
            {name: np.zeros(shape) for name, shape in parameter_shapes(self.config).items()}
        )

    def _row_gate(self, height: int) -> np.ndarray:
        gate = np.ones((1, 1, height, 1))
        if not self.config.garment_timestep:
            gate[:, :, height // 2:, :] = 0.0
        return gate

    def _check_input(self, x: np.ndarray):
        spec = self.config.input_spec
        if x.ndim != 4 or x.shape[1:] != spec.shape:
            raise ShapeMismatch(f"Expected input (N, {spec.shape}), got {x.shape}.")

    # ------------------------------------------------------------------
    # Forward

    def forward(self, params: TinyUNetParams, x, t):
        """Predicts noise for a ModelInput or a batch of input arrays.

        Args:
            params (TinyUNetParams): Network weights, read only.
            x (ModelInput | np.ndarray): One input or a batch (N, 2C+1, 2H, W).
            t (int | np.ndarray): Timestep, or one timestep per batch entry.

        Returns:
            Tuple[DuoGrid | np.ndarray, Tape]: The prediction, shaped like
            the input kind, and the tape for `backward`.
        """
        single = isinstance(x, ModelInput)
        batch = x.grid.data[None] if single else np.asarray(x, dtype=np.float64)
        self._check_input(batch)
        steps = np.broadcast_to(np.asarray(t), (batch.shape[0],))
        tape = Tape(params=params)
        out = self._forward(params, batch, steps, tape.caches)
        if single:
            return DuoGrid.from_array(out[0]), tape
        return out, tape

    def _forward(self, p: TinyUNetParams, x, steps, caches):
        emb = timestep_embedding(steps, self.config.features, self.config.T)
        gate = self._row_gate(x.shape[2])
        caches["emb"], caches["gate"] = emb, gate

        h0, caches["stem"] = layers.conv2d_forward(x, p["stem.weight"], p["stem.bias"])
        h1 = self._block_forward(p, "block1", h0, emb, gate, caches)

        pooled, caches["pool"] = layers.avg_pool2_forward(h1)
        act, caches["down.act"] = layers.silu_forward(pooled)
        down, caches["down"] = layers.conv2d_forward(act, p["down.weight"], p["down.bias"])
        up, caches["up"] = layers.conv2d_forward(
            layers.upsample2_forward(down), p["up.weight"], p["up.bias"]
        )
        h2 = h1 + up

        h3 = self._block_forward(p, "block2", h2, emb, gate, caches)
        normed, caches["head.norm"] = layers.group_norm_forward(
            h3, p["head.norm.gamma"], p["head.norm.beta"], self.config.groups
        )
        act, caches["head.act"] = layers.silu_forward(normed)
        out, caches["head.conv"] = layers.conv2d_forward(
            act, p["head.conv.weight"], p["head.conv.bias"]
        )
        return out

    def _block_forward(self, p, name, h, emb, gate, caches):
        groups = self.config.groups
        n1, caches[f"{name}.norm1"] = layers.group_norm_forward(
            h, p[f"{name}.norm1.gamma"], p[f"{name}.norm1.beta"], groups
        )
        a1, caches[f"{name}.act1"] = layers.silu_forward(n1)
        c1, caches[f"{name}.conv1"] = layers.conv2d_forward(
            a1, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"]
        )
        proj, caches[f"{name}.temb"] = layers.linear_forward(
            emb, p[f"{name}.temb.weight"], p[f"{name}.temb.bias"]
        )
        r = c1 + proj[:, :, None, None] * gate
        n2, caches[f"{name}.norm2"] = layers.group_norm_forward(
            r, p[f"{name}.norm2.gamma"], p[f"{name}.norm2.beta"], groups
        )
        a2, caches[f"{name}.act2"] = layers.silu_forward(n2)
        c2, caches[f"{name}.conv2"] = layers.conv2d_forward(
            a2, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"]
        )
        return h + c2

    # ------------------------------------------------------------------
    # Backward

    def backward(self, params: TinyUNetParams, tape: Tape, out_grad) -> TinyUNetParams:
        """Gradients of all parameters for the forward pass recorded in `tape`.

        Args:
            params (TinyUNetParams): The parameters the forward pass used.
            tape (Tape): Tape returned by `forward`; each tape serves one backward pass.
            out_grad (DuoGrid | np.ndarray): Gradient of the loss w.r.t. the prediction.

        Raises:
            StaleTape: If the tape was already consumed or recorded with other parameters.
        """
        if tape.consumed:
            raise StaleTape("Tape was already consumed by a backward pass.")
        if tape.params is not params:
            raise StaleTape("Tape was recorded with a different parameter set.")
        tape.consumed = True
        dout = out_grad.data[None] if isinstance(out_grad, DuoGrid) else np.asarray(out_grad)
        grads = params.zeros_like()
        g = grads.tensors
        c = tape.caches

        da, g["head.conv.weight"], g["head.conv.bias"] = layers.conv2d_backward(
            dout, c["head.conv"]
        )
        dn = layers.silu_backward(da, c["head.act"])
        dh3, g["head.norm.gamma"], g["head.norm.beta"] = layers.group_norm_backward(
            dn, c["head.norm"]
        )
        dh2 = self._block_backward(params, "block2", dh3, g, c)

        dup_in, g["up.weight"], g["up.bias"] = layers.conv2d_backward(dh2, c["up"])
        ddown = layers.upsample2_backward(dup_in)
        dact, g["down.weight"], g["down.bias"] = layers.conv2d_backward(ddown, c["down"])
        dpooled = layers.silu_backward(dact, c["down.act"])
        dh1 = dh2 + layers.avg_pool2_backward(dpooled, c["pool"])

        dh0 = self._block_backward(params, "block1", dh1, g, c)
        _, g["stem.weight"], g["stem.bias"] = layers.conv2d_backward(dh0, c["stem"])
        return grads

    def _block_backward(self, p, name, dout, g, c):
        da2, g[f"{name}.conv2.weight"], g[f"{name}.conv2.bias"] = layers.conv2d_backward(
            dout, c[f"{name}.conv2"]
        )
        dn2 = layers.silu_backward(da2, c[f"{name}.act2"])
        dr, g[f"{name}.norm2.gamma"], g[f"{name}.norm2.beta"] = layers.group_norm_backward(
            dn2, c[f"{name}.norm2"]
        )
        dproj = (dr * c["gate"]).sum(axis=(2, 3))
        _, g[f"{name}.temb.weight"], g[f"{name}.temb.bias"] = layers.linear_backward(
            dproj, c[f"{name}.temb"], p[f"{name}.temb.weight"]
        )
        da1, g[f"{name}.conv1.weight"], g[f"{name}.conv1.bias"] = layers.conv2d_backward(
            dr, c[f"{name}.conv1"]
        )
        dn1 = layers.silu_backward(da1, c[f"{name}.act1"])
        dh, g[f"{name}.norm1.gamma"], g[f"{name}.norm1.beta"] = layers.group_norm_backward(
            dn1, c[f"{name}.norm1"]
        )
        return dout + dh


class NetworkDenoiser:
    """Binds a TinyUNet to a parameter set as a `Denoiser`."""

    def __init__(self, net: TinyUNet, params: TinyUNetParams):
        self.net = net
        self.params = params

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(self.params, x, t)
        return out


# ----------------------------------------------------------------------
# Analytic oracle

@dataclass(frozen=True, eq=False)
class AnalyticGaussianModel:
    """Data distribution z0 ~ N(mu, s²·I) with its exact noise posterior mean.

    `mu` may cover one region; it is then tiled over both duo regions.
    """

    mu: LatentGrid
    s: float
    schedule: NoiseSchedule

    def __post_init__(self):
        if not self.s > 0:
            raise InvalidConfig(f"Data std must be positive, got {self.s}.")

    def mean_like(self, shape: Tuple[int, ...]) -> np.ndarray:
        mu = self.mu.data
        if mu.shape != tuple(shape) and mu.shape[1] * 2 == shape[1]:
            mu = np.concatenate([mu, mu], axis=1)
        check_same_shape(mu, np.empty(shape))
        return mu

    def predict(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        c = self.mu.channels
        noisy = np.asarray(x)[:, :c]
        steps = np.broadcast_to(np.asarray(t), (noisy.shape[0],))
        return np.stack([
            analytic_eps(self, noisy[i], int(steps[i]), self.schedule)
            for i in range(noisy.shape[0])
        ])


@elementwise
def analytic_eps(model: AnalyticGaussianModel, zt, t: int, s: NoiseSchedule):
    """E[eps | z_t] = sqrt(1−ā)·(z_t − sqrt(ā)·mu) / (ā·s² + 1 − ā) for Gaussian z0."""
    s.check_t(t)
    mu = model.mean_like(np.shape(zt))
    a = s.alpha_bar[t]
    return np.sqrt(1.0 - a) * (zt - np.sqrt(a) * mu) / (a * model.s ** 2 + 1.0 - a)


# ----------------------------------------------------------------------
# Complexity

def count_params_flops(params: TinyUNetParams, input_spec: DenoiserInputSpec) -> Tuple[int, int]:
    """Parameter count and conv FLOPs per image.

    FLOPs sum 2·k²·C_in·C_out·H·W + C_out·H·W over all convolutions; the
    'down' convolution runs at half resolution, all others at full duo size.
    Norms, activations and the timestep projections are not counted.
    """
    height, width = 2 * input_spec.region_height, input_spec.width
    flops = 0
    for name, value in params.items():
        if value.ndim != 4:
            continue
        c_out, c_in, k, _ = value.shape
        scale = 2 if name.startswith("down.") else 1
        flops += layers.conv2d_flops(k, c_in, c_out, height // scale, width // scale)
    return params.count(), flops

