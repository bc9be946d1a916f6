"""The PCAA network: PointNet + dilated causal TCN encoder, decoder and
classifier branches with projection heads, and a label-conditioned critic."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

ABLATIONS = ("none", "v1", "v2", "v3")


@dataclass
class ModelConfig:
    N_p: int = 150
    N_f: int = 30
    pointnet_widths: tuple[int, ...] = (512, 512, 512, 1024)
    temporal_filters: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    dilations: tuple[int, ...] = (1, 2, 4, 1, 2, 4)
    K: int = 32
    head_width: int = 64
    decoder_widths: tuple[int, ...] = (1125, 2250, 4500, 9000, 18000)
    critic_widths: tuple[int, ...] = (128, 64)
    centroid_mlp_widths: tuple[int, ...] = (16, 32, 64)
    M: int = 10
    learned_centroids: bool = False
    use_projection_heads: bool = True
    use_decoder: bool = True
    scale_factor: float = 1.0
    min_width: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("pointnet_widths", "temporal_filters", "dilations", "decoder_widths",
                     "critic_widths", "centroid_mlp_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.pointnet_widths) != 4:
            raise ValueError("pointnet_widths needs 4 entries")
        if len(self.temporal_filters) != len(self.dilations):
            raise ValueError("temporal_filters and dilations must have equal length")
        if len(self.decoder_widths) != 5:
            raise ValueError("decoder_widths needs 5 entries")
        if not 0 < self.scale_factor <= 1:
            raise ValueError("scale_factor must be in (0, 1]")
        if self.M < 2:
            raise ValueError("need at least 2 known classes")

    def _scaled(self, w: int) -> int:
        return max(self.min_width, int(round(w * self.scale_factor)))

    @property
    def eff_pointnet(self) -> tuple[int, ...]:
        return tuple(self._scaled(w) for w in self.pointnet_widths)

    @property
    def eff_temporal(self) -> tuple[int, ...]:
        return tuple(self._scaled(w) for w in self.temporal_filters)

    @property
    def eff_head(self) -> int:
        return self._scaled(self.head_width)

    @property
    def eff_decoder(self) -> tuple[int, ...]:
        # output layer always matches the input tensor size
        hidden = tuple(self._scaled(w) for w in self.decoder_widths[:-1])
        return hidden + (4 * self.N_f * self.N_p,)

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        flags = dict(learned_centroids=False, use_projection_heads=True, use_decoder=True)
        if name == "v1":
            flags["learned_centroids"] = True
        elif name == "v2":
            flags["use_projection_heads"] = False
        elif name == "v3":
            flags["use_decoder"] = False
        return replace(self, **flags)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Module:
    """Named parameter/buffer container; children discovered from attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, np.ndarray):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype="float64"):
        self.weight = _uniform(rng, (n_in, n_out), n_in, dtype)
        self.bias = _uniform(rng, (n_out,), n_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.linear(tc.as_tensor(x, self.weight.dtype), self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype="float64"):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = tc.BN_MOMENTUM

    def __call__(self, x: Tensor) -> Tensor:
        return tc.batch_norm(x, self.gamma, self.beta, self.training,
                             self.running_mean, self.running_var, self.momentum)


class PointNetBlock(Module):
    """Shared per-point linear map -> batch-norm -> ELU on (n_points, C_in)."""

    def __init__(self, n_in: int, n_out: int, rng, dtype="float64"):
        self.linear = Linear(n_in, n_out, rng, dtype)
        self.bn = BatchNorm(n_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.elu(self.bn(self.linear(x)))


class TemporalBlock(Module):
    def __init__(self, n_in: int, n_out: int, dilation: int, rng, dtype="float64"):
        self.dilation = dilation
        self.weight = _uniform(rng, (n_out, n_in, 3), 3 * n_in, dtype)
        self.bias = _uniform(rng, (n_out,), 3 * n_in, dtype)
        self.bn = BatchNorm(n_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = tc.conv1d_dilated_causal(x, self.weight, self.dilation) + self.bias
        return tc.elu(self.bn(y))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype="float64"):
        widths = (4,) + cfg.eff_pointnet
        self.pointnet = [PointNetBlock(widths[i], widths[i + 1], rng, dtype) for i in range(4)]
        chans = (widths[-1],) + cfg.eff_temporal
        self.temporal = [TemporalBlock(chans[i], chans[i + 1], d, rng, dtype)
                         for i, d in enumerate(cfg.dilations)]
        self.project = Linear(chans[-1], cfg.K, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, F, P, _ = x.shape
        h = x.reshape(B * F * P, 4)
        for blk in self.pointnet:
            h = blk(h)
        h = h.reshape(B, F, P, h.shape[-1]).mean(axis=2)  # (B, F, C): pool over points
        for blk in self.temporal:
            h = blk(h)
        return self.project(h.mean(axis=1))


class MLP(Module):
    """Linear layers with ELU between them and a linear output."""

    def __init__(self, widths: tuple[int, ...], rng, dtype="float64", final_activation=False):
        self.layers = [Linear(widths[i], widths[i + 1], rng, dtype) for i in range(len(widths) - 1)]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = tc.elu(x)
        return x

    def input_gradient(self, x: Tensor) -> Tensor:
        """d(sum of outputs)/dx for a scalar-output MLP, built from tape ops.

        Rows of ``x`` are independent, so each row receives its own gradient.
        The result stays differentiable in the layer parameters.
        """
        if self.layers[-1].weight.shape[1] != 1 or self.final_activation:
            raise ValueError("input_gradient needs a scalar-output MLP with linear head")
        pre = []
        h = x
        for layer in self.layers[:-1]:
            a = layer(h)
            pre.append(a)
            h = tc.elu(a)
        ones = Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
        g = tc.matmul(ones, tc.transpose(self.layers[-1].weight))
        for layer, a in zip(reversed(self.layers[:-1]), reversed(pre)):
            g = tc.matmul(g * tc.elu_derivative(a), tc.transpose(layer.weight))
        return g


class PCAA(Module):
    """Encoder, optional decoder, classifier, critic and (V1) centroid MLP."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = cfg.dtype
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        head = cfg.eff_head
        if cfg.use_projection_heads:
            self.cls_head = Linear(cfg.K, head, rng, dtype)
        self.classifier = Linear(head if cfg.use_projection_heads else cfg.K, cfg.M, rng, dtype)
        if cfg.use_decoder:
            if cfg.use_projection_heads:
                self.dec_head = Linear(cfg.K, head, rng, dtype)
            first = head if cfg.use_projection_heads else cfg.K
            self.decoder = MLP((first,) + cfg.eff_decoder, rng, dtype)
        self.critic = MLP((cfg.K + cfg.M,) + cfg.critic_widths + (1,), rng, dtype)
        if cfg.learned_centroids:
            self.centroid_mlp = MLP((cfg.M,) + cfg.centroid_mlp_widths + (cfg.K,), rng, dtype)

    # parameter groups ------------------------------------------------
    def group(self, name: str) -> list[Tensor]:
        """'encoder', 'autoencoder' (stage-1 set), 'critic' or 'centroids'."""
        if name == "encoder":
            return self.encoder.parameters()
        if name == "autoencoder":
            mods = [self.encoder, self.classifier]
            for attr in ("cls_head", "dec_head", "decoder"):
                if hasattr(self, attr):
                    mods.append(getattr(self, attr))
            return [p for m in mods for p in m.parameters()]
        if name == "critic":
            return self.critic.parameters()
        if name == "centroids":
            return self.centroid_mlp.parameters() if hasattr(self, "centroid_mlp") else []
        raise KeyError(name)

    def named_parameters(self, prefix: str = ""):
        # skip the config object
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    # forward pieces --------------------------------------------------
    def _input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.ndim != 4 or x.shape[1:] != (self.cfg.N_f, self.cfg.N_p, 4):
            raise ValueError(
                f"expected windows of shape (B, {self.cfg.N_f}, {self.cfg.N_p}, 4), got {x.shape}")
        return x

    def encode(self, x) -> Tensor:
        return self.encoder(self._input(x))

    def class_logits(self, z: Tensor) -> Tensor:
        h = tc.elu(self.cls_head(z)) if self.cfg.use_projection_heads else z
        return self.classifier(h)

    def classify(self, z: Tensor) -> Tensor:
        return tc.softmax(self.class_logits(z), axis=-1)

    def decode(self, z: Tensor) -> Tensor:
        """Reconstruction as (B, N_f, N_p, 4); the decoder emits (4, N_f, N_p) per sample."""
        if not self.cfg.use_decoder:
            raise RuntimeError("decoder disabled (ablation v3)")
        h = tc.elu(self.dec_head(z)) if self.cfg.use_projection_heads else z
        out = self.decoder(h)
        B = z.shape[0]
        out = out.reshape(B, 4, self.cfg.N_f, self.cfg.N_p)
        return tc.transpose(out, (0, 2, 3, 1))

    def discriminate(self, zc: Tensor) -> Tensor:
        if zc.shape[-1] != self.cfg.K + self.cfg.M:
            raise ValueError(f"critic input must have length {self.cfg.K + self.cfg.M}")
        return self.critic(zc)

    def centroids_from_mlp(self) -> Tensor:
        eye = Tensor(np.eye(self.cfg.M, dtype=self.cfg.dtype))
        return self.centroid_mlp(eye)
