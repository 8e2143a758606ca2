"""Twin encoders, speaker/adversarial classifiers and the reconstruction decoder."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import GROUP_NAMES, ParamGroup, Tensor, conv_output_size
from .errors import DimensionError, ParameterError, ValidationError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Layer:
    def parameters(self) -> list[Tensor]:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, group: str, name: str):
        self.W = ad.parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out), group, f"{name}.W")
        self.b = ad.parameter(np.zeros(n_out), group, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)

    def parameters(self):
        return [self.W, self.b]


class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, stride, rng, group, name):
        self.stride = stride
        self.kernel = ad.parameter(
            glorot_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k), group, f"{name}.kernel"
        )
        self.bias = ad.parameter(np.zeros(c_out), group, f"{name}.bias")

    def __call__(self, x):
        return ad.conv2d(x, self.kernel, self.stride, self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


class ConvTranspose2d(Layer):
    def __init__(self, c_in, c_out, k, stride, rng, group, name):
        self.stride = stride
        self.kernel = ad.parameter(
            glorot_uniform(rng, (c_in, c_out, k, k), c_in * k * k, c_out * k * k), group, f"{name}.kernel"
        )
        self.bias = ad.parameter(np.zeros(c_out), group, f"{name}.bias")

    def __call__(self, x, output_size):
        return ad.conv_transpose2d(x, self.kernel, self.stride, output_size, self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


@dataclass
class EncoderConfig:
    kind: str = "conv"
    channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    hidden: tuple[int, ...] = (128,)
    embedding_dim: int = 64
    pooling: str = "temporal_average"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("mlp", "conv"):
            raise ParameterError(f"encoder kind must be 'mlp' or 'conv', got {self.kind!r}")
        if self.embedding_dim < 2:
            raise ParameterError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.pooling != "temporal_average":
            raise ParameterError(f"unsupported pooling {self.pooling!r}")
        if self.kind == "conv" and not self.channels:
            raise ParameterError("conv encoder needs at least one channel entry")


class Encoder(Layer):
    """Spectrogram segment ``[B, T, F]`` to embedding ``[B, D]`` with temporal average pooling."""

    def __init__(self, cfg: EncoderConfig, segment_shape: tuple[int, int], rng: np.random.Generator, group: str):
        self.cfg = cfg
        self.segment_shape = tuple(segment_shape)
        T, F = self.segment_shape
        self.layers: list[Layer] = []
        if cfg.kind == "mlp":
            width = F
            for i, h in enumerate(cfg.hidden):
                self.layers.append(Linear(width, h, rng, group, f"{group}.fc{i}"))
                width = h
            self.pooled_dim = width
        else:
            self.spatial = [(T, F)]
            c_prev = 1
            for i, c in enumerate(cfg.channels):
                h, w = self.spatial[-1]
                if cfg.kernel_size > h or cfg.kernel_size > w:
                    raise DimensionError(f"segment {segment_shape} too small for {len(cfg.channels)} conv layers")
                self.layers.append(Conv2d(c_prev, c, cfg.kernel_size, cfg.stride, rng, group, f"{group}.conv{i}"))
                self.spatial.append(
                    (conv_output_size(h, cfg.kernel_size, cfg.stride), conv_output_size(w, cfg.kernel_size, cfg.stride))
                )
                c_prev = c
            self.pooled_dim = c_prev * self.spatial[-1][1]
        self.head = Linear(self.pooled_dim, cfg.embedding_dim, rng, group, f"{group}.embed")

    def __call__(self, S) -> Tensor:
        x = S if isinstance(S, Tensor) else Tensor(S)
        if x.ndim != 3 or x.shape[1:] != self.segment_shape:
            raise DimensionError(f"encoder expects [B, {self.segment_shape[0]}, {self.segment_shape[1]}], got {x.shape}")
        B, T, F = x.shape
        if self.cfg.kind == "mlp":
            h = ad.reshape(x, (B * T, F))
            for layer in self.layers:
                h = ad.relu(layer(h))
            h = ad.mean(ad.reshape(h, (B, T, self.pooled_dim)), axis=1)
        else:
            h = ad.reshape(x, (B, 1, T, F))
            for layer in self.layers:
                h = ad.relu(layer(h))
            h = ad.reshape(ad.mean(h, axis=2), (B, self.pooled_dim))
        return self.head(h)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()] + self.head.parameters()


class MLPClassifier(Layer):
    """Affine layers with relu between them; raw logits out."""

    def __init__(self, dims: list[int], rng, group):
        self.layers = [Linear(a, b, rng, group, f"{group}.fc{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.in_dim = dims[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"classifier expects [B, {self.in_dim}], got {x.shape}")
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Decoder(Layer):
    """Fused feature ``[B, 2D]`` back to a segment-shaped ``[B, T, F]`` tensor.

    Mirrors the encoder: the mlp variant runs the hidden stack in reverse and
    repeats the per-bin output over time; the conv variant projects to the
    encoder's last feature map and upsamples with transposed convolutions.
    """

    def __init__(self, enc: Encoder, rng: np.random.Generator, group: str = "D_r"):
        cfg = enc.cfg
        self.in_dim = 2 * cfg.embedding_dim
        self.segment_shape = enc.segment_shape
        self.kind = cfg.kind
        T, F = self.segment_shape
        if cfg.kind == "mlp":
            dims = [self.in_dim, *reversed(cfg.hidden), F]
            self.layers = [Linear(a, b, rng, group, f"{group}.fc{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        else:
            self.spatial = enc.spatial
            chans = [1, *cfg.channels]
            self.c_last = chans[-1]
            self.f_last = self.spatial[-1][1]
            self.project = Linear(self.in_dim, self.c_last * self.f_last, rng, group, f"{group}.project")
            self.layers = [
                ConvTranspose2d(chans[i + 1], chans[i], cfg.kernel_size, cfg.stride, rng, group, f"{group}.deconv{i}")
                for i in reversed(range(len(cfg.channels)))
            ]

    def __call__(self, f_s: Tensor) -> Tensor:
        if f_s.ndim != 2 or f_s.shape[1] != self.in_dim:
            raise DimensionError(f"decoder expects [B, {self.in_dim}], got {f_s.shape}")
        B = f_s.shape[0]
        T, F = self.segment_shape
        if self.kind == "mlp":
            h = f_s
            for layer in self.layers[:-1]:
                h = ad.relu(layer(h))
            return ad.expand(self.layers[-1](h), axis=1, n=T)
        h = ad.reshape(self.project(f_s), (B, self.c_last, self.f_last))
        h = ad.expand(h, axis=2, n=self.spatial[-1][0])
        n = len(self.layers)
        for j, layer in enumerate(self.layers):
            h = ad.relu(h)
            h = layer(h, self.spatial[n - 1 - j])
        return ad.reshape(h, (B, T, F))

    def parameters(self):
        extra = [] if self.kind == "mlp" else self.project.parameters()
        return extra + [p for layer in self.layers for p in layer.parameters()]


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    segment_shape: tuple[int, int] = (298, 201)
    n_speakers: int = 8
    adv_hidden: tuple[int, ...] = (128, 128, 128)

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """The five learnable components plus feature fusion."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.n_speakers < 2:
            raise ParameterError(f"need at least 2 speakers, got {cfg.n_speakers}")
        self.cfg = cfg
        D = cfg.encoder.embedding_dim
        self.E_p = Encoder(cfg.encoder, cfg.segment_shape, rng, "E_p")
        self.E_e = Encoder(cfg.encoder, cfg.segment_shape, rng, "E_e")
        self.C_speaker = MLPClassifier([D, cfg.n_speakers], rng, "C_speaker")
        self.C_adv = MLPClassifier([D, *cfg.adv_hidden, cfg.n_speakers], rng, "C_adv")
        self.D_r = Decoder(self.E_p, rng, "D_r")
        self.param_groups = {
            "E_p": ParamGroup("E_p", self.E_p.parameters()),
            "E_e": ParamGroup("E_e", self.E_e.parameters()),
            "C_speaker": ParamGroup("C_speaker", self.C_speaker.parameters()),
            "C_adv": ParamGroup("C_adv", self.C_adv.parameters()),
            "D_r": ParamGroup("D_r", self.D_r.parameters()),
        }

    @property
    def embedding_dim(self) -> int:
        return self.cfg.encoder.embedding_dim

    def encode_p(self, S) -> Tensor:
        return self.E_p(S)

    def encode_e(self, S) -> Tensor:
        return self.E_e(S)

    def classify_speaker(self, f_p: Tensor) -> Tensor:
        return self.C_speaker(f_p)

    def classify_adv(self, f_e: Tensor) -> Tensor:
        return self.C_adv(f_e)

    def decode(self, f_s: Tensor) -> Tensor:
        return self.D_r(f_s)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for g in GROUP_NAMES for p in self.param_groups[g].params]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for g in self.param_groups.values():
            g.zero_grad()

    def init_e_from_p(self) -> None:
        init_from(self.param_groups["E_e"], self.param_groups["E_p"])


def fuse(f_p: Tensor, f_e: Tensor) -> Tensor:
    """Feature fusion: ``[f_p | f_e]``."""
    if f_p.shape != f_e.shape:
        raise DimensionError(f"fuse: f_p {f_p.shape} and f_e {f_e.shape} differ")
    return ad.concat(f_p, f_e)


def init_from(dst: ParamGroup, src: ParamGroup) -> None:
    """Copy ``src`` parameter values into ``dst`` (same architecture required)."""
    if len(dst.params) != len(src.params) or any(d.shape != s.shape for d, s in zip(dst.params, src.params)):
        raise ValidationError(f"cannot initialize {dst.name} from {src.name}: architectures differ")
    for d, s in zip(dst.params, src.params):
        d.data = s.data.copy()


def parameter_count(layer) -> int:
    return int(sum(p.data.size for p in layer.parameters()))
