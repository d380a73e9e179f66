"""Shape-preserving U-Net, architecture registry and checkpoint archives."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import CheckpointError, ConfigurationError, RegistryError, ShapeError

STRICT = "strict"
REFLECT = "reflect"


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "custom_unet"
    depth: int = 4
    base_channels: int = 48
    channel_multiplier: int = 2
    in_channels: int = 3
    out_channels: int = 3
    negative_slope: float = 0.1
    residual: bool = True

    def __post_init__(self):
        for name in ("depth", "base_channels", "channel_multiplier", "in_channels", "out_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"ModelSpec.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def level_channels(self) -> list[int]:
        return [self.base_channels * self.channel_multiplier ** k for k in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------
# Networks


class _DoubleConv(nn.Sequential):
    def __init__(self, c_in, c_out, slope):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=1, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(c_out, c_out, 3, stride=1, padding=1),
            nn.LeakyReLU(slope),
        )


class CustomUNet(nn.Module):
    """U-Net with strided-conv downsampling and transposed-conv upsampling.

    Each of the ``depth`` encoder levels runs two 3×3 convolutions and then
    halves the resolution with a stride-2 3×3 convolution (padding 1). A
    bottleneck block works at 1/2**depth resolution; each decoder level
    doubles the resolution with a stride-2 transposed convolution,
    concatenates the matching encoder features and runs two 3×3
    convolutions. A final 1×1 convolution maps to the output channels with no
    activation, so output H×W equals input H×W for H, W divisible by
    2**depth.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        slope = spec.negative_slope
        chans = spec.level_channels()
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = spec.in_channels
        for c in chans:
            self.encoders.append(_DoubleConv(c_prev, c, slope))
            self.downs.append(nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1), nn.LeakyReLU(slope)))
            c_prev = c
        self.bottleneck = _DoubleConv(c_prev, c_prev, slope)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans):
            self.ups.append(nn.ConvTranspose2d(c_prev, c, kernel_size=2, stride=2))
            self.decoders.append(_DoubleConv(2 * c, c, slope))
            c_prev = c
        self.head = nn.Conv2d(c_prev, spec.out_channels, kernel_size=1)
        self._check_skips()

    def _check_skips(self):
        for k, (enc, up, dec) in enumerate(zip(self.encoders, reversed(self.ups), reversed(self.decoders))):
            enc_out = enc[2].out_channels
            if up.out_channels != enc_out or dec[0].in_channels != 2 * enc_out:
                raise ShapeError(f"skip connection mismatch at level {k}: encoder {enc_out}, "
                                 f"upsample {up.out_channels}, decoder input {dec[0].in_channels}")

    def forward(self, x):
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for up, dec in zip(self.ups, self.decoders):
            x = up(x)
            skip = skips.pop()
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def __call__(self, x):
        out = super().__call__(x)
        return out + x if self.spec.residual else out


class GlobalBias(nn.Module):
    """Constant predictor: one learnable scalar broadcast to every output pixel."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return self.bias.expand(x.shape[0], self.spec.out_channels, *x.shape[2:])


# --------------------------------------------------------------------------
# Registry

_REGISTRY: dict[str, Callable[[ModelSpec], nn.Module]] = {}


def register_architecture(name: str, builder: Callable[[ModelSpec], nn.Module]) -> None:
    if name in _REGISTRY:
        raise RegistryError(f"architecture {name!r} is already registered")
    _REGISTRY[name] = builder


def unregister_architecture(name: str) -> None:
    _REGISTRY.pop(name, None)


def lookup(name: str) -> Callable[[ModelSpec], nn.Module]:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown architecture {name!r}; registered: {available_architectures()}") from None


def available_architectures() -> list[str]:
    return sorted(_REGISTRY)


register_architecture("custom_unet", CustomUNet)
register_architecture("global_bias", GlobalBias)

# --------------------------------------------------------------------------
# Trained model wrapper


@dataclass
class TrainedModel:
    spec: ModelSpec
    network: nn.Module
    training_meta: dict = field(default_factory=dict)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.network.state_dict().items()}

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())


def _he_init(module: nn.Module, gen: torch.Generator, slope: float) -> None:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel sees in_channels * (k / stride)**2 taps
                k_h, k_w = m.kernel_size
                s_h, s_w = m.stride
                fan_in = m.in_channels * max(1, (k_h // s_h) * (k_w // s_w))
            else:
                fan_in = m.weight[0].numel()
            std = gain / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


def build_model(spec: ModelSpec | None = None, init_seed: int = 0) -> TrainedModel:
    """Instantiate the registered architecture for ``spec`` with deterministic He-style init."""
    spec = spec or ModelSpec()
    network = lookup(spec.architecture)(spec)
    gen = torch.Generator().manual_seed(int(init_seed))
    _he_init(network, gen, spec.negative_slope)
    return TrainedModel(spec, network, {"init_seed": int(init_seed)})


def pad_to_multiple(x: torch.Tensor, divisor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    H, W = x.shape[-2:]
    ph, pw = (-H) % divisor, (-W) % divisor
    if ph == 0 and pw == 0:
        return x, (H, W)
    mode = "reflect" if ph < H and pw < W else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (H, W)


def forward(model: TrainedModel, batch, padding_policy: str = REFLECT, clamp: bool | None = None):
    """Run the network on an N×C×H×W batch (numpy or torch); returns the same array type.

    With ``padding_policy='reflect'`` inputs of any size are reflect-padded up
    to the next multiple of 2**depth and the output cropped back. In training
    mode the output is left unclamped; in eval mode it is clamped to [0, 1]
    unless ``clamp`` says otherwise.
    """
    as_numpy = isinstance(batch, np.ndarray)
    x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)) if as_numpy else batch
    if x.ndim != 4:
        raise ShapeError(f"expected an N×C×H×W batch, got shape {tuple(x.shape)}")
    net = model.network
    div = model.spec.divisor if isinstance(net, CustomUNet) else 1
    H, W = x.shape[-2:]
    if padding_policy == STRICT:
        if H % div or W % div:
            raise ShapeError(f"dims must be divisible by {div}; got {H}x{W}")
    elif padding_policy != REFLECT:
        raise ConfigurationError(f"unknown padding policy {padding_policy!r}")
    x, (H, W) = pad_to_multiple(x, div)
    if clamp is None:
        clamp = not net.training
    if net.training:
        y = net(x)
    else:
        with torch.no_grad():
            y = net(x)
    y = y[..., :H, :W]
    if clamp:
        y = y.clamp(0.0, 1.0)
    return y.detach().numpy() if as_numpy else y


# --------------------------------------------------------------------------
# Checkpoints: a zip archive with header.json plus one .npy per named array


def save_checkpoint(model: TrainedModel, path, optimizer_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "annoclean-ckpt/1", "spec": model.spec.to_dict(), "training_meta": model.training_meta}
    arrays = {f"param/{k}": v for k, v in model.parameters.items()}
    if optimizer_state:
        header["optimizer"] = optimizer_state.get("meta", {})
        arrays.update({f"optim/{k}": v for k, v in optimizer_state.get("arrays", {}).items()})
    tmp = path.with_suffix(path.suffix + ".tmp")
    # fixed timestamps keep the archive bytes reproducible
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", (1980, 1, 1, 0, 0, 0)),
                    json.dumps(header, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", (1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {}
            for info in zf.infolist():
                if info.filename.endswith(".npy"):
                    arrays[info.filename[:-4]] = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return header, arrays


def load_checkpoint(path, return_optimizer: bool = False):
    header, arrays = read_checkpoint(path)
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a malformed header: {exc}") from exc
    builder = lookup(spec.architecture)
    network = builder(spec)
    state = network.state_dict()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    missing = sorted(set(state) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks parameter {missing[0]!r}")
    for name, tensor in state.items():
        if tuple(tensor.shape) != params[name].shape:
            raise CheckpointError(f"shape mismatch for layer {name!r}: model expects {tuple(tensor.shape)}, "
                                  f"checkpoint has {params[name].shape}")
    network.load_state_dict({k: torch.from_numpy(params[k].copy()) for k in state})
    model = TrainedModel(spec, network, header.get("training_meta", {}))
    if not return_optimizer:
        return model
    optim = {"meta": header.get("optimizer", {}),
             "arrays": {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}}
    return model, optim
