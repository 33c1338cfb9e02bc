"""Disentangling reconstruction network: two encoders, a decoder, a classifier.

Both encoders share one layout: per level a 3x3 conv + ReLU, with a 2x
average pool between levels. The last level's map is the bottleneck; the
earlier ones are skip features. The latent vector of an encoder is the
global average pool of its bottleneck (so its length is the bottleneck
channel count).

The decoder walks back up: at each level it upsamples (nearest, then a
1x1 conv), adds the invariant encoder's skip feature, applies a ReLU and,
below the top level, one more 3x3 conv + ReLU. A final 3x3 conv maps to
one channel and the zero-filled input is added back (residual output).
A 1x1 conv commutes with nearest upsampling, so it is evaluated at the low
resolution first; the result is identical and four times cheaper.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fcrt
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    avg_pool_2x,
    clamp_max,
    conv2d,
    global_avg_pool_flatten,
    l1_loss,
    latent_distance,
    linear,
    mean,
    relu,
    scale,
    softmax_cross_entropy,
    tensor_sum,
    upsample_2x,
)

MEASURES = ("l1", "l2", "cosine")


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    kernel: int = 3
    classifier_hidden: int = 64
    num_modalities: int = 2
    residual: bool = True

    @property
    def latent_dim(self) -> int:
        return self.channels[-1]

    @property
    def levels(self) -> int:
        return len(self.channels)


# ---------------------------------------------------------------------------
# parameters


def _rng_for(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode())])


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv(params: dict, rng, name: str, c_in: int, c_out: int, k: int) -> None:
    params[f"{name}.weight"] = Parameter(_kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k), f"{name}.weight")
    params[f"{name}.bias"] = Parameter(np.zeros(c_out), f"{name}.bias")


def init_encoder(arch: ArchConfig, seed: int, prefix: str) -> dict[str, Parameter]:
    rng = _rng_for(seed, prefix)
    params: dict[str, Parameter] = {}
    c_prev = arch.in_channels
    for lvl, ch in enumerate(arch.channels):
        _conv(params, rng, f"{prefix}.level{lvl}.conv1", c_prev, ch, arch.kernel)
        c_prev = ch
    return params


def init_decoder(arch: ArchConfig, seed: int, prefix: str = "D") -> dict[str, Parameter]:
    rng = _rng_for(seed, prefix)
    params: dict[str, Parameter] = {}
    ch = arch.channels
    for lvl in reversed(range(arch.levels - 1)):
        _conv(params, rng, f"{prefix}.up{lvl}", ch[lvl + 1], ch[lvl], 1)
        if lvl > 0:
            _conv(params, rng, f"{prefix}.level{lvl}.conv1", ch[lvl], ch[lvl], arch.kernel)
    _conv(params, rng, f"{prefix}.out", ch[0], arch.in_channels, arch.kernel)
    return params


def init_classifier(arch: ArchConfig, seed: int, prefix: str = "C") -> dict[str, Parameter]:
    rng = _rng_for(seed, prefix)
    dims = [arch.latent_dim, arch.classifier_hidden, arch.classifier_hidden, arch.num_modalities]
    params: dict[str, Parameter] = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params[f"{prefix}.fc{i}.weight"] = Parameter(_kaiming_uniform(rng, (a, b), a), f"{prefix}.fc{i}.weight")
        params[f"{prefix}.fc{i}.bias"] = Parameter(np.zeros(b), f"{prefix}.fc{i}.bias")
    return params


@dataclass
class ModelParams:
    """Parameter sets of one client's local model.

    Only ``invariant_encoder`` and ``decoder`` are ever aggregated; the
    specific encoder stays on the client (empty for the plain baseline model).
    """

    invariant_encoder: dict[str, Parameter]
    decoder: dict[str, Parameter]
    specific_encoder: dict[str, Parameter] = field(default_factory=dict)

    def aggregable(self) -> dict[str, Parameter]:
        return {**self.invariant_encoder, **self.decoder}

    def all(self) -> dict[str, Parameter]:
        return {**self.invariant_encoder, **self.decoder, **self.specific_encoder}

    def load_aggregable(self, values: dict[str, np.ndarray]) -> None:
        own = self.aggregable()
        if set(values) != set(own):
            raise KeyError("aggregable name sets differ")
        for name, arr in values.items():
            own[name].data[...] = arr


def init_model(arch: ArchConfig, seed: int, specific_tag: str | None = "E_S") -> ModelParams:
    """Fresh model. ``specific_tag=None`` builds the plain single-encoder model."""
    return ModelParams(
        invariant_encoder=init_encoder(arch, seed, "E_I"),
        decoder=init_decoder(arch, seed, "D"),
        specific_encoder=init_encoder(arch, seed, specific_tag) if specific_tag else {},
    )


def _prefix_of(params: dict[str, Parameter]) -> str:
    return next(iter(params)).split(".", 1)[0]


# ---------------------------------------------------------------------------
# forward pieces


def _check_input(x: Tensor, arch: ArchConfig) -> None:
    if x.data.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"expected N x {arch.in_channels} x H x W input, got {x.shape}")
    factor = 2 ** (arch.levels - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"input size {x.shape[2]}x{x.shape[3]} not divisible by {factor}")


def _encode(params: dict[str, Parameter], x: Tensor, arch: ArchConfig) -> tuple[Tensor, list[Tensor]]:
    _check_input(x, arch)
    prefix = _prefix_of(params)
    h = x
    levels = []
    for lvl in range(arch.levels):
        if lvl:
            h = avg_pool_2x(h)
        h = relu(conv2d(h, params[f"{prefix}.level{lvl}.conv1.weight"], params[f"{prefix}.level{lvl}.conv1.bias"]))
        levels.append(h)
    return levels[-1], levels[:-1]


def encode_specific(params: ModelParams, x: Tensor, arch: ArchConfig) -> tuple[Tensor, Tensor]:
    """Specific-encoder bottleneck map and its pooled latent z^S."""
    if not params.specific_encoder:
        raise ValueError("model has no specific encoder")
    feat, _ = _encode(params.specific_encoder, x, arch)
    return feat, global_avg_pool_flatten(feat)


def encode_invariant(params: ModelParams, x: Tensor, arch: ArchConfig) -> tuple[Tensor, list[Tensor], Tensor]:
    """Invariant-encoder bottleneck map, skip features (fine to coarse) and z^I."""
    feat, skips = _encode(params.invariant_encoder, x, arch)
    return feat, skips, global_avg_pool_flatten(feat)


def fuse_and_decode(
    params: ModelParams,
    feat_i: Tensor,
    feat_s: Tensor | None,
    skips: list[Tensor],
    arch: ArchConfig,
    use_fusion: bool = True,
    residual: Tensor | None = None,
) -> Tensor:
    if use_fusion:
        if feat_s is None:
            raise ValueError("fusion requested without specific features")
        if feat_s.shape != feat_i.shape:
            raise ShapeError(f"cannot fuse feature maps {feat_i.shape} and {feat_s.shape}")
        h = add(feat_i, feat_s)
    else:
        h = feat_i
    d = params.decoder
    for lvl in reversed(range(arch.levels - 1)):
        h = upsample_2x(conv2d(h, d[f"D.up{lvl}.weight"], d[f"D.up{lvl}.bias"]))
        h = relu(add(h, skips[lvl]))
        if lvl > 0:
            h = relu(conv2d(h, d[f"D.level{lvl}.conv1.weight"], d[f"D.level{lvl}.conv1.bias"]))
    out = conv2d(h, d["D.out.weight"], d["D.out.bias"])
    if arch.residual and residual is not None:
        out = add(out, residual)
    return out


def reconstruct(params: ModelParams, x: Tensor, arch: ArchConfig, use_fusion: bool = True) -> Tensor:
    """Full local model: both encoders (when present), fusion, decoder."""
    feat_i, skips, _ = encode_invariant(params, x, arch)
    feat_s = encode_specific(params, x, arch)[0] if (use_fusion and params.specific_encoder) else None
    return fuse_and_decode(params, feat_i, feat_s, skips, arch, use_fusion and feat_s is not None, residual=x)


def classify(params: dict[str, Parameter], z: Tensor) -> Tensor:
    """MLP logits for a batch of specific latents (N, d) -> (N, J)."""
    prefix = _prefix_of(params)
    w1 = params[f"{prefix}.fc1.weight"]
    if z.data.ndim != 2 or z.shape[1] != w1.shape[0]:
        raise ShapeError(f"classifier expects N x {w1.shape[0]} latents, got {z.shape}")
    h = relu(linear(z, w1, params[f"{prefix}.fc1.bias"]))
    h = relu(linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return linear(h, params[f"{prefix}.fc3.weight"], params[f"{prefix}.fc3.bias"])


# ---------------------------------------------------------------------------
# losses


def recon_loss(reconstruction: Tensor, y: Tensor) -> Tensor:
    return l1_loss(reconstruction, y)


def intra_loss(z_i: Tensor, z_s: Tensor, measure: str = "l1", cap: float = 10.0) -> Tensor:
    """Negative distance between the two latents, saturating at ``-cap``."""
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    return scale(mean(clamp_max(latent_distance(z_i, z_s, measure), cap)), -1.0)


def cross_loss(z_k: Tensor, others: list[Tensor], measure: str = "l1") -> Tensor:
    """Batch mean of the summed distances from ``z_k`` to every other client's latents."""
    if not others:
        return scale(tensor_sum(z_k), 0.0)
    total = None
    for z_o in others:
        term = latent_distance(z_k, z_o, measure)
        total = term if total is None else add(total, term)
    return mean(total)


def aux_loss(classifier: dict[str, Parameter], z_s: Tensor, one_hot: np.ndarray) -> tuple[Tensor, Tensor]:
    logits = classify(classifier, z_s)
    return softmax_cross_entropy(logits, one_hot), logits


def one_hot(index: int, n: int, rows: int = 1) -> np.ndarray:
    if not 0 <= index < n:
        raise ValueError(f"class index {index} outside [0, {n})")
    out = np.zeros((rows, n))
    out[:, index] = 1.0
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``params.fcrt`` (concatenated FCRT records) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(directory / "params.fcrt", "wb") as fh:
        for name in sorted(tensors):
            blob = fcrt.encode(tensors[name])
            entries[name] = {"offset": offset, "shape": list(np.shape(tensors[name]))}
            fh.write(blob)
            offset += len(blob)
    manifest = {"format": "fcrt-checkpoint", "version": 1, "meta": meta or {}, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    with open(directory / "params.fcrt", "rb") as fh:
        for name, entry in manifest["tensors"].items():
            fh.seek(entry["offset"])
            arr = fcrt.read_record(fh)
            if list(arr.shape) != entry["shape"]:
                raise fcrt.FormatError(f"{name}: manifest shape {entry['shape']} != stored {list(arr.shape)}")
            tensors[name] = arr
    return tensors, manifest["meta"]


def arch_to_dict(arch: ArchConfig) -> dict:
    d = asdict(arch)
    d["channels"] = list(arch.channels)
    return d


def arch_from_dict(d: dict) -> ArchConfig:
    d = dict(d)
    d["channels"] = tuple(d["channels"])
    return ArchConfig(**d)
