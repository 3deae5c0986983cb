"""Mixture of stochastic experts for segmentation.

Layout is channel-last internally: feature maps are ``[B, H, W, F]`` and a
batch of predictions is ``[B, N, H*W, C]`` with sample index
``i = k * S + t`` (expert-major). Images come in as ``[B, channels, H, W]``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class ModelConfig:
    in_channels: int = 3
    height: int = 16
    width: int = 16
    num_classes: int = 7
    num_experts: int = 4
    latent_dim: int = 1
    enc_features: int = 32
    dec_features: int = 16
    head_features: int = 16
    gate_hidden: int = 32
    kernel: int = 3
    init_scale: float = 1.0  # prior sigma at initialization
    uniform_gate: bool = False  # ablation: fixed pi = 1/K

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class ExpertPrior:
    mean: np.ndarray
    scale: float


@dataclass
class SegmentationSample:
    class_map: np.ndarray
    probs: np.ndarray | None = None

    def validate(self, num_classes: int) -> None:
        if self.class_map.min() < 0 or self.class_map.max() >= num_classes:
            raise ValueError("class id out of range")
        if self.probs is not None and not np.allclose(self.probs.sum(axis=0), 1.0, atol=1e-9):
            raise ValueError("per-pixel probabilities do not sum to 1")


@dataclass
class EmpiricalDistribution:
    """Weighted set of class maps, ``maps[i]`` of shape (H, W)."""

    maps: np.ndarray
    weights: np.ndarray
    experts: np.ndarray | None = None
    probs: np.ndarray | None = None  # (n, H, W, C) when kept

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.maps) != len(self.weights):
            raise ValueError("one weight per sample required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got sum {self.weights.sum()}")

    def __len__(self):
        return len(self.maps)

    @property
    def samples(self) -> list[SegmentationSample]:
        probs = self.probs if self.probs is not None else [None] * len(self)
        return [SegmentationSample(m, None if p is None else np.moveaxis(p, -1, 0))
                for m, p in zip(self.maps, probs)]


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _he(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


class MoseModel:
    """Shared encoder, K Gaussian expert priors, noise-fusion decoder and gate.

    Parameters live in ``self.params`` (name -> Tensor). Those prefixed
    ``gate`` form the gating parameters; everything else is expert-side.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        kk = c.kernel * c.kernel
        p = {}

        def dense(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else _he(rng, fan_in, fan_out)
            p[name + ".w"] = w
            p[name + ".b"] = np.zeros(fan_out)

        dense("enc1", kk * c.in_channels, c.enc_features)
        dense("enc2", kk * c.enc_features, c.enc_features)
        dense("dec1", c.enc_features, c.dec_features)
        dense("dec2", c.dec_features, c.dec_features)
        # fusion projections stored as [L, F2]: z @ w
        p["fuse.w1"] = rng.standard_normal((c.latent_dim, c.dec_features)) / np.sqrt(c.latent_dim)
        p["fuse.w2"] = rng.standard_normal((c.latent_dim, c.dec_features)) / np.sqrt(c.latent_dim)
        dense("head1", c.dec_features, c.head_features)
        dense("head2", c.head_features, c.head_features)
        dense("head3", c.head_features, c.num_classes)
        p["prior.mean"] = rng.standard_normal((c.num_experts, c.latent_dim))
        p["prior.scale_raw"] = np.full(c.num_experts, softplus_inv(c.init_scale))
        dense("gate1", c.enc_features, c.gate_hidden)
        dense("gate2", c.gate_hidden, c.gate_hidden)
        dense("gate3", c.gate_hidden, c.num_experts, zero=True)
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    # ------------------------------------------------------------------ params

    def gate_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("gate")]

    def expert_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("gate")]

    def parameter_groups(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for k, t in self.params.items():
            g = {"enc": "encoder", "dec": "decoder", "fus": "fusion", "hea": "head",
                 "pri": "priors", "gat": "gating"}[k[:3]]
            groups[g] = groups.get(g, 0) + t.value.size
        return groups

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {v.shape} != {t.shape}")
            t.value = v.copy()

    def priors(self) -> list[ExpertPrior]:
        mean = self.params["prior.mean"].value
        scale = np.logaddexp(0.0, self.params["prior.scale_raw"].value)
        return [ExpertPrior(mean[k].copy(), float(scale[k])) for k in range(len(scale))]

    # ----------------------------------------------------------------- forward

    def _images(self, x) -> Tensor:
        xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if xv.ndim == 3:
            xv = xv[None]
        c = self.config
        if xv.shape[1:] != (c.in_channels, c.height, c.width):
            raise DimensionError(
                f"image shape {xv.shape[1:]} does not match configured "
                f"{(c.in_channels, c.height, c.width)}")
        return Tensor(np.ascontiguousarray(np.transpose(xv, (0, 2, 3, 1))))

    def encode(self, x) -> Tensor:
        """Global representation u_g, ``[B, H, W, F1]``."""
        p, k = self.params, self.config.kernel
        h = self._images(x)
        h = ad.relu(ad.linear(ad.im2col(h, k), p["enc1.w"], p["enc1.b"]))
        return ad.relu(ad.linear(ad.im2col(h, k), p["enc2.w"], p["enc2.b"]))

    def decode_dense(self, u_g: Tensor) -> Tensor:
        """Dense feature map u_d, ``[B, H*W, F2]``."""
        p = self.params
        h = ad.relu(ad.linear(u_g, p["dec1.w"], p["dec1.b"]))
        h = ad.relu(ad.linear(h, p["dec2.w"], p["dec2.b"]))
        b, hh, ww, f = h.shape
        return ad.reshape(h, (b, hh * ww, f))

    def gate(self, u_g: Tensor) -> Tensor:
        """Expert probabilities pi(x), ``[B, K]``."""
        p = self.params
        if self.config.uniform_gate:
            k = self.config.num_experts
            return Tensor(np.full((u_g.shape[0], k), 1.0 / k))
        pooled = ad.avg_pool_global(u_g, spatial_axes=(1, 2))
        h = ad.relu(ad.linear(pooled, p["gate1.w"], p["gate1.b"]))
        h = ad.relu(ad.linear(h, p["gate2.w"], p["gate2.b"]))
        return ad.softmax(ad.linear(h, p["gate3.w"], p["gate3.b"]), axis=-1)

    def prior_scale(self) -> Tensor:
        return ad.softplus(self.params["prior.scale_raw"])

    def sample_latent(self, experts, eps) -> Tensor:
        """Reparameterised codes z = m_k + sigma_k * eps.

        ``experts`` is an int array of expert ids of any shape; ``eps`` has
        that shape plus a trailing latent axis.
        """
        experts = np.asarray(experts)
        mean = ad.getitem(self.params["prior.mean"], experts)
        scale = ad.getitem(self.prior_scale(), experts)
        return ad.add(mean, ad.mul(ad.reshape(scale, experts.shape + (1,)), Tensor(eps)))

    def fuse_and_decode(self, u_d: Tensor, z: Tensor) -> Tensor:
        """Logits ``[B, N, H*W, C]`` from u_d ``[B, P, F2]`` and codes z ``[B, N, L]``.

        Every pixel feature is shifted by w1 z and scaled by w2 z, then passed
        through three 1x1 layers.
        """
        p = self.params
        if z.ndim != 3 or z.shape[0] != u_d.shape[0] or z.shape[2] != self.config.latent_dim:
            raise DimensionError(f"z shape {z.shape} incompatible with u_d {u_d.shape}")
        zb = ad.matmul(z, p["fuse.w1"])  # [B, N, F2]
        zw = ad.matmul(z, p["fuse.w2"])
        b, n, f = zb.shape
        ud = ad.reshape(u_d, (b, 1) + u_d.shape[1:])
        fused = ad.mul(ad.add(ud, ad.reshape(zb, (b, n, 1, f))), ad.reshape(zw, (b, n, 1, f)))
        h = ad.relu(ad.linear(fused, p["head1.w"], p["head1.b"]))
        h = ad.relu(ad.linear(h, p["head2.w"], p["head2.b"]))
        return ad.linear(h, p["head3.w"], p["head3.b"])

    def forward_compact(self, x, samples_per_expert: int, rng: np.random.Generator):
        """Training-time forward: S codes per expert for every image.

        Returns ``(logits [B, K*S, P, C], pi [B, K], experts [K*S])``.
        """
        c = self.config
        u_g = self.encode(x)
        pi = self.gate(u_g)
        u_d = self.decode_dense(u_g)
        b = u_g.shape[0]
        experts = np.repeat(np.arange(c.num_experts), samples_per_expert)
        eps = rng.standard_normal((b, len(experts), c.latent_dim))
        z = self.sample_latent(np.broadcast_to(experts, (b, len(experts))), eps)
        return self.fuse_and_decode(u_d, z), pi, experts

    # -------------------------------------------------------------- prediction

    def _to_dist(self, logits: np.ndarray, weights: np.ndarray, experts, keep_probs: bool):
        c = self.config
        maps = logits.argmax(axis=-1).reshape(-1, c.height, c.width).astype(np.uint8)
        probs = None
        if keep_probs:
            z = logits - logits.max(axis=-1, keepdims=True)
            e = np.exp(z)
            probs = (e / e.sum(axis=-1, keepdims=True)).reshape(-1, c.height, c.width, c.num_classes)
        return EmpiricalDistribution(maps, weights, experts, probs)

    def predict_compact_batch(self, x, samples_per_expert: int, rng: np.random.Generator,
                              keep_probs: bool = False) -> list[EmpiricalDistribution]:
        if samples_per_expert < 1:
            raise ValueError("samples_per_expert must be >= 1")
        logits, pi, experts = self.forward_compact(x, samples_per_expert, rng)
        out = []
        for i in range(logits.shape[0]):
            w = np.repeat(pi.value[i], samples_per_expert) / samples_per_expert
            w = w / w.sum()
            out.append(self._to_dist(logits.value[i], w, experts, keep_probs))
        return out

    def predict_standard_batch(self, x, num_samples: int, rng: np.random.Generator,
                               keep_probs: bool = False) -> list[EmpiricalDistribution]:
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        c = self.config
        u_g = self.encode(x)
        pi = self.gate(u_g).value
        u_d = self.decode_dense(u_g)
        b = pi.shape[0]
        cdf = np.cumsum(pi, axis=1)
        draws = rng.random((b, num_samples))
        experts = np.stack([np.searchsorted(cdf[i], draws[i], side="right") for i in range(b)])
        experts = np.minimum(experts, c.num_experts - 1)
        eps = rng.standard_normal((b, num_samples, c.latent_dim))
        logits = self.fuse_and_decode(u_d, self.sample_latent(experts, eps)).value
        w = np.full(num_samples, 1.0 / num_samples)
        return [self._to_dist(logits[i], w, experts[i], keep_probs) for i in range(b)]

    def predict_compact(self, x, samples_per_expert: int, rng, keep_probs=False) -> EmpiricalDistribution:
        return self.predict_compact_batch(np.asarray(x)[None], samples_per_expert, rng, keep_probs)[0]

    def predict_standard(self, x, num_samples: int, rng, keep_probs=False) -> EmpiricalDistribution:
        return self.predict_standard_batch(np.asarray(x)[None], num_samples, rng, keep_probs)[0]


# ----------------------------------------------------------------------------
# checkpoint container
#
#   8 bytes   magic b"MOSECKPT"
#   4 bytes   little-endian uint32 format version
#   8 bytes   little-endian uint64 header length n
#   n bytes   UTF-8 JSON header: version, model_config, config_echo (verbatim
#             config text), meta, tensors [{name, shape, offset, nbytes}]
#   rest      concatenated tensor payloads, little-endian float64, row-major

CKPT_MAGIC = b"MOSECKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], model_config: ModelConfig,
                    config_echo: str = "", meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({
        "version": CKPT_VERSION,
        "model_config": asdict(model_config),
        "config_echo": config_echo,
        "meta": meta or {},
        "tensors": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    return path


def load_checkpoint(path):
    """Returns ``(tensors, model_config, config_echo, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a MoSE checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, ModelConfig.from_dict(header["model_config"]), header["config_echo"], header["meta"]


def save_model(path, model: MoseModel, config_echo: str = "", meta: dict | None = None) -> Path:
    return save_checkpoint(path, model.state_dict(), model.config, config_echo, meta)


def load_model(path) -> tuple[MoseModel, str, dict]:
    tensors, cfg, echo, meta = load_checkpoint(path)
    model = MoseModel(cfg)
    model.load_state_dict({k: v for k, v in tensors.items() if k in model.params})
    return model, echo, meta
