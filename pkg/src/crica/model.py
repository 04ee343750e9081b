"""Full model: configuration, forward pipeline, checkpoints, parameter
accounting.

The pipeline per batch: backbone -> spatial-pyramid GeM (+class token) ->
cross-image encoder -> flatten + L2 normalize. The cross-image stage can be
bypassed (``use_crica=False``), in which case descriptors are the flattened
regional features.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, adapter_param_count
from .aggregation import clamp_gem_p, make_gem_p, spm_aggregate_batch
from .backbone import (
    BackboneConfig,
    BackboneParams,
    backbone_forward,
    backbone_frozen_param_count,
    init_backbone,
)
from .encoder import (
    CricaConfig,
    CricaParams,
    cross_image_encode,
    crica_param_count,
    flatten_and_normalize,
    init_crica,
    regional_sequences,
)
from .errors import BadCheckpoint, ConfigError
from .tensor import Tensor

CHECKPOINT_VERSION = 1
_OPT_MAGIC = b"OPT1"


def _strict_kwargs(cls, data: dict, where: str) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return data


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    adapter: AdapterConfig
    crica: CricaConfig
    gem_p_init: float = 3.0
    use_crica: bool = True
    seed: int = 0

    def __post_init__(self):
        d = self.backbone.embed_dim
        if self.adapter.embed_dim != d or self.crica.embed_dim != d:
            raise ConfigError(
                f"embed dims disagree: backbone {d}, adapter {self.adapter.embed_dim}, "
                f"encoder {self.crica.embed_dim}"
            )

    @property
    def descriptor_dim(self) -> int:
        return 14 * self.backbone.embed_dim

    def to_dict(self) -> dict:
        return {
            "backbone": dataclasses.asdict(self.backbone),
            "adapter": dataclasses.asdict(self.adapter),
            "crica": dataclasses.asdict(self.crica),
            "gem_p_init": self.gem_p_init,
            "use_crica": self.use_crica,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(_strict_kwargs(cls, data, "model config"))
        for key, sub in (("backbone", BackboneConfig), ("adapter", AdapterConfig),
                         ("crica", CricaConfig)):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**_strict_kwargs(sub, data[key], key))
        return cls(**data)


def desk_config(seed: int = 0, use_crica: bool = True) -> ModelConfig:
    """Small configuration sized for CPU experiments on 64x64 images."""
    return ModelConfig(
        backbone=BackboneConfig(),
        adapter=AdapterConfig.for_embed_dim(64),
        crica=CricaConfig(embed_dim=64, layers=2, heads=4, mlp_hidden=256),
        use_crica=use_crica,
        seed=seed,
    )


def full_scale_config(seed: int = 0) -> ModelConfig:
    """The reference configuration: 224x224 input, ViT-B/14 geometry."""
    return ModelConfig(
        backbone=BackboneConfig(image_size=224, patch_size=14, embed_dim=768,
                                depth=12, heads=12),
        adapter=AdapterConfig(embed_dim=768),
        crica=CricaConfig(embed_dim=768, layers=2, heads=12, mlp_hidden=2048),
        seed=seed,
    )


class Model:
    def __init__(self, cfg: ModelConfig, backbone: BackboneParams, gem_p: Tensor,
                 crica: Optional[CricaParams]):
        self.cfg = cfg
        self.backbone = backbone
        self.gem_p = gem_p
        self.crica = crica

    @classmethod
    def build(cls, cfg: ModelConfig, dtype=np.float32) -> "Model":
        backbone = init_backbone(cfg.backbone, cfg.adapter,
                                 np.random.default_rng([cfg.seed, 1]), dtype=dtype)
        gem_p = make_gem_p(cfg.gem_p_init, dtype=dtype)
        crica = init_crica(cfg.crica, np.random.default_rng([cfg.seed, 2]),
                           dtype=dtype) if cfg.use_crica else None
        return cls(cfg, backbone, gem_p, crica)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self.backbone.named_params():
            yield f"backbone.{name}", p
        yield "gem_p", self.gem_p
        if self.crica is not None:
            for name, p in self.crica.named_params():
                yield f"crica.{name}", p

    def trainable_params(self) -> list[Tensor]:
        return [p for _, p in self.named_params() if p.requires_grad]

    def clamp_constraints(self) -> None:
        clamp_gem_p(self.gem_p)


def forward_descriptors(model: Model, images: Tensor) -> Tensor:
    """Images (B, 3, H, W) -> unit-norm descriptors (B, 14*D).

    The batch is the atomic unit: with the cross-image encoder enabled,
    every descriptor depends on its batch co-members.
    """
    cls_tok, maps = backbone_forward(images, model.cfg.backbone, model.backbone)
    feats = spm_aggregate_batch(cls_tok, maps, model.gem_p)
    if model.cfg.use_crica:
        feats = cross_image_encode(regional_sequences(feats), model.cfg.crica, model.crica)
    return flatten_and_normalize(feats)


def extract_descriptors(model: Model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference over a fixed image order; the last partial batch is
    processed as-is. Returns float32 (n, 14*D)."""
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    out = []
    for start in range(0, len(images), batch_size):
        chunk = Tensor(np.ascontiguousarray(images[start:start + batch_size], dtype=np.float32))
        out.append(forward_descriptors(model, chunk).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.descriptor_dim), np.float32)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def param_counts(cfg: ModelConfig) -> dict:
    """Closed-form counts: no allocation, safe at full scale."""
    frozen = backbone_frozen_param_count(cfg.backbone)
    adapters = cfg.backbone.depth * adapter_param_count(cfg.adapter)
    encoder = crica_param_count(cfg.crica) if cfg.use_crica else 0
    gem = 1
    return {
        "frozen_backbone": frozen,
        "adapters": adapters,
        "encoder": encoder,
        "gem": gem,
        "trainable": adapters + encoder + gem,
        "total": frozen + adapters + encoder + gem,
    }


# ---------------------------------------------------------------------------
# checkpoint format: u32 version, u32 length, UTF-8 JSON of the model config,
# then every parameter in declaration order as raw float32 little-endian.
# An optional "OPT1" tail carries optimizer state for resuming.
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int
    step: int
    lr: float
    moments1: list[np.ndarray]
    moments2: list[np.ndarray]


def save_checkpoint(path, model: Model, state: Optional[TrainState] = None) -> None:
    blob = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, p in model.named_params():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        if state is not None:
            fh.write(_OPT_MAGIC)
            fh.write(struct.pack("<IId", state.epoch, state.step, state.lr))
            for m, v in zip(state.moments1, state.moments2):
                fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, Optional[TrainState]]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise BadCheckpoint(f"{path}: truncated header")
        version, length = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise BadCheckpoint(f"{path}: unsupported checkpoint version {version}")
        try:
            cfg = ModelConfig.from_dict(json.loads(fh.read(length).decode("utf-8")))
        except (ValueError, ConfigError) as exc:
            raise BadCheckpoint(f"{path}: bad config header: {exc}") from exc
        model = Model.build(cfg)
        for name, p in model.named_params():
            raw = fh.read(p.size * 4)
            if len(raw) != p.size * 4:
                raise BadCheckpoint(f"{path}: truncated at parameter {name}")
            p.data[...] = np.frombuffer(raw, dtype="<f4").reshape(p.shape)
        tail = fh.read(4)
        if tail == b"":
            return model, None
        if tail != _OPT_MAGIC:
            raise BadCheckpoint(f"{path}: unexpected trailing bytes")
        epoch, step, lr = struct.unpack("<IId", fh.read(16))
        m1, m2 = [], []
        for p in model.trainable_params():
            m1.append(np.frombuffer(fh.read(p.size * 4), dtype="<f4").reshape(p.shape).copy())
            m2.append(np.frombuffer(fh.read(p.size * 4), dtype="<f4").reshape(p.shape).copy())
        return model, TrainState(epoch=epoch, step=step, lr=lr, moments1=m1, moments2=m2)
