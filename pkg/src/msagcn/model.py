"""Full network assembly and checkpoint serialization.

Per-scale branches of stacked spatio-temporal blocks exchange
information through cross-scale fusion at the configured stages, coarse
branches are expanded back to the finest skeleton, fused by scale
attention, refined by one more spatio-temporal block, and classified.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import (
    ConfigurationError,
    ScalePyramid,
    SkeletonGraph,
    coarsen_features,
    expand_features,
    pyramid_from_tables,
)
from .layers import (
    AsstGcnBlock,
    ClassifierHead,
    CsfmBlock,
    Module,
    ScaleAttentionFusion,
)
from .tensor import Parameter

CHECKPOINT_MAGIC = b"MSAG"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a checkpoint of a supported version."""


class CheckpointCorruptError(ValueError):
    """The checkpoint ends prematurely or is internally inconsistent."""


@dataclass(frozen=True)
class StageConfig:
    channels: int
    asst_blocks: int = 1   # spatio-temporal blocks per scale in this stage
    csfm_blocks: int = 0   # cross-scale fusion passes after the blocks
    stride: int = 1        # temporal stride of the stage's first block

    def to_dict(self):
        return {
            "channels": self.channels,
            "asst_blocks": self.asst_blocks,
            "csfm_blocks": self.csfm_blocks,
            "stride": self.stride,
        }


DEFAULT_STAGES = (
    StageConfig(32, 1, 1, 1),
    StageConfig(64, 1, 1, 2),
    StageConfig(128, 1, 0, 2),
    StageConfig(256, 1, 0, 2),
)


@dataclass(frozen=True)
class MsaGcnConfig:
    """Every architectural hyperparameter of the network."""

    scales: tuple = (0, 1, 2)
    stages: tuple = DEFAULT_STAGES
    kernel_pair: tuple = (5, 9)
    num_classes: int = 4
    input_channels: int = 3
    post_fusion_channels: int | None = None
    temporal_mode: str = "astcn"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(
            self,
            "stages",
            tuple(s if isinstance(s, StageConfig) else StageConfig(**s)
                  for s in self.stages),
        )
        object.__setattr__(self, "kernel_pair", tuple(self.kernel_pair))
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        if len(set(self.scales)) != len(self.scales) or list(self.scales) != sorted(self.scales):
            raise ConfigurationError(f"scales must be sorted and unique, got {self.scales}")
        if not self.scales or self.scales[0] != 0:
            raise ConfigurationError("the finest scale (index 0) must always be used")
        k1, k2 = self.kernel_pair
        if k1 % 2 == 0 or k2 % 2 == 0 or k1 == k2:
            raise ConfigurationError(f"kernel pair must be odd and distinct, got {self.kernel_pair}")
        for s in self.stages:
            if s.channels < 1 or s.asst_blocks < 1 or s.csfm_blocks < 0 or s.stride not in (1, 2):
                raise ConfigurationError(f"invalid stage plan entry {s}")
        if self.temporal_mode not in ("astcn", "single_tcn"):
            raise ConfigurationError(f"unknown temporal_mode {self.temporal_mode!r}")

    @property
    def final_channels(self) -> int:
        return self.post_fusion_channels or self.stages[-1].channels

    def to_dict(self):
        return {
            "scales": list(self.scales),
            "stages": [s.to_dict() for s in self.stages],
            "kernel_pair": list(self.kernel_pair),
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "post_fusion_channels": self.post_fusion_channels,
            "temporal_mode": self.temporal_mode,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "scales", "stages", "kernel_pair", "num_classes",
            "input_channels", "post_fusion_channels", "temporal_mode",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class MsaGcn(Module):
    """The assembled multiscale network.  Use :func:`build` to construct."""

    def __init__(self, config: MsaGcnConfig, pyramid: ScalePyramid, rng):
        if max(config.scales) >= len(pyramid.scales):
            raise ConfigurationError(
                f"config selects scale {max(config.scales)} but the pyramid "
                f"has only {len(pyramid.scales)} scales"
            )
        self.config = config
        self.pyramid = pyramid
        self.scale_graphs = [pyramid.scales[i] for i in config.scales]
        self.scale_maps = [pyramid.map_from_finest(i) for i in config.scales]

        # input standardization statistics, set from the training split
        self.input_mean = Parameter(np.zeros(config.input_channels), requires_grad=False)
        self.input_std = Parameter(np.ones(config.input_channels), requires_grad=False)

        n_scales = len(config.scales)
        cin = config.input_channels
        self.stage_blocks = []
        self.stage_csfm = []
        for stage in config.stages:
            per_scale = []
            for g in self.scale_graphs:
                blocks = []
                c = cin
                for b in range(stage.asst_blocks):
                    blocks.append(AsstGcnBlock(
                        c, stage.channels, g,
                        stage.stride if b == 0 else 1,
                        config.kernel_pair, rng,
                        temporal_mode=config.temporal_mode,
                    ))
                    c = stage.channels
                per_scale.append(blocks)
            self.stage_blocks.append(per_scale)
            passes = []
            if n_scales > 1:
                for _ in range(stage.csfm_blocks):
                    pairs = []
                    for _ in range(n_scales - 1):
                        # fine <- coarse and coarse <- fine, per adjacent pair
                        pairs.append([CsfmBlock(stage.channels, rng),
                                      CsfmBlock(stage.channels, rng)])
                    passes.append(pairs)
            self.stage_csfm.append(passes)
            cin = stage.channels

        self.fusion = ScaleAttentionFusion(cin, n_scales, rng)
        self.final_block = AsstGcnBlock(
            cin, config.final_channels, self.scale_graphs[0], 1,
            config.kernel_pair, rng, temporal_mode=config.temporal_mode,
        )
        self.head = ClassifierHead(config.final_channels, config.num_classes, rng)

    def forward(self, x: T.Tensor, training: bool = False) -> T.Tensor:
        """Map a [B, C, T, V] batch to a [B, num_classes] distribution."""
        finest = self.scale_graphs[0].vertex_count
        if x.ndim != 4 or x.shape[1] != self.config.input_channels or x.shape[3] != finest:
            raise T.ShapeError(
                f"expected input [B, {self.config.input_channels}, T, {finest}], "
                f"got {x.shape}"
            )
        shift = T.Tensor(-self.input_mean.data[None, :, None, None])
        scale = T.Tensor(1.0 / self.input_std.data[None, :, None, None])
        x = (x + shift) * scale

        feats = [x if m is None else coarsen_features(x, m) for m in self.scale_maps]
        for per_scale, passes in zip(self.stage_blocks, self.stage_csfm):
            feats = [self._run_blocks(blocks, f, training)
                     for blocks, f in zip(per_scale, feats)]
            for pairs in passes:
                for i, (fine_from_coarse, coarse_from_fine) in enumerate(pairs):
                    fa, fb = feats[i], feats[i + 1]
                    feats[i] = fine_from_coarse.forward(fa, fb)
                    feats[i + 1] = coarse_from_fine.forward(fb, fa)

        expanded = [f if m is None else expand_features(f, m)
                    for f, m in zip(feats, self.scale_maps)]
        fused = self.fusion.forward(expanded)
        out = self.final_block.forward(fused, training)
        return self.head.forward(out)

    @staticmethod
    def _run_blocks(blocks, x, training):
        for b in blocks:
            x = b.forward(x, training)
        return x

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_input_stats(self, mean, std):
        self.input_mean.data[:] = np.asarray(mean, dtype=np.float64)
        self.input_std.data[:] = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)

    def state_items(self):
        """(name, Parameter) pairs in deterministic order."""
        return list(self.named_parameters())

    def has_csfm_parameters(self) -> bool:
        return any(name.startswith("stage_csfm") for name, _ in self.state_items())


def build(config: MsaGcnConfig, pyramid: ScalePyramid, seed: int = 0) -> MsaGcn:
    """Deterministically construct and initialize the network."""
    rng = np.random.default_rng(seed)
    model = MsaGcn(config, pyramid, rng)
    model.assign_parameter_names()
    names = [name for name, _ in model.state_items()]
    if len(names) != len(set(names)):
        raise ConfigurationError("duplicate parameter names in model")
    return model


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (all integers little-endian):
#   magic "MSAG" | version u32 | config-JSON length u32 + UTF-8 bytes |
#   parameter count u32 | per parameter:
#     name length u32 + UTF-8 name | rank u8 | dims u32 each | float32 data


def save_checkpoint(model: MsaGcn, path):
    meta = {
        "config": model.config.to_dict(),
        "pyramid": _pyramid_to_dict(model.pyramid),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    items = model.state_items()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(items)))
        for name, p in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path) -> MsaGcn:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)

    def take(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointCorruptError(f"checkpoint truncated while reading {what}")
        return b

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        meta = json.loads(take(blob_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"config block unreadable: {exc}") from exc
    config = MsaGcnConfig.from_dict(meta["config"])
    pyramid = _pyramid_from_dict(meta["pyramid"])
    model = build(config, pyramid, seed=0)

    (count,) = struct.unpack("<I", take(4, "parameter count"))
    stored = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        numel = int(np.prod(dims)) if dims else 1
        raw = take(4 * numel, f"data of {name}")
        stored[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    if buf.read(1):
        raise CheckpointCorruptError("trailing bytes after last parameter")

    items = model.state_items()
    expected = {name for name, _ in items}
    if set(stored) != expected:
        raise CheckpointCorruptError("parameter set does not match the stored config")
    for name, p in items:
        if stored[name].shape != p.data.shape:
            raise CheckpointCorruptError(
                f"parameter {name}: stored shape {stored[name].shape} "
                f"vs expected {p.data.shape}"
            )
        p.data[...] = stored[name]
    return model


def _pyramid_to_dict(pyramid: ScalePyramid):
    base = pyramid.scales[0]
    return {
        "vertex_count": base.vertex_count,
        "edges": [list(e) for e in base.edges],
        "tables": [[list(g) for g in m.groups] for m in pyramid.maps],
    }


def _pyramid_from_dict(d):
    base = SkeletonGraph(d["vertex_count"], tuple(tuple(e) for e in d["edges"]))
    return pyramid_from_tables(base, [tuple(tuple(g) for g in t) for t in d["tables"]])
