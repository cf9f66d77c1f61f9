"""The hierarchical residual network: front-end, nested residual trunk and
two-branch classification head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import BasicBlock, MultiScaleBlock, param_count, projection
from .errors import ContractError, DimensionError
from .nn import Conv2d, ConvNorm, Module
from .tensor import Tensor, output_size

DEFAULT_STAGES = ((64, 3), (128, 4), (256, 6), (512, 3))
DESK_STAGES = ((16, 2), (32, 2), (64, 2), (128, 2))


@dataclass
class NetworkConfig:
    input_side: int = 224
    in_channels: int = 1
    stages: tuple = DEFAULT_STAGES
    alpha: float = 0.75
    beta: float = 0.7
    num_classes: int = 250
    block: str = "multiscale"
    inner_skip: bool = True
    outer_skip: bool = True
    norm: bool = True
    activation: bool = True
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_padding: int = 3
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_padding: int = 1
    outer_kernel: int = 9
    outer_stride: int = 8
    outer_padding: int = 1
    seed: int = 0

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """Reduced variant that trains on a CPU in minutes."""
        base = dict(input_side=64, stages=DESK_STAGES, num_classes=8)
        base.update(overrides)
        return cls(**base)

    @property
    def stem_channels(self) -> int:
        return self.stages[0][0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def shape_plan(self) -> dict[str, tuple[int, int, int]]:
        """Expected (C, H, W) at every checkpoint; raises on inconsistency."""
        if self.block not in ("multiscale", "basic"):
            raise ContractError(f"unknown block kind {self.block!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")
        if len(self.stages) < 1 or self.num_classes < 1:
            raise ContractError("need at least one stage and one class")
        plan = {}
        s = output_size(self.input_side, self.stem_kernel, self.stem_stride, self.stem_padding)
        plan["stem_conv"] = (self.stem_channels, s, s)
        s = output_size(s, self.pool_kernel, self.pool_stride, self.pool_padding)
        plan["front_end"] = (self.stem_channels, s, s)
        shallow = s
        for i, (ch, n_blocks) in enumerate(self.stages):
            if n_blocks < 1:
                raise ContractError(f"stage {i + 1} needs at least one block")
            if i > 0:
                s = output_size(s, 3, 2, 1)
            plan[f"inner{i + 1}"] = (ch, s, s)
        final_ch = self.stages[-1][0]
        if self.outer_skip:
            o = output_size(shallow, self.outer_kernel, self.outer_stride, self.outer_padding)
            if o != s:
                raise ContractError(
                    f"outer projection lands at {o}x{o} but the trunk ends at {s}x{s}")
            plan["outer_projection"] = (final_ch, o, o)
        plan["head_conv"] = (self.num_classes, s, s)
        plan["logits"] = (self.num_classes,)
        plan["embedding"] = (final_ch,)
        return plan


@dataclass
class ForwardOutput:
    logits: Tensor
    embedding: Tensor
    trace: dict = field(default_factory=dict)


class InnerResidualBlock(Module):
    """A stage of stacked blocks wrapped by one projected skip connection."""

    def __init__(self, in_ch, out_ch, n_blocks, stride, cfg: NetworkConfig, rng):
        super().__init__()
        self.blocks = []
        for i in range(n_blocks):
            b_in, b_stride = (in_ch, stride) if i == 0 else (out_ch, 1)
            if cfg.block == "multiscale":
                b = MultiScaleBlock(b_in, out_ch, b_stride, cfg.alpha, cfg.norm, cfg.activation, rng)
            else:
                b = BasicBlock(b_in, out_ch, b_stride, cfg.norm, cfg.activation, rng)
            self.blocks.append(b)
        self.use_skip = cfg.inner_skip
        self.proj = projection(in_ch, out_ch, stride, cfg.norm, rng) if cfg.inner_skip else None

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = x
        for b in self.blocks:
            h = b(h, rng)
        if self.use_skip:
            h = T.add(h, self.proj(x))
        return h


class HierarchicalResNet(Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.plan = cfg.shape_plan()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c0 = cfg.stem_channels
        self.stem = ConvNorm(cfg.in_channels, c0, cfg.stem_kernel, cfg.stem_stride,
                             cfg.stem_padding, norm=cfg.norm, rng=rng)
        self.stages = []
        in_ch = c0
        for i, (ch, n) in enumerate(cfg.stages):
            self.stages.append(InnerResidualBlock(in_ch, ch, n, 1 if i == 0 else 2, cfg, rng))
            in_ch = ch
        self.outer = None
        if cfg.outer_skip:
            self.outer = ConvNorm(c0, in_ch, cfg.outer_kernel, cfg.outer_stride,
                                  cfg.outer_padding, norm=cfg.norm, rng=rng)
        self.head = Conv2d(in_ch, cfg.num_classes, 1, bias=True, rng=rng)
        self.final_side = self.plan[f"inner{len(cfg.stages)}"][1]

    # -- pieces ----------------------------------------------------------
    def front_end(self, s: Tensor, trace: dict | None = None) -> Tensor:
        cfg = self.cfg
        if s.shape[-3] != cfg.in_channels:
            raise DimensionError(f"expected {cfg.in_channels} input channel(s), got {s.shape[-3]}")
        h = self.stem(s, relu=cfg.activation)
        _note(trace, "stem_conv", h)
        f_s = T.maxpool2d(h, cfg.pool_kernel, cfg.pool_stride, cfg.pool_padding)
        _note(trace, "front_end", f_s)
        return f_s

    def hierarchical_forward(self, f_s: Tensor, rng=None, trace: dict | None = None) -> Tensor:
        h = f_s
        for i, stage in enumerate(self.stages):
            h = stage(h, rng)
            _note(trace, f"inner{i + 1}", h)
        if self.outer is not None:
            shallow = self.outer(f_s)
            _note(trace, "outer_projection", shallow)
            h = T.add(h, T.scale(shallow, self.cfg.beta))
        return h

    def classify(self, f_h: Tensor, trace: dict | None = None) -> ForwardOutput:
        k = f_h.shape[-1]
        c = self.head(f_h)
        _note(trace, "head_conv", c)
        logits = T.avgpool2d(c, k, k)
        emb = T.avgpool2d(f_h, k, k)
        logits = T.reshape(logits, logits.shape[:-2])
        emb = T.reshape(emb, emb.shape[:-2])
        _note(trace, "logits", logits)
        _note(trace, "embedding", emb)
        return ForwardOutput(logits, emb, trace if trace is not None else {})

    def forward(self, s: Tensor, rng: np.random.Generator | None = None, trace: dict | None = None) -> ForwardOutput:
        f_s = self.front_end(s, trace)
        f_h = self.hierarchical_forward(f_s, rng, trace)
        return self.classify(f_h, trace)

    def multiscale_blocks(self):
        return [b for st in self.stages for b in st.blocks]


def _note(trace, name, t: Tensor):
    if trace is not None:
        shape = t.shape[1:] if t.ndim in (2, 4) else t.shape
        trace[name] = tuple(shape)


def count_parameters(model: Module) -> int:
    """Exact number of trainable scalars."""
    return int(sum(p.data.size for p in model.parameters()))


def stage_conv_params(model: HierarchicalResNet) -> int:
    """3x3 branch-conv weights across all residual blocks of the trunk."""
    return int(sum(param_count(b) for b in model.multiscale_blocks()))


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_FORMAT = "hiresketch-checkpoint"


def save_checkpoint(path, model: HierarchicalResNet, **meta) -> Path:
    """Write an ``.npz`` archive.

    Layout: ``param/<name>`` and ``buffer/<name>`` float64 arrays stored
    row-major with their shapes, optional ``centers`` array, and
    ``__header__`` holding a JSON document with the format tag, the network
    config and any extra metadata (class registry, margins, ...).
    """
    path = Path(path)
    arrays = {f"param/{n}": p.data for n, p in model.named_parameters()}
    arrays.update({f"buffer/{n}": b for n, b in model.named_buffers()})
    centers = meta.pop("centers", None)
    if centers is not None:
        arrays["centers"] = np.asarray(centers, dtype=np.float64)
    header = {"format": CHECKPOINT_FORMAT, "version": 1, "config": model.cfg.to_dict(), **meta}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[HierarchicalResNet, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        model = HierarchicalResNet(NetworkConfig.from_dict(header["config"]))
        state = {}
        for key in z.files:
            if key.startswith("param/") or key.startswith("buffer/"):
                state[key.split("/", 1)[1]] = z[key]
        model.load_state_dict(state)
        if "centers" in z.files:
            header["centers"] = z["centers"]
    return model, header
