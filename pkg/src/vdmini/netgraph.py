"""Declarative block graphs for U-Net style video denoisers.

A BlockGraph is the single source of truth: the same structural walk
drives validation, parameter enumeration, parameter counting, model
building, and channel-dependency grouping. Stages persist even when
emptied by pruning; an empty stage keeps its resolution transition but
runs no blocks, which keeps stage-boundary activations shape-compatible
between a teacher and its pruned student.

Block ids follow the D/M/U naming, e.g. "D.0.R.1.S" is the spatial half
of the second ResBlock layer of the first DownBlock; "M.A.0.T" is the
temporal attention block in the Mid stage.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import GraphError, ShapeError, UnknownBlockError
from .tensor import Tensor

RES_SPATIAL = "RB-S"
RES_TEMPORAL = "RB-T"
ATTN_SPATIAL = "TB-S"
ATTN_TEMPORAL = "TB-T"
BLOCK_KINDS = (RES_SPATIAL, RES_TEMPORAL, ATTN_SPATIAL, ATTN_TEMPORAL)

IDENTITY = "identity"
SHORTCUT_CONV = "shortcut_conv"


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    block_id: str
    replacement: Optional[str] = None  # None, "identity", or "shortcut_conv"


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "Down", "Mid", or "Up"
    index: int
    res_divisor: int
    width: int
    blocks: tuple = ()

    @property
    def stage_id(self) -> str:
        return "M" if self.kind == "Mid" else f"{self.kind[0]}.{self.index}"


@dataclass(frozen=True)
class BlockGraph:
    stages: tuple
    latent_channels: int = 1
    cond_channels: int = 1
    emb_dim: int = 32
    gn_groups: int = 1

    def stage(self, stage_id: str) -> StageSpec:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise UnknownBlockError(f"no stage {stage_id!r}")

    def block_ids(self) -> list:
        return [b.block_id for s in self.stages for b in s.blocks]

    def find_block(self, block_id: str) -> BlockSpec:
        for s in self.stages:
            for b in s.blocks:
                if b.block_id == block_id:
                    return b
        raise UnknownBlockError(f"no block {block_id!r}")


@dataclass(frozen=True)
class AblationEdit:
    block_id: str
    replacement: str
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ParamSpec:
    """Shape plus channel-dependency roles for one named parameter.

    ent_out labels the entity owning axis 0; ent_in lists (entity, size)
    segments along axis 1 (convolution/linear input channels). Entities
    are stage-width labels; None marks a non-prunable dimension.
    """

    name: str
    shape: tuple
    init: str  # "fanin", "zeros", "ones", "avg"
    owner: str  # block_id or a pseudo owner like "stem"
    ent_out: Optional[str] = None
    ent_in: tuple = ()


def parse_block_id(block_id: str):
    """Return (stage_kind, stage_index, block_type, layer_index, variant)."""
    parts = block_id.split(".")
    try:
        if parts[0] == "M":
            kind, idx, rest = "Mid", 0, parts[1:]
        elif parts[0] == "D":
            kind, idx, rest = "Down", int(parts[1]), parts[2:]
        elif parts[0] == "U":
            kind, idx, rest = "Up", int(parts[1]), parts[2:]
        else:
            raise ValueError(parts[0])
        btype, layer, variant = rest[0], int(rest[1]), rest[2]
        if btype not in ("R", "A") or variant not in ("S", "T"):
            raise ValueError(block_id)
    except (ValueError, IndexError) as exc:
        raise UnknownBlockError(f"unparseable block id {block_id!r}") from exc
    return kind, idx, btype, layer, variant


def _block_kind(btype: str, variant: str) -> str:
    return {("R", "S"): RES_SPATIAL, ("R", "T"): RES_TEMPORAL,
            ("A", "S"): ATTN_SPATIAL, ("A", "T"): ATTN_TEMPORAL}[(btype, variant)]


def _make_layer(stage_id: str, layer: int, width: int, in_channels: int, with_attn: bool):
    """One R(-A) layer: spatial+temporal ResBlocks, then spatial+temporal attention."""
    blocks = [
        BlockSpec(RES_SPATIAL, in_channels, width, f"{stage_id}.R.{layer}.S"),
        BlockSpec(RES_TEMPORAL, width, width, f"{stage_id}.R.{layer}.T"),
    ]
    if with_attn:
        blocks += [
            BlockSpec(ATTN_SPATIAL, width, width, f"{stage_id}.A.{layer}.S"),
            BlockSpec(ATTN_TEMPORAL, width, width, f"{stage_id}.A.{layer}.T"),
        ]
    return blocks


def make_unet_graph(layer_counts: dict, widths: tuple, latent_channels: int = 1,
                    cond_channels: int = 1, emb_dim: int = 32) -> BlockGraph:
    """Build a 4-Down / Mid / 4-Up graph from per-stage R-A layer counts.

    layer_counts maps stage id to layer count, e.g. {"D.0": 2, ..., "M": 2,
    "U.0": 3, ...}. Down-3 and Up-0 carry ResBlock layers only; Mid gets
    `layer_counts["M"]` ResBlock layers with one attention layer between
    the first two (omitted when fewer than 2 layers).
    """
    w0, w1, w2 = widths
    stage_widths = {"D.0": w0, "D.1": w1, "D.2": w2, "D.3": w2, "M": w2,
                    "U.0": w2, "U.1": w2, "U.2": w1, "U.3": w0}
    divisors = {"D.0": 1, "D.1": 2, "D.2": 4, "D.3": 8, "M": 8,
                "U.0": 8, "U.1": 4, "U.2": 2, "U.3": 1}
    skip_of = {"U.0": "D.3", "U.1": "D.2", "U.2": "D.1", "U.3": "D.0"}

    stages = []
    for i in range(4):
        sid = f"D.{i}"
        w = stage_widths[sid]
        blocks = []
        for layer in range(layer_counts.get(sid, 0)):
            blocks += _make_layer(sid, layer, w, w, with_attn=(i < 3))
        stages.append(StageSpec("Down", i, divisors[sid], w, tuple(blocks)))

    mid_blocks = []
    n_mid = layer_counts.get("M", 0)
    for layer in range(n_mid):
        mid_blocks += _make_layer("M", layer, w2, w2, with_attn=False)
        if layer == 0 and n_mid >= 2:
            mid_blocks += [
                BlockSpec(ATTN_SPATIAL, w2, w2, "M.A.0.S"),
                BlockSpec(ATTN_TEMPORAL, w2, w2, "M.A.0.T"),
            ]
    stages.append(StageSpec("Mid", 0, divisors["M"], w2, tuple(mid_blocks)))

    for j in range(4):
        sid = f"U.{j}"
        w = stage_widths[sid]
        skip_w = stage_widths[skip_of[sid]]
        blocks = []
        for layer in range(layer_counts.get(sid, 0)):
            in_ch = w + skip_w if layer == 0 else w
            blocks += _make_layer(sid, layer, w, in_ch, with_attn=(j > 0))
        stages.append(StageSpec("Up", j, divisors[sid], w, tuple(blocks)))
    return BlockGraph(tuple(stages), latent_channels, cond_channels, emb_dim)


ORIGIN_LAYER_COUNTS = {"D.0": 2, "D.1": 2, "D.2": 2, "D.3": 2, "M": 2,
                       "U.0": 3, "U.1": 3, "U.2": 3, "U.3": 3}
TOY_WIDTHS = (16, 32, 64)


def toy_teacher_graph(widths: tuple = TOY_WIDTHS) -> BlockGraph:
    """Desk-scale analogue of the full-size Origin architecture."""
    return make_unet_graph(ORIGIN_LAYER_COUNTS, widths)


# ---------------------------------------------------------------------------
# structural walk
# ---------------------------------------------------------------------------

@dataclass
class StagePlan:
    stage: StageSpec
    entity: str
    down_conv: Optional[tuple] = None  # (in, out)
    up_conv: Optional[tuple] = None
    skip_from: Optional[str] = None  # stage id whose skip is concatenated
    skip_channels: int = 0
    skip_entity: Optional[str] = None
    pre_entity: Optional[str] = None  # entity of h entering the concat


@dataclass
class GraphLayout:
    stem: tuple
    stages: list
    head: tuple
    errors: list = field(default_factory=list)
    entity_stages: dict = field(default_factory=dict)  # entity -> [stage ids]


def layout(graph: BlockGraph) -> GraphLayout:
    """Walk the graph, resolving channel flow, transitions, and entities."""
    errors = []
    downs = [s for s in graph.stages if s.kind == "Down"]
    mids = [s for s in graph.stages if s.kind == "Mid"]
    ups = [s for s in graph.stages if s.kind == "Up"]
    if len(downs) != len(ups):
        errors.append(f"skip pairing incomplete: {len(downs)} Down vs {len(ups)} Up stages")
    order = downs + mids + ups
    if [s.stage_id for s in graph.stages] != [s.stage_id for s in order]:
        errors.append("stages must be ordered Down, Mid, Up")

    seen = set()
    for s in graph.stages:
        for b in s.blocks:
            if b.block_id in seen:
                errors.append(f"duplicate block id {b.block_id}")
            seen.add(b.block_id)
            parse_block_id(b.block_id)
            if b.replacement == IDENTITY and b.in_channels != b.out_channels:
                errors.append(f"{b.block_id}: identity replacement with channel mismatch "
                              f"{b.in_channels}->{b.out_channels}")

    # the stem conv maps latent+cond channels to the first stage's width,
    # so the walk starts there; the first stage shares the stem's entity
    stem_out_entity = None
    entity_stages: dict = {}
    cur_ch = downs[0].width if downs else graph.latent_channels + graph.cond_channels
    cur_div = 1
    cur_entity = None
    skips: dict = {}
    plans = []

    def check_blocks(stage: StageSpec, in_ch: int) -> int:
        ch = in_ch
        for b in stage.blocks:
            if b.in_channels != ch:
                errors.append(f"{b.block_id}: expects in={b.in_channels} but receives {ch}")
            if b.kind != RES_SPATIAL and b.in_channels != b.out_channels:
                errors.append(f"{b.block_id}: only spatial ResBlocks may change channels")
            if b.out_channels != stage.width and b.replacement is None:
                errors.append(f"{b.block_id}: out={b.out_channels} differs from stage width {stage.width}")
            ch = b.out_channels
        return ch

    for stage in graph.stages:
        sid = stage.stage_id
        sp = StagePlan(stage, entity="")
        if stage.kind == "Down":
            if stage.res_divisor > cur_div:
                sp.down_conv = (cur_ch, stage.width)
                cur_entity = sid
                cur_ch = stage.width
            elif stage.width != cur_ch:
                errors.append(f"stage {sid}: width {stage.width} without transition from {cur_ch}")
            if cur_entity is None:
                cur_entity = sid  # first stage couples to the stem conv
                stem_out_entity = cur_entity
            cur_div = stage.res_divisor
            sp.entity = cur_entity
            cur_ch = check_blocks(stage, cur_ch)
            skips[sid] = (cur_ch, cur_entity)
        elif stage.kind == "Mid":
            if stage.res_divisor != cur_div:
                errors.append(f"stage {sid}: divisor {stage.res_divisor} != incoming {cur_div}")
            if stage.blocks and stage.width != cur_ch:
                errors.append(f"stage {sid}: width {stage.width} but receives {cur_ch} channels")
            sp.entity = cur_entity or sid
            cur_ch = check_blocks(stage, cur_ch)
        else:  # Up
            if stage.res_divisor < cur_div:
                sp.up_conv = (cur_ch, stage.width)
                sp.pre_entity = f"{sid}:pre"
                cur_ch = stage.width
                cur_div = stage.res_divisor
            else:
                sp.pre_entity = cur_entity
            pair = f"D.{len(ups) - 1 - stage.index}"
            if stage.blocks:
                if pair not in skips:
                    errors.append(f"stage {sid}: paired skip {pair} missing")
                else:
                    skip_ch, skip_ent = skips[pair]
                    sp.skip_from = pair
                    sp.skip_channels = skip_ch
                    sp.skip_entity = skip_ent
                    cur_ch += skip_ch
                cur_entity = sid
            sp.entity = cur_entity if stage.blocks else (sp.pre_entity or sid)
            cur_ch = check_blocks(stage, cur_ch)
        entity_stages.setdefault(sp.entity, [])
        if sid not in entity_stages[sp.entity]:
            entity_stages[sp.entity].append(sid)
        plans.append(sp)

    head = (cur_ch, graph.latent_channels)
    stem = (graph.latent_channels + graph.cond_channels,
            downs[0].width if downs else cur_ch, stem_out_entity or "D.0")
    return GraphLayout(stem=stem, stages=plans, head=head, errors=errors,
                       entity_stages=entity_stages)


def validate(graph: BlockGraph) -> list:
    """Return the list of structural problems (empty when the graph is ok)."""
    return layout(graph).errors


def check(graph: BlockGraph) -> GraphLayout:
    lay = layout(graph)
    if lay.errors:
        raise GraphError(lay.errors)
    return lay


# ---------------------------------------------------------------------------
# parameter enumeration
# ---------------------------------------------------------------------------

def _res_block_params(b: BlockSpec, graph: BlockGraph, ent: str, in_segments: tuple):
    bid = b.block_id
    cin, c = b.in_channels, b.out_channels
    e = graph.emb_dim
    spatial = b.kind == RES_SPATIAL
    kshape = (c, cin, 3, 3) if spatial else (c, cin, 3)
    k2shape = (c, c, 3, 3) if spatial else (c, c, 3)
    # gn1 affine channels follow the (possibly concatenated) input; encode the
    # segment layout on ent_in so channel pruning slices the right rows.
    if len(in_segments) > 1:
        gn1 = [ParamSpec(f"{bid}.gn1.g", (cin,), "ones", bid, None, in_segments),
               ParamSpec(f"{bid}.gn1.b", (cin,), "zeros", bid, None, in_segments)]
    else:
        in_ent = in_segments[0][0] if in_segments else ent
        gn1 = [ParamSpec(f"{bid}.gn1.g", (cin,), "ones", bid, in_ent),
               ParamSpec(f"{bid}.gn1.b", (cin,), "zeros", bid, in_ent)]
    specs = gn1 + [
        ParamSpec(f"{bid}.conv1.w", kshape, "fanin", bid, ent, in_segments),
        ParamSpec(f"{bid}.conv1.b", (c,), "zeros", bid, ent),
        ParamSpec(f"{bid}.emb.w", (c, e), "fanin", bid, ent),
        ParamSpec(f"{bid}.emb.b", (c,), "zeros", bid, ent),
        ParamSpec(f"{bid}.gn2.g", (c,), "ones", bid, ent),
        ParamSpec(f"{bid}.gn2.b", (c,), "zeros", bid, ent),
        ParamSpec(f"{bid}.conv2.w", k2shape, "zeros", bid, ent, ((ent, c),)),
        ParamSpec(f"{bid}.conv2.b", (c,), "zeros", bid, ent),
    ]
    if cin != c:
        specs += [
            ParamSpec(f"{bid}.skip.w", (c, cin, 1, 1), "fanin", bid, ent, in_segments),
            ParamSpec(f"{bid}.skip.b", (c,), "zeros", bid, ent),
        ]
    return specs


def _attn_block_params(b: BlockSpec, ent: str):
    bid = b.block_id
    c = b.out_channels
    h = 4 * c
    return [
        ParamSpec(f"{bid}.gn.g", (c,), "ones", bid, ent),
        ParamSpec(f"{bid}.gn.b", (c,), "zeros", bid, ent),
        ParamSpec(f"{bid}.wq", (c, c), "fanin", bid, ent, ((ent, c),)),
        ParamSpec(f"{bid}.wk", (c, c), "fanin", bid, ent, ((ent, c),)),
        ParamSpec(f"{bid}.wv", (c, c), "fanin", bid, ent, ((ent, c),)),
        ParamSpec(f"{bid}.wo", (c, c), "zeros", bid, ent, ((ent, c),)),
        ParamSpec(f"{bid}.gn2.g", (c,), "ones", bid, ent),
        ParamSpec(f"{bid}.gn2.b", (c,), "zeros", bid, ent),
        ParamSpec(f"{bid}.lin1.w", (h, c), "fanin", bid, f"{ent}#4", ((ent, c),)),
        ParamSpec(f"{bid}.lin1.b", (h,), "zeros", bid, f"{ent}#4"),
        ParamSpec(f"{bid}.lin2.w", (c, h), "zeros", bid, ent, ((f"{ent}#4", h),)),
        ParamSpec(f"{bid}.lin2.b", (c,), "zeros", bid, ent),
    ]


def enumerate_params(graph: BlockGraph, lay: Optional[GraphLayout] = None) -> list:
    """Every parameter of the built model, in canonical order."""
    lay = lay or check(graph)
    e = graph.emb_dim
    cin, cout, stem_ent = lay.stem
    specs = [
        ParamSpec("stem.conv.w", (cout, cin, 3, 3), "fanin", "stem", stem_ent),
        ParamSpec("stem.conv.b", (cout,), "zeros", "stem", stem_ent),
        ParamSpec("emb.lin1.w", (e, e), "fanin", "emb"),
        ParamSpec("emb.lin1.b", (e,), "zeros", "emb"),
        ParamSpec("emb.lin2.w", (e, e), "fanin", "emb"),
        ParamSpec("emb.lin2.b", (e,), "zeros", "emb"),
    ]
    prev_entity = stem_ent
    for sp in lay.stages:
        sid = sp.stage.stage_id
        if sp.down_conv:
            ci, co = sp.down_conv
            specs += [
                ParamSpec(f"down.{sid}.w", (co, ci, 3, 3), "fanin", f"down.{sid}",
                          sp.entity, ((prev_entity, ci),)),
                ParamSpec(f"down.{sid}.b", (co,), "zeros", f"down.{sid}", sp.entity),
            ]
            prev_entity = sp.entity
        if sp.up_conv:
            ci, co = sp.up_conv
            out_ent = sp.entity if sp.stage.blocks else sp.pre_entity
            specs += [
                ParamSpec(f"up.{sid}.w", (co, ci, 3, 3), "fanin", f"up.{sid}",
                          out_ent, ((prev_entity, ci),)),
                ParamSpec(f"up.{sid}.b", (co,), "zeros", f"up.{sid}", out_ent),
            ]
            prev_entity = out_ent
        first = True
        for b in sp.stage.blocks:
            if sp.stage.kind == "Up" and first and sp.skip_from:
                in_segments = ((prev_entity, b.in_channels - sp.skip_channels),
                               (sp.skip_entity, sp.skip_channels))
            else:
                in_segments = ((prev_entity, b.in_channels),)
            first = False
            if b.replacement == IDENTITY:
                prev_entity = sp.entity
                continue
            if b.replacement == SHORTCUT_CONV:
                specs += [
                    ParamSpec(f"{b.block_id}.ablate.w", (b.out_channels, b.in_channels, 1, 1),
                              "avg", b.block_id, sp.entity, in_segments),
                    ParamSpec(f"{b.block_id}.ablate.b", (b.out_channels,), "zeros",
                              b.block_id, sp.entity),
                ]
            elif b.kind in (RES_SPATIAL, RES_TEMPORAL):
                specs += _res_block_params(b, graph, sp.entity, in_segments)
            else:
                specs += _attn_block_params(b, sp.entity)
            prev_entity = sp.entity
    hin, hout = lay.head
    specs += [
        ParamSpec("head.gn.g", (hin,), "ones", "head", prev_entity),
        ParamSpec("head.gn.b", (hin,), "zeros", "head", prev_entity),
        ParamSpec("head.conv.w", (hout, hin, 3, 3), "fanin", "head", None, ((prev_entity, hin),)),
        ParamSpec("head.conv.b", (hout,), "zeros", "head"),
    ]
    return specs


def count_params(graph: BlockGraph) -> tuple:
    """(per-owner counts, total). Owners are block ids plus stem/head/etc."""
    per_owner: dict = {}
    total = 0
    for spec in enumerate_params(graph):
        n = int(np.prod(spec.shape))
        per_owner[spec.owner] = per_owner.get(spec.owner, 0) + n
        total += n
    return per_owner, total


def _init_param(spec: ParamSpec, init_seed: int) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "avg":
        w = np.zeros(spec.shape)
        w[:, :, 0, 0] = 1.0 / spec.shape[1]
        return w
    name_key = int.from_bytes(hashlib.blake2s(spec.name.encode()).digest()[:8], "little")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([init_seed, name_key])))
    fan_in = int(np.prod(spec.shape[1:])) or 1
    return rng.standard_normal(spec.shape) / math.sqrt(fan_in)


def init_params(graph: BlockGraph, init_seed: int) -> dict:
    return {s.name: Tensor(_init_param(s, init_seed), requires_grad=True)
            for s in enumerate_params(graph)}


# ---------------------------------------------------------------------------
# executable model
# ---------------------------------------------------------------------------

def sinusoidal_embedding(value: float, dim: int) -> Tensor:
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = value * freqs
    return Tensor(np.concatenate([np.sin(ang), np.cos(ang)])[None, :])


class Model:
    """Executable denoiser built from a BlockGraph."""

    def __init__(self, graph: BlockGraph, params: dict):
        self.graph = graph
        self.params = params
        self._layout = check(graph)

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def detached(self) -> "Model":
        return Model(self.graph, {k: v.detach() for k, v in self.params.items()})

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _gn(self, x, prefix):
        return T.group_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"),
                            groups=self.graph.gn_groups)

    def _res_block(self, x, b: BlockSpec, emb):
        bid = b.block_id
        spatial = b.kind == RES_SPATIAL
        conv = (lambda h, w, bias: T.conv2d(h, w, bias, pad=1)) if spatial else \
               (lambda h, w, bias: T.conv1d_frames(h, w, bias, pad=1))
        h = T.silu(self._gn(x, f"{bid}.gn1"))
        h = conv(h, self._p(f"{bid}.conv1.w"), self._p(f"{bid}.conv1.b"))
        shift = T.linear(emb, self._p(f"{bid}.emb.w"), self._p(f"{bid}.emb.b"))
        h = T.bias_add(h, T.reshape(shift, (shift.shape[-1],)), axis=1)
        h = T.silu(self._gn(h, f"{bid}.gn2"))
        h = conv(h, self._p(f"{bid}.conv2.w"), self._p(f"{bid}.conv2.b"))
        if b.in_channels != b.out_channels:
            x = T.conv2d(x, self._p(f"{bid}.skip.w"), self._p(f"{bid}.skip.b"))
        return T.add(x, h)

    def _attn_block(self, x, b: BlockSpec):
        bid = b.block_id
        attn = T.attention_spatial if b.kind == ATTN_SPATIAL else T.attention_temporal
        h = self._gn(x, f"{bid}.gn")
        x = T.add(x, attn(h, self._p(f"{bid}.wq"), self._p(f"{bid}.wk"),
                          self._p(f"{bid}.wv"), self._p(f"{bid}.wo")))
        h = self._gn(x, f"{bid}.gn2")
        f, c, hh, ww = h.shape
        tokens = T.transpose(h, (0, 2, 3, 1))
        m = T.linear(tokens, self._p(f"{bid}.lin1.w"), self._p(f"{bid}.lin1.b"))
        m = T.silu(m)
        m = T.linear(m, self._p(f"{bid}.lin2.w"), self._p(f"{bid}.lin2.b"))
        return T.add(x, T.transpose(m, (0, 3, 1, 2)))

    def _block(self, x, b: BlockSpec, emb):
        if b.replacement == IDENTITY:
            return x
        if b.replacement == SHORTCUT_CONV:
            return T.conv2d(x, self._p(f"{b.block_id}.ablate.w"), self._p(f"{b.block_id}.ablate.b"))
        if b.kind in (RES_SPATIAL, RES_TEMPORAL):
            return self._res_block(x, b, emb)
        return self._attn_block(x, b)

    def forward(self, x: Tensor, c_noise: float, cond: Optional[Tensor] = None,
                collect_features: bool = False, timings: Optional[dict] = None):
        """Denoiser inner network: (F, C, H, W) latent -> same shape.

        Returns the output tensor, or (output, stage-boundary features)
        when collect_features is set.
        """
        g = self.graph
        f = x.shape[0]
        if x.data.ndim != 4 or x.shape[1] != g.latent_channels:
            raise ShapeError(f"forward: latent shape {x.shape} vs {g.latent_channels} channels")
        if cond is None:
            cdata = np.zeros((f, g.cond_channels) + x.shape[2:])
        else:
            if cond.shape[1:] != (g.cond_channels,) + x.shape[2:]:
                raise ShapeError(f"forward: condition shape {cond.shape} vs latent {x.shape}")
            cdata = np.broadcast_to(cond.data, (f, g.cond_channels) + x.shape[2:]).copy()
        emb = sinusoidal_embedding(c_noise, g.emb_dim)
        emb = T.silu(T.linear(emb, self._p("emb.lin1.w"), self._p("emb.lin1.b")))
        emb = T.linear(emb, self._p("emb.lin2.w"), self._p("emb.lin2.b"))

        def timed(key, fn, *args):
            if timings is None:
                return fn(*args)
            t0 = time.perf_counter()
            out = fn(*args)
            timings[key] = timings.get(key, 0.0) + (time.perf_counter() - t0)
            return out

        h = T.concat([x, Tensor(cdata)], axis=1)
        h = timed("stem", lambda: T.conv2d(h, self._p("stem.conv.w"), self._p("stem.conv.b"), pad=1))
        skips = {}
        features = {}
        for sp in self._layout.stages:
            sid = sp.stage.stage_id
            if sp.down_conv:
                h = timed(f"down.{sid}", lambda h=h: T.conv2d(
                    h, self._p(f"down.{sid}.w"), self._p(f"down.{sid}.b"), stride=2, pad=1))
            if sp.up_conv:
                h = timed(f"up.{sid}", lambda h=h: T.conv2d(
                    T.upsample_nearest2x(h), self._p(f"up.{sid}.w"), self._p(f"up.{sid}.b"), pad=1))
            if sp.skip_from:
                h = T.concat([h, skips[sp.skip_from]], axis=1)
            for b in sp.stage.blocks:
                h = timed(b.block_id, lambda h=h, b=b: self._block(h, b, emb))
            if sp.stage.kind == "Down":
                skips[sid] = h
            if collect_features and sp.stage.kind in ("Down", "Up"):
                features[sid] = h
        h = timed("head", lambda: T.conv2d(T.silu(self._gn(h, "head.gn")),
                                           self._p("head.conv.w"), self._p("head.conv.b"), pad=1))
        return (h, features) if collect_features else h

    def __call__(self, x, c_noise, cond=None):
        return self.forward(x, c_noise, cond)


def build(graph: BlockGraph, init_seed: int) -> Model:
    """Validate the graph and construct a deterministically initialized model."""
    check(graph)
    return Model(graph, init_params(graph, init_seed))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablate(graph: BlockGraph, block_id: str):
    """Replace one block with identity (or a 1x1 shortcut conv on mismatch)."""
    target = graph.find_block(block_id)
    if target.replacement is not None:
        raise UnknownBlockError(f"{block_id} is already ablated")
    repl = IDENTITY if target.in_channels == target.out_channels else SHORTCUT_CONV
    new_stages = []
    for s in graph.stages:
        blocks = tuple(replace(b, replacement=repl) if b.block_id == block_id else b
                       for b in s.blocks)
        new_stages.append(replace(s, blocks=blocks))
    edited = replace(graph, stages=tuple(new_stages))
    edit = AblationEdit(block_id, repl, target.in_channels, target.out_channels)
    return edited, edit


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def graph_to_json(graph: BlockGraph) -> str:
    doc = {
        "latent_channels": graph.latent_channels,
        "cond_channels": graph.cond_channels,
        "emb_dim": graph.emb_dim,
        "gn_groups": graph.gn_groups,
        "stages": [
            {
                "kind": s.kind,
                "index": s.index,
                "res_divisor": s.res_divisor,
                "width": s.width,
                "blocks": [
                    {
                        "kind": b.kind,
                        "in_channels": b.in_channels,
                        "out_channels": b.out_channels,
                        "block_id": b.block_id,
                        **({"replacement": b.replacement} if b.replacement else {}),
                    }
                    for b in s.blocks
                ],
            }
            for s in graph.stages
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def graph_from_json(text: str) -> BlockGraph:
    doc = json.loads(text)
    stages = tuple(
        StageSpec(
            kind=s["kind"], index=s["index"], res_divisor=s["res_divisor"], width=s["width"],
            blocks=tuple(BlockSpec(b["kind"], b["in_channels"], b["out_channels"],
                                   b["block_id"], b.get("replacement")) for b in s["blocks"]),
        )
        for s in doc["stages"]
    )
    return BlockGraph(stages, doc["latent_channels"], doc["cond_channels"],
                      doc["emb_dim"], doc["gn_groups"])
