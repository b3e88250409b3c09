"""Trunk-branch embedding networks described by declarative configs.

A graph is a trunk (ordered conv/pool layers tagged low -> middle ->
high_trunk) plus optional branches. Each branch reads two crops of shared
trunk activations: a rectangle of the later tap layer and the exactly-2x
rectangle of the earlier tap (whose map must be twice the spatial size);
the early crop is 2x2/2 max-pooled so the two align, channel-concatenated,
and fed through the branch's own layers. Trunk and branch outputs are
concatenated and projected by one dense layer into the embedding.

Configs are YAML with strict keys; the shipped presets live in
videoface/presets/ as data files. "composite" layers stand in for
inception-style blocks: they only declare output channels and are usable for
shape inference and cost accounting, not for training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from . import tensor as T
from .errors import ConfigError, GraphError
from .rng import STREAM_INIT, substream

STAGES = ("low", "middle", "high_trunk")
LAYER_KINDS = ("conv", "pool", "pool_to", "composite", "dropout")
PRESETS = ("mini_tbe", "mini_trunk", "paper_googlenet")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    stage: str | None = None  # None for branch layers
    out_channels: int | None = None
    kernel: int = 3
    stride: int = 1
    pad: str = "same"
    window: int = 2
    target: int = 3
    p: float = 0.4


@dataclass(frozen=True)
class BranchSpec:
    name: str
    box: tuple[float, float, float, float]  # fractional (x, y, w, h)
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class LayerGraph:
    name: str
    in_channels: int
    in_h: int
    in_w: int
    embed_dim: int
    dropout: float
    trunk: tuple[LayerSpec, ...]
    tap_early: str | None
    tap_late: str | None
    branches: tuple[BranchSpec, ...]


@dataclass
class ShapeInfo:
    shapes: dict[str, tuple[int, int, int]]  # layer name -> (C, H, W)
    branch_rects: dict[str, tuple[tuple[int, int, int, int], tuple[int, int, int, int]]]
    trunk_flat: int
    fusion_in: int
    embed_dim: int


# ------------------------------------------------------------- config loading


def _require_keys(d: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _layer_from_dict(d: dict, where: str, stage_required: bool) -> LayerSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: layer entry must be a mapping")
    allowed = {"name", "kind", "stage", "out_channels", "kernel", "stride", "pad", "window", "target", "p"}
    required = {"name", "kind"} | ({"stage"} if stage_required else set())
    _require_keys(d, allowed, required, where)
    kind = d["kind"]
    if kind not in LAYER_KINDS:
        raise ConfigError(f"{where}: unknown layer kind {kind!r}")
    stage = d.get("stage")
    if stage is not None and stage not in STAGES:
        raise ConfigError(f"{where}: unknown stage {stage!r}")
    if kind in ("conv", "composite") and not d.get("out_channels"):
        raise ConfigError(f"{where}: {kind} layer needs out_channels")
    if kind == "conv" and d.get("pad", "same") not in T.PAD_MODES:
        raise ConfigError(f"{where}: bad pad mode {d.get('pad')!r}")
    return LayerSpec(
        name=str(d["name"]),
        kind=kind,
        stage=stage,
        out_channels=int(d["out_channels"]) if d.get("out_channels") else None,
        kernel=int(d.get("kernel", 3)),
        stride=int(d.get("stride", 1)),
        pad=str(d.get("pad", "same")),
        window=int(d.get("window", 2)),
        target=int(d.get("target", 3)),
        p=float(d.get("p", 0.4)),
    )


def graph_from_dict(cfg: dict) -> LayerGraph:
    if not isinstance(cfg, dict):
        raise ConfigError("model config must be a mapping")
    _require_keys(
        cfg,
        {"name", "input", "embed_dim", "dropout", "trunk", "taps", "branches"},
        {"name", "input", "embed_dim", "trunk"},
        "model",
    )
    inp = cfg["input"]
    _require_keys(inp, {"channels", "height", "width"}, {"channels", "height", "width"}, "model.input")
    trunk = tuple(
        _layer_from_dict(d, f"model.trunk[{i}]", stage_required=True)
        for i, d in enumerate(cfg["trunk"])
    )
    branches: list[BranchSpec] = []
    for i, b in enumerate(cfg.get("branches") or []):
        where = f"model.branches[{i}]"
        _require_keys(b, {"name", "box", "layers"}, {"name", "box", "layers"}, where)
        box = tuple(float(v) for v in b["box"])
        if len(box) != 4:
            raise ConfigError(f"{where}: box must have 4 entries (x, y, w, h)")
        layers = tuple(
            _layer_from_dict(d, f"{where}.layers[{j}]", stage_required=False)
            for j, d in enumerate(b["layers"])
        )
        if not layers:
            raise ConfigError(f"{where}: branch needs at least one layer")
        branches.append(BranchSpec(name=str(b["name"]), box=box, layers=layers))
    taps = cfg.get("taps")
    tap_early = tap_late = None
    if branches:
        if not taps:
            raise ConfigError("model.taps required when branches are declared")
        _require_keys(taps, {"early", "late"}, {"early", "late"}, "model.taps")
        tap_early, tap_late = str(taps["early"]), str(taps["late"])
    elif taps:
        raise ConfigError("model.taps given but no branches declared")
    graph = LayerGraph(
        name=str(cfg["name"]),
        in_channels=int(inp["channels"]),
        in_h=int(inp["height"]),
        in_w=int(inp["width"]),
        embed_dim=int(cfg["embed_dim"]),
        dropout=float(cfg.get("dropout", 0.0)),
        trunk=trunk,
        tap_early=tap_early,
        tap_late=tap_late,
        branches=tuple(branches),
    )
    validate_graph(graph)
    return graph


def load_graph(path) -> LayerGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return graph_from_dict(cfg)


def load_preset(name: str) -> LayerGraph:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; have {PRESETS}")
    ref = resources.files("videoface").joinpath(f"presets/{name}.yaml")
    return graph_from_dict(yaml.safe_load(ref.read_text(encoding="utf-8")))


# ----------------------------------------------------------------- validation


def validate_graph(graph: LayerGraph) -> None:
    if graph.in_channels < 1 or graph.in_h < 1 or graph.in_w < 1:
        raise GraphError(f"bad input size {graph.in_channels}x{graph.in_h}x{graph.in_w}")
    if graph.embed_dim < 1:
        raise GraphError(f"embed_dim must be >= 1, got {graph.embed_dim}")
    if not 0.0 <= graph.dropout < 1.0:
        raise GraphError(f"dropout must be in [0,1), got {graph.dropout}")
    names = [l.name for l in graph.trunk]
    if len(names) != len(set(names)):
        raise GraphError("duplicate trunk layer names")
    if not graph.trunk:
        raise GraphError("trunk has no layers")
    stage_rank = {s: i for i, s in enumerate(STAGES)}
    last = 0
    for l in graph.trunk:
        r = stage_rank[l.stage]
        if r < last:
            raise GraphError(f"layer '{l.name}': stage {l.stage} after a later stage")
        last = r
    bnames = [b.name for b in graph.branches]
    if len(bnames) != len(set(bnames)):
        raise GraphError("duplicate branch names")
    if graph.branches:
        by_name = {l.name: (i, l) for i, l in enumerate(graph.trunk)}
        for tap, label in ((graph.tap_early, "early"), (graph.tap_late, "late")):
            if tap not in by_name:
                raise GraphError(f"{label} tap '{tap}' is not a trunk layer")
            if by_name[tap][1].stage not in ("low", "middle"):
                raise GraphError(f"{label} tap '{tap}' must be a shared (low/middle) layer")
        if by_name[graph.tap_early][0] >= by_name[graph.tap_late][0]:
            raise GraphError("early tap must precede late tap")
        for b in graph.branches:
            lnames = [l.name for l in b.layers]
            if len(lnames) != len(set(lnames)):
                raise GraphError(f"branch '{b.name}': duplicate layer names")
    infer_shapes(graph)  # raises GraphError on any inconsistency


# ------------------------------------------------------------ shape inference


def _layer_out_shape(l: LayerSpec, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    c, h, w = shape
    if l.kind == "conv" or l.kind == "composite":
        if l.kind == "composite":
            return (l.out_channels, h, w)
        k, s = l.kernel, l.stride
        if l.pad == "valid":
            if k > h or k > w:
                raise GraphError(f"layer '{l.name}': kernel {k} exceeds input {h}x{w}")
            return (l.out_channels, (h - k) // s + 1, (w - k) // s + 1)
        return (l.out_channels, -(-h // s), -(-w // s))
    if l.kind == "pool":
        if l.window > h or l.window > w:
            raise GraphError(f"layer '{l.name}': window {l.window} exceeds input {h}x{w}")
        return (c, (h - l.window) // l.stride + 1, (w - l.window) // l.stride + 1)
    if l.kind == "pool_to":
        if l.target > h or l.target > w:
            raise GraphError(f"layer '{l.name}': target {l.target} exceeds input {h}x{w}")
        return (c, l.target, l.target)
    if l.kind == "dropout":
        return shape
    raise GraphError(f"layer '{l.name}': unknown kind {l.kind}")


def infer_shapes(graph: LayerGraph) -> ShapeInfo:
    """Every intermediate output shape, computed without allocating maps."""
    shapes: dict[str, tuple[int, int, int]] = {}
    cur = (graph.in_channels, graph.in_h, graph.in_w)
    shapes["input"] = cur
    for l in graph.trunk:
        cur = _layer_out_shape(l, cur)
        if min(cur) < 1:
            raise GraphError(f"layer '{l.name}': non-positive output shape {cur}")
        shapes[l.name] = cur
    trunk_out = cur
    trunk_flat = trunk_out[0] * trunk_out[1] * trunk_out[2]

    branch_rects: dict[str, tuple[tuple[int, int, int, int], tuple[int, int, int, int]]] = {}
    fusion_in = trunk_flat
    for b in graph.branches:
        ce, he, we = shapes[graph.tap_early]
        cl, hl, wl = shapes[graph.tap_late]
        if (he, we) != (2 * hl, 2 * wl):
            raise GraphError(
                f"early tap '{graph.tap_early}' map {he}x{we} must be exactly twice "
                f"late tap '{graph.tap_late}' map {hl}x{wl}"
            )
        late_rect = T.crop_box(b.box, hl, wl)  # (y0, x0, h, w)
        y0, x0, h, w = late_rect
        early_rect = (2 * y0, 2 * x0, 2 * h, 2 * w)
        branch_rects[b.name] = (late_rect, early_rect)
        cur_b = (ce + cl, h, w)
        shapes[f"branch.{b.name}.input"] = cur_b
        for l in b.layers:
            cur_b = _layer_out_shape(l, cur_b)
            if min(cur_b) < 1:
                raise GraphError(f"branch '{b.name}' layer '{l.name}': bad shape {cur_b}")
            shapes[f"branch.{b.name}.{l.name}"] = cur_b
        if cur_b[1:] != trunk_out[1:]:
            raise GraphError(
                f"branch '{b.name}' output {cur_b[1]}x{cur_b[2]} does not match "
                f"trunk output {trunk_out[1]}x{trunk_out[2]} for fusion"
            )
        fusion_in += cur_b[0] * cur_b[1] * cur_b[2]
    shapes["embed"] = (graph.embed_dim, 1, 1)
    return ShapeInfo(
        shapes=shapes,
        branch_rects=branch_rects,
        trunk_flat=trunk_flat,
        fusion_in=fusion_in,
        embed_dim=graph.embed_dim,
    )


def format_shape(shape: tuple[int, int, int]) -> str:
    c, h, w = shape
    return f"{h}x{w}x{c}"


# -------------------------------------------------------------------- network


@dataclass
class ForwardResult:
    trunk_out: T.Tensor
    branch_outs: dict[str, T.Tensor]
    embed: T.Tensor | None


class Network:
    """Parameter store plus forward execution for a LayerGraph."""

    def __init__(self, graph: LayerGraph):
        self.graph = graph
        self.info = infer_shapes(graph)
        for l in list(graph.trunk) + [l for b in graph.branches for l in b.layers]:
            if l.kind == "composite":
                raise GraphError(
                    f"layer '{l.name}' is a shape-only composite; this preset "
                    "supports inference of shapes and costs, not execution"
                )
        self.params: dict[str, T.Tensor] = {}
        self._build_params()

    # parameter creation order is fixed: trunk, branches, fusion; He-style
    # fan-in init fills them in this same order from the init substream
    def _build_params(self) -> None:
        def add_conv(prefix: str, l: LayerSpec, in_c: int) -> None:
            self.params[f"{prefix}.w"] = T.Tensor(
                np.zeros((l.out_channels, in_c, l.kernel, l.kernel), dtype=np.float32),
                requires_grad=True,
            )
            self.params[f"{prefix}.b"] = T.Tensor(
                np.zeros((l.out_channels,), dtype=np.float32), requires_grad=True
            )

        shapes = self.info.shapes
        cur_c = self.graph.in_channels
        for l in self.graph.trunk:
            if l.kind == "conv":
                add_conv(f"trunk.{l.name}", l, cur_c)
            cur_c = shapes[l.name][0]
        for b in self.graph.branches:
            cur_c = shapes[f"branch.{b.name}.input"][0]
            for l in b.layers:
                if l.kind == "conv":
                    add_conv(f"branch.{b.name}.{l.name}", l, cur_c)
                cur_c = shapes[f"branch.{b.name}.{l.name}"][0]
        self.params["fusion.w"] = T.Tensor(
            np.zeros((self.info.fusion_in, self.graph.embed_dim), dtype=np.float32),
            requires_grad=True,
        )
        self.params["fusion.b"] = T.Tensor(
            np.zeros((self.graph.embed_dim,), dtype=np.float32), requires_grad=True
        )

    def init_params(self, root_seed: int) -> None:
        rng = substream(root_seed, STREAM_INIT)
        for name in self.params:  # insertion order is the documented build order
            t = self.params[name]
            if name.endswith(".b"):
                t.data[...] = 0.0
            else:
                fan_in = int(np.prod(t.data.shape[:-1])) if t.data.ndim == 2 else int(
                    np.prod(t.data.shape[1:])
                )
                std = np.sqrt(2.0 / fan_in)
                t.data[...] = (rng.standard_normal(t.data.shape) * std).astype(np.float32)

    def add_head(self, name: str, in_dim: int, out_dim: int, root_seed: int, salt: int) -> tuple[str, str]:
        """Create (or reuse) a temporary dense head; returns its param names."""
        wname, bname = f"head.{name}.w", f"head.{name}.b"
        if wname not in self.params:
            rng = substream(root_seed, STREAM_INIT, salt)
            std = np.sqrt(2.0 / in_dim)
            self.params[wname] = T.Tensor(
                (rng.standard_normal((in_dim, out_dim)) * std).astype(np.float32),
                requires_grad=True,
            )
            self.params[bname] = T.Tensor(np.zeros((out_dim,), dtype=np.float32), requires_grad=True)
        return wname, bname

    def drop_heads(self) -> None:
        for name in [n for n in self.params if n.startswith("head.")]:
            del self.params[name]

    def set_trainable(self, predicate) -> None:
        for name, t in self.params.items():
            t.requires_grad = bool(predicate(name))

    def stage_tag(self, param_name: str) -> str:
        """low/middle/high_trunk for trunk params, branch/fusion/head otherwise."""
        parts = param_name.split(".")
        if parts[0] == "trunk":
            for l in self.graph.trunk:
                if l.name == parts[1]:
                    return l.stage
        return parts[0]

    def _run_layer(self, l: LayerSpec, cur: T.Tensor, prefix: str, train: bool, rng) -> T.Tensor:
        if l.kind == "conv":
            cur = T.conv2d(
                cur,
                self.params[f"{prefix}.{l.name}.w"],
                self.params[f"{prefix}.{l.name}.b"],
                stride=l.stride,
                pad=l.pad,
            )
            return T.relu(cur)
        if l.kind == "pool":
            return T.maxpool(cur, l.window, l.stride)
        if l.kind == "pool_to":
            return T.pool_to(cur, l.target)
        if l.kind == "dropout":
            return T.dropout(cur, l.p, rng=rng, train=train)
        raise GraphError(f"layer '{l.name}': kind {l.kind} is not executable")

    def forward(
        self,
        x: T.Tensor,
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
        need_embed: bool = True,
        need_branches: bool = True,
    ) -> ForwardResult:
        if x.data.ndim != 4 or x.data.shape[1:] != (self.graph.in_channels, self.graph.in_h, self.graph.in_w):
            raise GraphError(
                f"input shape {x.data.shape} does not match configured "
                f"{self.graph.in_channels}x{self.graph.in_h}x{self.graph.in_w}"
            )
        acts: dict[str, T.Tensor] = {}
        # [0,1] pixels carry a large common-mode component that destabilizes
        # momentum SGD at the default schedule; the first conv sees x - 0.5
        cur = T.Tensor(x.data - np.float32(0.5))
        for l in self.graph.trunk:
            cur = self._run_layer(l, cur, "trunk", train, rng)
            acts[l.name] = cur
        trunk_out = cur

        branch_outs: dict[str, T.Tensor] = {}
        if need_branches and self.graph.branches:
            for b in self.graph.branches:
                late_rect, early_rect = self.info.branch_rects[b.name]
                early = T.crop_rect(acts[self.graph.tap_early], *early_rect)
                early = T.maxpool(early, 2, 2)
                late = T.crop_rect(acts[self.graph.tap_late], *late_rect)
                cur_b = T.concat([early, late], axis=1)
                for l in b.layers:
                    cur_b = self._run_layer(l, cur_b, f"branch.{b.name}", train, rng)
                branch_outs[b.name] = cur_b

        embed = None
        if need_embed:
            parts = [trunk_out] + [branch_outs[b.name] for b in self.graph.branches if b.name in branch_outs]
            if self.graph.branches and len(parts) != 1 + len(self.graph.branches):
                raise GraphError("embedding needs branch outputs; call with need_branches=True")
            fused = T.flatten(T.concat(parts, axis=1)) if len(parts) > 1 else T.flatten(trunk_out)
            fused = T.dropout(fused, self.graph.dropout, rng=rng, train=train)
            embed = T.dense(fused, self.params["fusion.w"], self.params["fusion.b"])
        return ForwardResult(trunk_out=trunk_out, branch_outs=branch_outs, embed=embed)

    def embed_images(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Inference-only embeddings for float [N,C,H,W] pixels."""
        outs = []
        for i in range(0, images.shape[0], batch):
            x = T.Tensor(images[i : i + batch])
            outs.append(self.forward(x).embed.data)
        return np.concatenate(outs, axis=0)


# ----------------------------------------------------------------- cost model


@dataclass
class CostReport:
    trunk_mult_adds: int
    full_mult_adds: int
    nosharing_mult_adds: int
    trunk_peak_floats: int
    full_peak_floats: int
    per_layer: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def ratio_full(self) -> float:
        return self.full_mult_adds / self.trunk_mult_adds

    @property
    def ratio_nosharing(self) -> float:
        return self.nosharing_mult_adds / self.trunk_mult_adds


def _layer_cost(l: LayerSpec, in_shape, out_shape) -> int:
    cin = in_shape[0]
    cout, ho, wo = out_shape
    if l.kind == "conv":
        return ho * wo * l.kernel * l.kernel * cin * cout
    if l.kind == "composite":
        # inception-style block counted as one 3x3 conv at declared channels
        return ho * wo * 9 * cin * cout
    return 0


def count_costs(graph: LayerGraph) -> CostReport:
    """Static mult-add and activation-size model, trunk-only vs full network.

    The trunk-only variant projects the flattened trunk output straight into
    the embedding; the full variant adds the branch layers and projects the
    fused concat. The no-sharing figure re-charges every low/middle layer once
    per branch, as if branches ran their own copies.
    """
    info = infer_shapes(graph)
    shapes = info.shapes
    per_layer: list[tuple[str, int, str]] = []

    trunk_cost = 0
    shared_cost = 0
    cur = shapes["input"]
    peak = cur[0] * cur[1] * cur[2]
    for l in graph.trunk:
        out = shapes[l.name]
        cost = _layer_cost(l, cur, out)
        trunk_cost += cost
        if l.stage in ("low", "middle"):
            shared_cost += cost
        per_layer.append((l.name, cost, format_shape(out)))
        peak = max(peak, out[0] * out[1] * out[2])
        cur = out
    trunk_peak = peak

    trunk_head = info.trunk_flat * graph.embed_dim
    trunk_total = trunk_cost + trunk_head
    per_layer.append(("trunk_head", trunk_head, f"{graph.embed_dim}"))

    branch_cost = 0
    full_peak = peak
    for b in graph.branches:
        cur_b = shapes[f"branch.{b.name}.input"]
        full_peak = max(full_peak, cur_b[0] * cur_b[1] * cur_b[2])
        for l in b.layers:
            out = shapes[f"branch.{b.name}.{l.name}"]
            cost = _layer_cost(l, cur_b, out)
            branch_cost += cost
            per_layer.append((f"branch.{b.name}.{l.name}", cost, format_shape(out)))
            full_peak = max(full_peak, out[0] * out[1] * out[2])
            cur_b = out
    fusion_cost = info.fusion_in * graph.embed_dim
    if graph.branches:
        per_layer.append(("fusion", fusion_cost, f"{graph.embed_dim}"))
        full_total = trunk_cost + branch_cost + fusion_cost
    else:
        full_total = trunk_total
    nosharing = full_total + shared_cost * len(graph.branches)
    return CostReport(
        trunk_mult_adds=trunk_total,
        full_mult_adds=full_total,
        nosharing_mult_adds=nosharing,
        trunk_peak_floats=trunk_peak,
        full_peak_floats=full_peak,
        per_layer=per_layer,
    )
