"""Network graphs, their text format, the executor, and the model builders.

A ``LayerGraph`` is an immutable, topologically ordered list of nodes. Its
text form has one node per line::

    name: op(key=value,...) <- input1,input2 [binarize=0|1]

preceded by a ``# bnet-graph v1 stacks=N`` header. ``Network`` instantiates
layers for a graph and runs forward/backward over it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from bnet import layers as L

HEADER_RE = re.compile(r"^# bnet-graph v1 stacks=(\d+)$")
NODE_RE = re.compile(r"^([^\s:]+): (\w+)\((.*)\) <-(?: (\S+))? \[binarize=([01])\]$")

OPS = ("input", "conv", "linear", "bn", "act", "maxpool", "upsample", "add", "concat",
       "sigmoid", "gap", "flatten", "out")
BINARIZABLE = ("conv", "linear")


class GraphError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    args: tuple = ()
    inputs: tuple = ()
    binarize: bool = False

    def arg(self, key, default=None):
        return dict(self.args).get(key, default)

    def to_line(self) -> str:
        args = ",".join(f"{k}={_fmt(v)}" for k, v in self.args)
        ins = (" " + ",".join(self.inputs)) if self.inputs else ""
        return f"{self.name}: {self.op}({args}) <-{ins} [binarize={int(self.binarize)}]"


def make_node(name, op, inputs=(), binarize=False, **args) -> Node:
    if op not in OPS:
        raise GraphError(f"unknown op {op!r}")
    if binarize and op not in BINARIZABLE:
        raise GraphError(f"op {op!r} cannot be binarized")
    return Node(name, op, tuple(sorted(args.items())), tuple(inputs), bool(binarize))


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple
    stack_count: int = 1
    _shapes: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.stack_count < 1:
            raise GraphError("stack_count must be >= 1")
        object.__setattr__(self, "_shapes", infer_shapes(self.nodes))

    # lookups
    def node(self, name) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def input_node(self) -> Node:
        return next(n for n in self.nodes if n.op == "input")

    @property
    def outputs(self) -> list[str]:
        outs = [n for n in self.nodes if n.op == "out"]
        return [n.name for n in sorted(outs, key=lambda n: n.arg("index"))]

    def shape_of(self, name) -> tuple:
        return self._shapes[name]

    @property
    def binarize_flags(self) -> dict:
        return {n.name: n.binarize for n in self.nodes}

    @property
    def param_count(self) -> int:
        return sum(node_param_count(n, self._shapes) for n in self.nodes)

    def parametric_nodes(self) -> list[Node]:
        return [n for n in self.nodes if node_param_count(n, self._shapes) > 0]

    # text format
    def to_text(self) -> str:
        lines = [f"# bnet-graph v1 stacks={self.stack_count}"]
        lines += [n.to_line() for n in self.nodes]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LayerGraph":
        lines = text.splitlines()
        if not lines:
            raise GraphError("empty graph text")
        m = HEADER_RE.match(lines[0])
        if not m:
            raise GraphError(f"bad graph header: {lines[0]!r}")
        nodes = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            nm = NODE_RE.match(line)
            if not nm:
                raise GraphError(f"line {lineno}: cannot parse {line!r}")
            name, op, argtext, ins, flag = nm.groups()
            args = {}
            if argtext:
                for item in argtext.split(","):
                    k, _, v = item.partition("=")
                    args[k] = _parse_value(v)
            inputs = tuple(ins.split(",")) if ins else ()
            nodes.append(make_node(name, op, inputs, flag == "1", **args))
        return cls(tuple(nodes), int(m.group(1)))


# -- symbolic shape pass -----------------------------------------------------------

def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(nodes) -> dict:
    """Shapes per node ((C, H, W) or (D,)); raises GraphError on any mismatch."""
    shapes: dict[str, tuple] = {}
    for n in nodes:
        if n.name in shapes:
            raise GraphError(f"duplicate node name {n.name!r}")
        for i in n.inputs:
            if i not in shapes:
                raise GraphError(f"{n.name}: input {i!r} is not defined earlier (graph must be acyclic and ordered)")
        ins = [shapes[i] for i in n.inputs]
        op = n.op

        def need(count):
            if len(ins) != count:
                raise GraphError(f"{n.name}: {op} takes {count} input(s), got {len(ins)}")

        if op == "input":
            need(0)
            out = (n.arg("c"), n.arg("h"), n.arg("w")) if n.arg("h") is not None else (n.arg("c"),)
        elif op == "conv":
            need(1)
            if len(ins[0]) != 3 or ins[0][0] != n.arg("cin"):
                raise GraphError(f"{n.name}: conv expects {n.arg('cin')} channels, got {ins[0]}")
            k, s, p = n.arg("k"), n.arg("stride"), n.arg("pad")
            h, w = _conv_out(ins[0][1], k, s, p), _conv_out(ins[0][2], k, s, p)
            if h < 1 or w < 1:
                raise GraphError(f"{n.name}: kernel {k} too large for {ins[0]}")
            out = (n.arg("cout"), h, w)
        elif op == "linear":
            need(1)
            if ins[0] != (n.arg("din"),):
                raise GraphError(f"{n.name}: linear expects ({n.arg('din')},), got {ins[0]}")
            out = (n.arg("dout"),)
        elif op in ("bn", "act"):
            need(1)
            if ins[0][0] != n.arg("c"):
                raise GraphError(f"{n.name}: {op} over {n.arg('c')} channels got {ins[0]}")
            out = ins[0]
        elif op == "maxpool":
            need(1)
            k, s = n.arg("k"), n.arg("stride")
            if len(ins[0]) != 3 or ins[0][1] < k or ins[0][2] < k:
                raise GraphError(f"{n.name}: cannot pool {ins[0]}")
            out = (ins[0][0], (ins[0][1] - k) // s + 1, (ins[0][2] - k) // s + 1)
        elif op == "upsample":
            need(1)
            s = n.arg("scale")
            out = (ins[0][0], ins[0][1] * s, ins[0][2] * s)
        elif op == "add":
            if len(ins) < 2 or any(x != ins[0] for x in ins):
                raise GraphError(f"{n.name}: add needs >= 2 equal shapes, got {ins}")
            out = ins[0]
        elif op == "concat":
            if len(ins) < 2 or any(x[1:] != ins[0][1:] for x in ins):
                raise GraphError(f"{n.name}: concat needs matching spatial dims, got {ins}")
            out = (sum(x[0] for x in ins),) + ins[0][1:]
        elif op in ("sigmoid", "out"):
            need(1)
            out = ins[0]
        elif op == "gap":
            need(1)
            out = (ins[0][0],)
        elif op == "flatten":
            need(1)
            out = (int(np.prod(ins[0])),)
        else:  # pragma: no cover - make_node already rejects unknown ops
            raise GraphError(op)
        shapes[n.name] = tuple(int(v) for v in out)
    if sum(1 for n in nodes if n.op == "input") != 1:
        raise GraphError("graph needs exactly one input node")
    return shapes


def node_param_count(n: Node, shapes) -> int:
    if n.op == "conv":
        w = n.arg("cout") * n.arg("cin") * n.arg("k") ** 2
        return w + (n.arg("cout") if n.arg("bias", 0) else 0)
    if n.op == "linear":
        return n.arg("din") * n.arg("dout") + (n.arg("dout") if n.arg("bias", 0) else 0)
    if n.op == "bn":
        return 2 * n.arg("c")
    if n.op == "act" and n.arg("kind") == "prelu":
        return n.arg("slopes")
    return 0


# -- executor ------------------------------------------------------------------------

def make_layer(n: Node, rng, dtype, alpha_granularity="per_tensor"):
    name = n.name
    if n.op == "conv":
        if n.binarize:
            return L.BinaryConv2d(n.arg("cin"), n.arg("cout"), n.arg("k"), n.arg("stride"), n.arg("pad"),
                                  rng=rng, dtype=dtype, name=name, alpha_granularity=alpha_granularity)
        return L.Conv2d(n.arg("cin"), n.arg("cout"), n.arg("k"), n.arg("stride"), n.arg("pad"),
                        bias=bool(n.arg("bias", 0)), rng=rng, dtype=dtype, name=name)
    if n.op == "linear":
        if n.binarize:
            return L.BinaryLinear(n.arg("din"), n.arg("dout"), rng=rng, dtype=dtype, name=name,
                                  alpha_granularity=alpha_granularity)
        return L.Linear(n.arg("din"), n.arg("dout"), bias=bool(n.arg("bias", 0)), rng=rng, dtype=dtype, name=name)
    if n.op == "bn":
        return L.BatchNorm2d(n.arg("c"), dtype=dtype, name=name)
    if n.op == "act":
        kind = n.arg("kind")
        return L.Activation(kind, n.arg("c"), per_channel=n.arg("slopes", 1) > 1, dtype=dtype, name=name) \
            if kind == "prelu" else L.Activation(kind, name=name)
    if n.op == "maxpool":
        return L.MaxPool2d(n.arg("k"), n.arg("stride"), name=name)
    if n.op == "upsample":
        return L.Upsample(n.arg("scale"), name=name)
    if n.op == "sigmoid":
        return L.Sigmoid(name)
    if n.op == "gap":
        return L.GlobalAvgPool(name)
    if n.op == "flatten":
        return L.Flatten(name)
    return None


def channels_last(shape) -> tuple:
    """(C, H, W) graph shape -> (H, W, C) array shape."""
    return tuple(shape[1:]) + (shape[0],) if len(shape) == 3 else tuple(shape)


class Network:
    """Runtime for a LayerGraph: owns layers, runs forward/backward.

    Arrays are channels-last: images [N, H, W, C], outputs [N, H, W, L].
    """

    def __init__(self, graph: LayerGraph, seed: int = 0, dtype=np.float32, alpha_granularity="per_tensor"):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = {n.name: make_layer(n, rng, self.dtype, alpha_granularity) for n in graph.nodes}
        self._order = list(graph.nodes)

    # parameters
    def parameters(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            if layer is None:
                continue
            for k, v in layer.params.items():
                out[f"{name}/{k}"] = v
        return out

    def buffers(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            for k, v in getattr(layer, "buffers", {}).items():
                out[f"{name}/{k}"] = v
        return out

    def gradients(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            if layer is None:
                continue
            for k, g in layer.grads.items():
                out[f"{name}/{k}"] = g
        return out

    def set_parameter(self, key, value) -> None:
        name, _, k = key.rpartition("/")
        layer = self.layers[name]
        if k in layer.params:
            layer.params[k] = value
        elif k in getattr(layer, "buffers", {}):
            layer.buffers[k] = value
        else:
            raise KeyError(key)

    def binary_param_keys(self) -> list[str]:
        return [f"{n.name}/w" for n in self._order if n.binarize]

    def zero_grad(self) -> None:
        for layer in self.layers.values():
            if layer is not None:
                layer.zero_grad()

    def tape_modes(self) -> dict:
        return {name: layer.tape.mode for name, layer in self.layers.items()
                if layer is not None and layer.tape is not None}

    # passes
    def forward(self, x, mode: L.BinMode = L.REAL, training: bool = True, keep=()):
        """Returns the list of tap outputs (and a dict of ``keep`` node values if requested)."""
        x = np.asarray(x, dtype=self.dtype)
        inp = self.graph.input_node
        expected = channels_last(self.graph.shape_of(inp.name))
        if x.shape[1:] != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match graph input {expected}")
        values = {}
        for n in self._order:
            ins = [values[i] for i in n.inputs]
            if n.op == "input":
                v = x
            elif n.op == "add":
                v = ins[0]
                for other in ins[1:]:
                    v = v + other
            elif n.op == "concat":
                v = np.concatenate(ins, axis=-1)
            elif n.op == "out":
                v = ins[0]
            else:
                layer_mode = mode if n.binarize else L.REAL
                v = self.layers[n.name].forward(ins[0], layer_mode, training)
            values[n.name] = v
        outs = [values[o] for o in self.graph.outputs]
        if keep:
            return outs, {k: values[k] for k in keep}
        return outs

    def backward(self, out_grads, extra_grads=None):
        """Backpropagate gradients of the taps (and optionally of named nodes)."""
        grads: dict[str, np.ndarray] = {}

        def push(name, g):
            grads[name] = grads[name] + g if name in grads else g

        for name, g in zip(self.graph.outputs, out_grads):
            if g is not None:
                push(name, g)
        for name, g in (extra_grads or {}).items():
            push(name, g)
        input_grad = None
        for n in reversed(self._order):
            g = grads.pop(n.name, None)
            if g is None:
                continue
            if n.op == "input":
                input_grad = g
            elif n.op in ("add", "out"):
                for i in n.inputs:
                    push(i, g)
            elif n.op == "concat":
                start = 0
                for i in n.inputs:
                    c = self.graph.shape_of(i)[0]
                    push(i, g[..., start:start + c])
                    start += c
            else:
                push(n.inputs[0], self.layers[n.name].backward(g))
        return input_grad


# -- builders ------------------------------------------------------------------------

class GraphBuilder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, name, op, inputs=(), binarize=False, **args) -> str:
        self.nodes.append(make_node(name, op, inputs, binarize, **args))
        return name

    def build(self, stack_count=1) -> LayerGraph:
        return LayerGraph(tuple(self.nodes), stack_count)

    def act(self, name, x, c, kind, per_channel=True) -> str:
        if kind == "prelu":
            return self.add(name, "act", [x], kind=kind, c=c, slopes=c if per_channel else 1)
        return self.add(name, "act", [x], kind=kind, c=c)

    def hier_block(self, prefix, x, c_in, c_out, act="prelu", per_channel=True) -> str:
        if c_out % 4:
            raise GraphError(f"hierarchical block needs c_out divisible by 4, got {c_out}")
        widths = (c_out // 2, c_out // 4, c_out // 4)
        branch_outs = []
        prev, prev_c = x, c_in
        for i, cw in enumerate(widths, start=1):
            bn = self.add(f"{prefix}.bn{i}", "bn", [prev], c=prev_c)
            cv = self.add(f"{prefix}.conv{i}", "conv", [bn], True, cin=prev_c, cout=cw, k=3, stride=1, pad=1)
            prev = self.act(f"{prefix}.act{i}", cv, cw, act, per_channel)
            prev_c = cw
            branch_outs.append(prev)
        cat = self.add(f"{prefix}.cat", "concat", branch_outs)
        skip = x
        if c_in != c_out:
            skip = self.add(f"{prefix}.proj", "conv", [x], cin=c_in, cout=c_out, k=1, stride=1, pad=0, bias=1)
        return self.add(f"{prefix}.out", "add", [cat, skip])

    def copy_graph(self, graph: LayerGraph, prefix: str, input_name: str) -> None:
        """Append ``graph``'s nodes under ``prefix``, wiring its input node to ``input_name``."""
        src_input = graph.input_node.name
        rename = {src_input: input_name}
        for n in graph.nodes:
            if n.op == "input":
                continue
            rename[n.name] = prefix + n.name
            ins = tuple(rename[i] for i in n.inputs)
            self.nodes.append(Node(prefix + n.name, n.op, n.args, ins, n.binarize))


def build_hier_block(c_in, c_out, size=8, act="prelu", per_channel=True) -> LayerGraph:
    """Standalone graph of one hierarchical binary block on a ``size`` x ``size`` input."""
    b = GraphBuilder()
    x = b.add("input", "input", c=c_in, h=size, w=size)
    y = b.hier_block("block", x, c_in, c_out, act, per_channel)
    b.add("out0", "out", [y], index=0)
    return b.build()


def _hourglass_body(b, x, level, width, prefix, act, per_channel):
    up1 = b.hier_block(f"{prefix}up1", x, width, width, act, per_channel)
    low = b.add(f"{prefix}pool", "maxpool", [x], k=2, stride=2)
    low1 = b.hier_block(f"{prefix}low1", low, width, width, act, per_channel)
    if level > 1:
        low2 = _hourglass_body(b, low1, level - 1, width, f"{prefix}inner.", act, per_channel)
    else:
        low2 = b.hier_block(f"{prefix}low2", low1, width, width, act, per_channel)
    low3 = b.hier_block(f"{prefix}low3", low2, width, width, act, per_channel)
    up2 = b.add(f"{prefix}up", "upsample", [low3], scale=2)
    return b.add(f"{prefix}merge", "add", [up1, up2])


# names inside a single-hourglass graph that stacking relies on
HG_FEATURES = "feat.out"
HG_HEATMAPS = "heat"


def build_hourglass(depth=2, width=32, num_landmarks=5, size=16, act="prelu", per_channel=True) -> LayerGraph:
    """One hourglass with its heatmap head, on a ``width`` x ``size`` x ``size`` feature input."""
    if depth < 1:
        raise GraphError("hourglass depth must be >= 1")
    if width % 4:
        raise GraphError("hourglass width must be divisible by 4")
    if size % (2 ** depth):
        raise GraphError(f"input size {size} not divisible by 2^{depth}")
    b = GraphBuilder()
    x = b.add("input", "input", c=width, h=size, w=size)
    hg = _hourglass_body(b, x, depth, width, "hg.", act, per_channel)
    feat = b.hier_block("feat", hg, width, width, act, per_channel)
    logits = b.add("head", "conv", [feat], cin=width, cout=num_landmarks, k=1, stride=1, pad=0, bias=1)
    heat = b.add(HG_HEATMAPS, "sigmoid", [logits])
    b.add("out0", "out", [heat], index=0)
    return b.build()


def _stack_into(b: GraphBuilder, hg: LayerGraph, n_stacks: int, binarize_joins: bool, x: str) -> None:
    width = hg.shape_of(HG_FEATURES)[0]
    landmarks = hg.shape_of(HG_HEATMAPS)[0]
    stage_in = x
    for k in range(n_stacks):
        p = f"s{k}."
        before = len(b.nodes)
        b.copy_graph(hg, p, stage_in)
        # re-index the supervision tap
        for i in range(before, len(b.nodes)):
            n = b.nodes[i]
            if n.op == "out":
                b.nodes[i] = make_node(n.name, "out", n.inputs, index=k)
        if k == n_stacks - 1:
            break
        j = f"join{k}."
        feat, heat = p + HG_FEATURES, p + HG_HEATMAPS
        if binarize_joins:
            fb = b.add(j + "feat.bn", "bn", [feat], c=width)
            fj = b.add(j + "feat.conv", "conv", [fb], True, cin=width, cout=width, k=1, stride=1, pad=0)
            hb = b.add(j + "heat.bn", "bn", [heat], c=landmarks)
            hj = b.add(j + "heat.conv", "conv", [hb], True, cin=landmarks, cout=width, k=1, stride=1, pad=0)
        else:
            fj = b.add(j + "feat.conv", "conv", [feat], cin=width, cout=width, k=1, stride=1, pad=0, bias=1)
            hj = b.add(j + "heat.conv", "conv", [heat], cin=landmarks, cout=width, k=1, stride=1, pad=0, bias=1)
        stage_in = b.add(j + "sum", "add", [stage_in, fj, hj])


def build_stack(hg: LayerGraph, n_stacks: int, binarize_joins: bool = True) -> LayerGraph:
    """``n_stacks`` copies of ``hg`` joined by 1x1 convs; one supervision tap per stage."""
    if n_stacks < 1:
        raise GraphError("n_stacks must be >= 1")
    if n_stacks == 1:
        return hg
    b = GraphBuilder()
    inp = hg.input_node
    x = b.add(inp.name, "input", **dict(inp.args))
    _stack_into(b, hg, n_stacks, binarize_joins, x)
    return b.build(n_stacks)


def build_pose_net(image_size=64, in_channels=1, depth=2, width=32, num_landmarks=5, stacks=1,
                   binarize_joins=True, act="prelu", per_channel=True, heatmap_stride=4) -> LayerGraph:
    """Real stem (a strided conv, plus a max-pool when ``heatmap_stride`` is 4) followed by
    a stack of binary hourglasses."""
    if heatmap_stride not in (2, 4):
        raise GraphError("heatmap stride must be 2 or 4")
    if image_size % heatmap_stride:
        raise GraphError(f"image size must be divisible by {heatmap_stride}")
    size = image_size // heatmap_stride
    hg = build_hourglass(depth, width, num_landmarks, size, act, per_channel)
    b = GraphBuilder()
    x = b.add("input", "input", c=in_channels, h=image_size, w=image_size)
    x = b.add("stem.conv", "conv", [x], cin=in_channels, cout=width, k=3, stride=2, pad=1, bias=1)
    x = b.add("stem.bn", "bn", [x], c=width)
    x = b.act("stem.act", x, width, act, per_channel)
    if heatmap_stride == 4:
        x = b.add("stem.pool", "maxpool", [x], k=2, stride=2)
    _stack_into(b, hg, stacks, binarize_joins, x)
    return b.build(stacks)


def last_features_node(graph: LayerGraph) -> str:
    """Name of the pre-head feature node of the final stage (feature matching)."""
    names = [n.name for n in graph.nodes if n.name.endswith(HG_FEATURES)]
    if not names:
        raise GraphError("graph has no hourglass feature node")
    return names[-1]


# -- classifiers ------------------------------------------------------------------------

CLASSIFIER_PRESETS = ("tiny", "alexnet_like", "resnet18_like")


def _bin_conv_unit(b, prefix, x, cin, cout, k, stride, pad, act, per_channel):
    bn = b.add(f"{prefix}.bn", "bn", [x], c=cin)
    cv = b.add(f"{prefix}.conv", "conv", [bn], True, cin=cin, cout=cout, k=k, stride=stride, pad=pad)
    return b.act(f"{prefix}.act", cv, cout, act, per_channel)


def _bin_linear_unit(b, prefix, x, din, dout, act, per_channel):
    bn = b.add(f"{prefix}.bn", "bn", [x], c=din)
    fc = b.add(f"{prefix}.fc", "linear", [bn], True, din=din, dout=dout)
    return b.act(f"{prefix}.act", fc, dout, act, per_channel)


def build_classifier(preset="tiny", num_classes=10, in_channels=None, image_size=None, width=1.0,
                     act="prelu", per_channel=True) -> LayerGraph:
    """Classifier with real first and last layers and binary layers in between."""
    if preset not in CLASSIFIER_PRESETS:
        raise GraphError(f"unknown classifier preset {preset!r}")
    b = GraphBuilder()

    def ch(c):
        return max(4, int(round(c * width)))

    if preset == "tiny":
        in_channels = in_channels or 1
        image_size = image_size or 28
        c1, c2 = ch(32), ch(64)
        x = b.add("input", "input", c=in_channels, h=image_size, w=image_size)
        x = b.add("stem.conv", "conv", [x], cin=in_channels, cout=c1, k=3, stride=1, pad=1, bias=1)
        x = b.act("stem.act", x, c1, act, per_channel)
        x = _bin_conv_unit(b, "b1", x, c1, c1, 3, 1, 1, act, per_channel)
        x = b.add("pool1", "maxpool", [x], k=2, stride=2)
        x = _bin_conv_unit(b, "b2", x, c1, c2, 3, 1, 1, act, per_channel)
        x = b.add("pool2", "maxpool", [x], k=2, stride=2)
        x = _bin_conv_unit(b, "b3", x, c2, c2, 3, 1, 1, act, per_channel)
        x = _bin_conv_unit(b, "b4", x, c2, c2, 3, 1, 1, act, per_channel)
        x = b.add("gap", "gap", [x])
        x = b.add("head.bn", "bn", [x], c=c2)
        x = b.add("head.fc", "linear", [x], din=c2, dout=num_classes, bias=1)
    elif preset == "alexnet_like":
        in_channels = in_channels or 3
        image_size = image_size or 227
        c = [ch(96), ch(256), ch(384), ch(384), ch(256)]
        hidden = ch(4096)
        x = b.add("input", "input", c=in_channels, h=image_size, w=image_size)
        x = b.add("conv1", "conv", [x], cin=in_channels, cout=c[0], k=11, stride=4, pad=0, bias=1)
        x = b.act("act1", x, c[0], act, per_channel)
        x = b.add("pool1", "maxpool", [x], k=3, stride=2)
        x = _bin_conv_unit(b, "conv2", x, c[0], c[1], 5, 1, 2, act, per_channel)
        x = b.add("pool2", "maxpool", [x], k=3, stride=2)
        x = _bin_conv_unit(b, "conv3", x, c[1], c[2], 3, 1, 1, act, per_channel)
        x = _bin_conv_unit(b, "conv4", x, c[2], c[3], 3, 1, 1, act, per_channel)
        x = _bin_conv_unit(b, "conv5", x, c[3], c[4], 3, 1, 1, act, per_channel)
        x = b.add("pool5", "maxpool", [x], k=3, stride=2)
        x = b.add("flatten", "flatten", [x])
        d = infer_shapes(b.nodes)[x][0]
        x = _bin_linear_unit(b, "fc6", x, d, hidden, act, per_channel)
        x = _bin_linear_unit(b, "fc7", x, hidden, hidden, act, per_channel)
        x = b.add("fc8", "linear", [x], din=hidden, dout=num_classes, bias=1)
    else:
        in_channels = in_channels or 3
        image_size = image_size or 224
        stages = [ch(64), ch(128), ch(256), ch(512)]
        x = b.add("input", "input", c=in_channels, h=image_size, w=image_size)
        x = b.add("stem.conv", "conv", [x], cin=in_channels, cout=stages[0], k=7, stride=2, pad=3, bias=1)
        x = b.add("stem.bn", "bn", [x], c=stages[0])
        x = b.act("stem.act", x, stages[0], act, per_channel)
        x = b.add("stem.pool", "maxpool", [x], k=3, stride=2)
        cin = stages[0]
        for si, cout in enumerate(stages, start=1):
            for bi in range(2):
                stride = 2 if (si > 1 and bi == 0) else 1
                p = f"layer{si}.{bi}"
                y = _bin_conv_unit(b, p + ".a", x, cin, cout, 3, stride, 1, act, per_channel)
                y = _bin_conv_unit(b, p + ".b", y, cout, cout, 3, 1, 1, act, per_channel)
                skip = x
                if stride != 1 or cin != cout:
                    skip = b.add(p + ".proj", "conv", [x], cin=cin, cout=cout, k=1, stride=stride, pad=0, bias=1)
                x = b.add(p + ".out", "add", [y, skip])
                cin = cout
        x = b.add("gap", "gap", [x])
        x = b.add("head.bn", "bn", [x], c=cin)
        x = b.add("fc", "linear", [x], din=cin, dout=num_classes, bias=1)
    b.add("out0", "out", [x], index=0)
    return b.build()
