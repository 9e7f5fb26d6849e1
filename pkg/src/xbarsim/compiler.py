"""Dataflow compilation over the crossbar hierarchy.

The pipeline is: partition trainable matrices into 128x128 shards placed on
MCUs, build a per-batch training graph whose matrix nodes are shard-level
MVM / MTVM / OPA operations, schedule the graph into levels (one level = one
fused multi-MCU instruction slot per core), and either evaluate the graph
functionally or hand it to the lowering stage for ISA emission.

Level semantics: vector work is free (it never occupies an MCU), so a vector
node sits at the availability level of its operands. A matrix node lands one
level after its operands become available, subject to per-MCU structural
limits that depend on the variant: a single-copy MCU runs one operation per
level, a dual-copy MCU can co-issue one MVM and one MTVM (and an OPA when its
operand registers agree with the co-issued reads).
"""

import math

import numpy as np

from .errors import (CapacityError, UnsupportedConvError, ValidationError,
                     XbarError)
from .isa import MAX_MCUS
from .slicing import SliceConfig, SlicedMatrix

SEG = 128  # crossbar dimension: segment size for vectors and shard tiling

MATRIX_KINDS = ("mvm", "mtvm", "opa")


def split_sizes(n, chunk=SEG):
    sizes = [chunk] * (n // chunk)
    if n % chunk:
        sizes.append(n % chunk)
    return sizes


class Placement:
    """Tile/core/MCU topology and the shard -> MCU slot mapping."""

    def __init__(self, tiles, cores_per_tile=8, mcus_per_core=2):
        if tiles < 1 or cores_per_tile < 1:
            raise ValidationError("topology counts must be positive")
        if not 1 <= mcus_per_core <= MAX_MCUS:
            raise ValidationError("mcus_per_core must be 1..%d" % MAX_MCUS)
        self.tiles = tiles
        self.cores_per_tile = cores_per_tile
        self.mcus_per_core = mcus_per_core

    @classmethod
    def sized_for(cls, n_shards, cores_per_tile=8, mcus_per_core=2):
        per_tile = cores_per_tile * mcus_per_core
        tiles = max(1, math.ceil(n_shards / per_tile))
        return cls(tiles, cores_per_tile, mcus_per_core)

    @property
    def total_cores(self):
        return self.tiles * self.cores_per_tile

    @property
    def total_mcus(self):
        return self.total_cores * self.mcus_per_core

    def slot(self, index):
        """Flat slot index -> (tile, global core, mcu-within-core)."""
        core = index // self.mcus_per_core
        mcu = index % self.mcus_per_core
        return core // self.cores_per_tile, core, mcu

    def tile_of_core(self, core):
        return core // self.cores_per_tile

    def to_dict(self):
        return {"tiles": self.tiles, "cores_per_tile": self.cores_per_tile,
                "mcus_per_core": self.mcus_per_core}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["tiles"], doc.get("cores_per_tile", 8),
                   doc.get("mcus_per_core", 2))


class Shard:
    """One 128x128 (or edge-sized) block of a trainable matrix."""

    __slots__ = ("layer", "index", "bi", "cj", "row0", "col0", "rows", "cols",
                 "tile", "core", "mcu")

    def __init__(self, layer, index, bi, cj, row0, col0, rows, cols):
        self.layer = layer
        self.index = index
        self.bi = bi
        self.cj = cj
        self.row0 = row0
        self.col0 = col0
        self.rows = rows
        self.cols = cols
        self.tile = self.core = self.mcu = None

    @property
    def cells(self):
        return self.rows * self.cols

    def __repr__(self):
        return "Shard(L%d[%d,%d] %dx%d @t%s/c%s/m%s)" % (
            self.layer, self.bi, self.cj, self.rows, self.cols,
            self.tile, self.core, self.mcu)


class TrainableMatrix:
    def __init__(self, layer, rows, cols):
        self.layer = layer
        self.rows = rows
        self.cols = cols
        self.row_sizes = split_sizes(rows)
        self.col_sizes = split_sizes(cols)
        self.grid = (len(self.row_sizes), len(self.col_sizes))
        self.shards = []  # row-major grid, filled by partition()

    def shard_at(self, bi, cj):
        return self.shards[bi * self.grid[1] + cj]


class PartitionedModel:
    def __init__(self, model, placement, matrices, shards):
        self.model = model
        self.placement = placement
        self.matrices = matrices
        self.shards = shards

    @property
    def n_shards(self):
        return len(self.shards)


def partition(model, placement=None):
    """Split every layer matrix into crossbar-sized shards and assign each
    to an MCU slot in flat round-robin order. Only shard descriptors are
    built here; digit storage is realized later from actual weights."""
    matrices = []
    shards = []
    for lnum, layer in enumerate(model.layers, 1):
        rows, cols = layer.matrix_shape
        mat = TrainableMatrix(lnum, rows, cols)
        r0 = 0
        for bi, rsz in enumerate(mat.row_sizes):
            c0 = 0
            for cj, csz in enumerate(mat.col_sizes):
                sh = Shard(lnum, len(shards), bi, cj, r0, c0, rsz, csz)
                mat.shards.append(sh)
                shards.append(sh)
                c0 += csz
            r0 += rsz
        matrices.append(mat)
    if placement is None:
        placement = Placement.sized_for(len(shards))
    if len(shards) > placement.total_mcus:
        raise CapacityError("%d shards exceed %d MCU slots"
                            % (len(shards), placement.total_mcus))
    for sh in shards:
        sh.tile, sh.core, sh.mcu = placement.slot(sh.index)
    return PartitionedModel(model, placement, matrices, shards)


class ShardStore:
    """Realized slice storage: shard index -> SlicedMatrix."""

    def __init__(self, pm, cfg):
        self.pm = pm
        self.cfg = cfg
        self.mats = {}

    def realize(self, weights_by_layer):
        """weights_by_layer: list of int64 arrays (raw fixed-point), one per
        layer, shaped like the layer's trainable matrix."""
        if len(weights_by_layer) != len(self.pm.matrices):
            raise ValidationError("need one weight matrix per layer")
        for mat, w in zip(self.pm.matrices, weights_by_layer):
            w = np.asarray(w, dtype=np.int64)
            if w.shape != (mat.rows, mat.cols):
                raise ValidationError(
                    "layer %d weights must be %dx%d, got %s"
                    % (mat.layer, mat.rows, mat.cols, w.shape))
            for sh in mat.shards:
                block = w[sh.row0:sh.row0 + sh.rows, sh.col0:sh.col0 + sh.cols]
                self.mats[sh.index] = SlicedMatrix.from_weights(block, self.cfg)
        return self

    def __getitem__(self, shard_index):
        return self.mats[shard_index]

    def reconstruct_layer(self, layer):
        mat = self.pm.matrices[layer - 1]
        out = np.zeros((mat.rows, mat.cols), dtype=np.int64)
        for sh in mat.shards:
            out[sh.row0:sh.row0 + sh.rows, sh.col0:sh.col0 + sh.cols] = \
                self.mats[sh.index].reconstruct()
        return out


# ------------------------------------------------------------------- graph

class Node:
    __slots__ = ("id", "kind", "subop", "layer", "b", "seg", "length",
                 "preds", "shard", "core", "name")

    def __init__(self, id, kind, layer, b, length, preds, shard=None,
                 subop=None, seg=0, core=None, name=""):
        self.id = id
        self.kind = kind
        self.subop = subop
        self.layer = layer
        self.b = b
        self.seg = seg
        self.length = length
        self.preds = tuple(preds)
        self.shard = shard
        self.core = core
        self.name = name

    @property
    def is_matrix(self):
        return self.kind in MATRIX_KINDS

    def __repr__(self):
        return "Node(%d %s %s)" % (self.id, self.kind, self.name)


class Graph:
    def __init__(self, pm, batch, variant, forward_only=False):
        self.pm = pm
        self.batch = batch
        self.variant = variant
        self.forward_only = forward_only
        self.nodes = []
        self.inputs = {}   # (b, seg) -> node id
        self.labels = {}   # b -> node id
        self.logits = {}   # b -> node id

    def add(self, kind, layer, b, length, preds, **kw):
        nid = len(self.nodes)
        for p in preds:
            if not 0 <= p < nid:
                raise ValidationError("node %d has forward reference" % nid)
        node = Node(nid, kind, layer, b, length, preds, **kw)
        self.nodes.append(node)
        return nid

    def node(self, nid):
        return self.nodes[nid]

    @property
    def matrix_nodes(self):
        return [n for n in self.nodes if n.is_matrix]

    def opa_count(self):
        return sum(1 for n in self.nodes if n.kind == "opa")


def _merge_tree(g, parts, layer, b, tag):
    """Binary tree of saturating vector adds; returns the root node id."""
    while len(parts) > 1:
        nxt = []
        for i in range(0, len(parts) - 1, 2):
            a, bb = parts[i], parts[i + 1]
            core = g.node(a).core
            nxt.append(g.add("vec", layer, b, g.node(a).length, (a, bb),
                             subop="add", core=core,
                             name="%s+%d" % (tag, len(nxt))))
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def build_graph(pm, batch, variant, forward_only=False):
    """Training graph for one kernel invocation over `batch` inputs.

    Forward (per input): segment-wise shard MVMs, partial-sum merges, then
    the activation. Backward: softmax loss gradient, shard MTVMs with merges
    and activation-gradient gating. Weight update: one OPA node per shard per
    input. With more than one input on a deferring variant (1 or 2), a
    barrier keeps every OPA after the whole batch's backward pass, so the
    emitted block mirrors the deferred-update dataflow.
    """
    if variant not in (1, 2, 3):
        raise ValidationError("variant must be 1, 2 or 3")
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    model = pm.model
    for layer in model.layers:
        if layer.kind != "dense":
            raise UnsupportedConvError(
                "instruction-level compilation covers dense layers; "
                "convolutional layers run on the functional backend")
    classes = model.output_len
    g = Graph(pm, batch, variant, forward_only)
    nlayers = len(model.layers)
    opa_specs = []  # (shard, x_node, d_node, b)

    xs = {}      # (b, layer, seg) -> node id of activation segment
    hs = {}      # (b, layer, seg) -> node id of pre-activation segment
    deltas = {}  # (b, layer, seg) -> node id of error segment

    for b in range(batch):
        mat0 = pm.matrices[0]
        for seg, sz in enumerate(mat0.row_sizes):
            nid = g.add("input", 0, b, sz, (), seg=seg,
                        name="x0[%d]s%d" % (b, seg))
            g.inputs[(b, seg)] = nid
            xs[(b, 0, seg)] = nid
        if not forward_only:
            g.labels[b] = g.add("label", nlayers, b, classes, (),
                                name="y[%d]" % b)

        for lnum, layer in enumerate(model.layers, 1):
            mat = pm.matrices[lnum - 1]
            rb, cb = mat.grid
            for cj in range(cb):
                parts = []
                for bi in range(rb):
                    sh = mat.shard_at(bi, cj)
                    parts.append(g.add(
                        "mvm", lnum, b, sh.cols, (xs[(b, lnum - 1, bi)],),
                        shard=sh, seg=cj, core=sh.core,
                        name="mvm L%d[%d,%d] b%d" % (lnum, bi, cj, b)))
                h = _merge_tree(g, parts, lnum, b, "h%d[%d]s%d" % (lnum, b, cj))
                hs[(b, lnum, cj)] = h
                if layer.activation == "none":
                    xs[(b, lnum, cj)] = h
                else:
                    xs[(b, lnum, cj)] = g.add(
                        "vec", lnum, b, g.node(h).length, (h,),
                        subop=layer.activation, core=g.node(h).core,
                        name="x%d[%d]s%d" % (lnum, b, cj))

        if forward_only:
            g.logits[b] = xs[(b, nlayers, 0)]
            continue

        last = model.layers[-1]
        if len(pm.matrices[-1].col_sizes) != 1:
            raise CapacityError("output layer wider than one segment "
                                "(%d classes)" % classes)
        logits = xs[(b, nlayers, 0)]
        g.logits[b] = logits
        grad = g.add("vec", nlayers, b, classes, (logits, g.labels[b]),
                     subop="loss_grad", core=g.node(logits).core,
                     name="dE[%d]" % b)
        grad = _gate(g, grad, last, nlayers, b, 0, hs, xs)
        deltas[(b, nlayers, 0)] = grad

        for lnum in range(nlayers, 0, -1):
            layer = model.layers[lnum - 1]
            mat = pm.matrices[lnum - 1]
            rb, cb = mat.grid
            for bi in range(rb):
                for cj in range(cb):
                    sh = mat.shard_at(bi, cj)
                    opa_specs.append(
                        (sh, xs[(b, lnum - 1, bi)], deltas[(b, lnum, cj)], b))
            if lnum == 1:
                continue
            below = model.layers[lnum - 2]
            for bi in range(rb):
                parts = []
                for cj in range(cb):
                    sh = mat.shard_at(bi, cj)
                    parts.append(g.add(
                        "mtvm", lnum, b, sh.rows, (deltas[(b, lnum, cj)],),
                        shard=sh, seg=bi, core=sh.core,
                        name="mtvm L%d[%d,%d] b%d" % (lnum, bi, cj, b)))
                d = _merge_tree(g, parts, lnum, b,
                                "dx%d[%d]s%d" % (lnum - 1, b, bi))
                d = _gate(g, d, below, lnum - 1, b, bi, hs, xs)
                deltas[(b, lnum - 1, bi)] = d

    if forward_only:
        return g

    barrier = None
    if batch > 1 and variant in (1, 2):
        tails = tuple(sorted(deltas.values()))
        barrier = g.add("barrier", 0, 0, 0, tails, name="batch-edge")

    opa_specs.sort(key=lambda s: (s[3], s[0].layer, s[0].bi, s[0].cj))
    for sh, xn, dn, b in opa_specs:
        preds = (xn, dn) if barrier is None else (xn, dn, barrier)
        g.add("opa", sh.layer, b, 0, preds, shard=sh, core=sh.core,
              name="opa L%d[%d,%d] b%d" % (sh.layer, sh.bi, sh.cj, b))
    return g


def _gate(g, grad, layer, lnum, b, seg, hs, xs):
    """Apply the activation-derivative gate to an error segment."""
    if layer.activation == "none":
        return grad
    if layer.activation == "relu":
        saved = hs[(b, lnum, seg)]
        sub = "relu_grad"
    else:
        saved = xs[(b, lnum, seg)]
        sub = "sigmoid_grad"
    return g.add("vec", lnum, b, g.node(grad).length, (grad, saved),
                 subop=sub, core=g.node(grad).core,
                 name="dh%d[%d]s%d" % (lnum, b, seg))


# ---------------------------------------------------------------- schedule

_KIND_RANK = {"mvm": 0, "mtvm": 1, "opa": 2}

# operand register regions each matrix op drives, as (region, pred slot)
REGION_READS = {
    "mvm": (("row_in", 0),),
    "mtvm": (("col_in", 0),),
    "opa": (("row_in", 0), ("col_in", 1)),
}


class Schedule:
    def __init__(self, graph, variant, fused):
        self.graph = graph
        self.variant = variant
        self.fused = fused
        self.level = {}       # matrix node id -> level
        self.vec_level = {}   # vec node id -> emission level
        self.max_level = 0

    @property
    def mcu_timesteps(self):
        return len(set(self.level.values()))

    def groups(self):
        """{level: {core: [matrix node ids]}} in deterministic order."""
        out = {}
        for nid in sorted(self.level):
            node = self.graph.node(nid)
            lv = self.level[nid]
            out.setdefault(lv, {}).setdefault(node.core, []).append(nid)
        return out

    def levels_of(self, *kinds):
        return sorted(self.level[n.id] for n in self.graph.nodes
                      if n.kind in kinds and n.id in self.level)


def _heights(graph):
    """Longest chain of matrix ops from each node to any sink; vector nodes
    are transparent. Used as the scheduling priority."""
    succs = [[] for _ in graph.nodes]
    for n in graph.nodes:
        for p in n.preds:
            succs[p].append(n.id)
    h = [0] * len(graph.nodes)
    for n in reversed(graph.nodes):
        best = 0
        for s in succs[n.id]:
            cand = h[s] + (1 if graph.node(s).is_matrix else 0)
            best = max(best, cand)
        h[n.id] = best
    return h


def schedule(graph, fuse=True):
    """Assign every matrix node a level under the variant's structural
    rules, and every vector node the level at which it can be emitted."""
    variant = graph.variant
    sched = Schedule(graph, variant, fuse)
    nodes = graph.nodes
    height = _heights(graph)

    avail = {}

    def shifted(pid, consumer):
        # a value crossing cores is usable one level after production
        base = avail[pid]
        pn = nodes[pid]
        if (pn.core is not None and consumer.core is not None
                and pn.core != consumer.core):
            return base + 1
        return base

    for n in nodes:
        if n.kind in ("input", "label"):
            avail[n.id] = -1

    pending = set()
    for n in nodes:
        if n.is_matrix:
            pending.add(n.id)

    # updates to one shard must stay in emission (input) order, or replayed
    # queues and eager copies would disagree whenever a digit clamps
    opa_prev = {}
    last_opa = {}
    for n in nodes:
        if n.kind == "opa":
            if n.shard.index in last_opa:
                opa_prev[n.id] = last_opa[n.shard.index]
            last_opa[n.shard.index] = n.id

    def settle_vectors():
        for n in nodes:
            if n.kind in ("vec", "barrier") and n.id not in avail:
                if all(p in avail for p in n.preds):
                    if n.kind == "barrier":
                        avail[n.id] = max(avail[p] for p in n.preds)
                    else:
                        avail[n.id] = max(shifted(p, n) for p in n.preds)

    settle_vectors()
    level = 0
    guard = 4 * len(nodes) + 16
    while pending:
        if level > guard:
            raise XbarError("scheduler failed to converge")
        ready = []
        for nid in pending:
            n = nodes[nid]
            # matrix operands are staged after the receive window, so a
            # remote value needs no extra level here, unlike vector reads
            if all(p in avail for p in n.preds):
                if nid in opa_prev and opa_prev[nid] not in sched.level:
                    continue
                earliest = max(avail[p] for p in n.preds) + 1
                if earliest <= level:
                    ready.append(nid)
        ready.sort(key=lambda nid: (-height[nid], nodes[nid].b,
                                    nodes[nid].layer,
                                    _KIND_RANK[nodes[nid].kind], nid))
        core_used = {}
        slot_kind = {}
        slot_regions = {}
        for nid in ready:
            n = nodes[nid]
            slot = (n.core, n.shard.mcu)
            if not fuse:
                if core_used.get(n.core):
                    continue
            if variant == 1:
                if slot in slot_kind:
                    continue
                slot_kind[slot] = {n.kind}
            else:
                kinds = slot_kind.setdefault(slot, set())
                if n.kind in kinds:
                    continue
                demands = slot_regions.setdefault(slot, {})
                want = {}
                clash = False
                for region, pslot in REGION_READS[n.kind]:
                    value = n.preds[pslot]
                    if demands.get(region, value) != value:
                        clash = True
                        break
                    want[region] = value
                if clash:
                    continue
                kinds.add(n.kind)
                demands.update(want)
            core_used[n.core] = True
            sched.level[nid] = level
            avail[nid] = level
            pending.discard(nid)
        settle_vectors()
        level += 1

    for n in nodes:
        if n.kind == "vec":
            lv = max(0, avail[n.id])
            sched.vec_level[n.id] = lv
    levels = list(sched.level.values()) + list(sched.vec_level.values())
    sched.max_level = max(levels) if levels else 0
    return sched


# --------------------------------------------------------------- evaluator

def interpret(graph, store, inputs, labels, lr_shift):
    """Run the graph functionally against realized shard storage.

    inputs: {b: int64 array of the model input}; labels: {b: one-hot raw
    Q8.8 array}. Matrix updates mutate `store` in node order, which matches
    the per-shard order of the scheduled machine program, so final weights
    are bit-identical to instruction-level execution.
    """
    from .vecops import apply_alu

    model = graph.pm.model
    mat0 = graph.pm.matrices[0]
    values = {}
    for b in range(graph.batch):
        x = np.asarray(inputs[b], dtype=np.int64)
        if x.shape != (model.input_len,):
            raise ValidationError("input %d has wrong shape" % b)
        off = 0
        for seg, sz in enumerate(mat0.row_sizes):
            values[graph.inputs[(b, seg)]] = x[off:off + sz]
            off += sz
        if not graph.forward_only:
            values[graph.labels[b]] = np.asarray(labels[b], dtype=np.int64)

    for n in graph.nodes:
        if n.kind in ("input", "label"):
            continue
        if n.kind == "barrier":
            values[n.id] = None
        elif n.kind == "vec":
            a = values[n.preds[0]]
            bb = values[n.preds[1]] if len(n.preds) > 1 else None
            values[n.id] = apply_alu(n.subop, a, bb)
        elif n.kind == "mvm":
            values[n.id] = store[n.shard.index].mvm(values[n.preds[0]])
        elif n.kind == "mtvm":
            values[n.id] = store[n.shard.index].mtvm(values[n.preds[0]])
        elif n.kind == "opa":
            store[n.shard.index].opa(values[n.preds[0]], values[n.preds[1]],
                                     lr_shift=lr_shift)
    return {"logits": {b: values[graph.logits[b]] for b in range(graph.batch)},
            "values": values}
