"""Scheduled graphs to per-core machine programs.

Each schedule level expands, on every core, into six ordered windows:
receive values produced remotely at the previous level, stage matrix
operands into MCU register windows, issue one fused mcu instruction, store
matrix outputs, run vector ALU work, send values other cores will need. A
value produced at level L is received at level L+1, so every send sits at
an earlier level than its matching receive and channel traffic cannot
deadlock; within one channel both ends order transfers by producer node
id, so FIFO contents line up instruction for instruction.

Shared memory is partitioned into per-core segments. The low end of each
segment holds static kernel I/O (inputs, labels, logits), written and read
by the training driver; the rest is a first-fit arena for intermediate
values, freed after their last local read. Arena exhaustion raises
SpillOverflowError: there is no spill path to other tiles.
"""

import json
import os

from .compiler import REGION_READS, schedule
from .errors import CapacityError, SpillOverflowError, ValidationError
from .isa import (Instruction, MASK_MVM, MASK_MTVM, MASK_OPA, MAX_MCUS,
                  Program, disassemble, encode_program, mcu_region_base,
                  link_check)

SHARED_MEM_WORDS = 262144    # words of shared memory per tile
ALU_CHUNK = 48               # three operands of 48 fit the 160-entry file
W_OUT, W_A, W_B = 0, 48, 96  # general-file windows for ALU and transfers
MAX_LINKED_CORES = 32        # buffer ids pack a (src core, dst core) pair

_MASK_OF = {"mvm": MASK_MVM, "mtvm": MASK_MTVM, "opa": MASK_OPA}
_OUT_REGION = {"mvm": "col_out", "mtvm": "row_out"}
_UNARY = ("relu", "sigmoid")
_KIND_ORDER = {"mvm": 0, "mtvm": 1, "opa": 2}


def channel_buf(src_core, dst_core):
    return src_core * MAX_LINKED_CORES + dst_core


class _Arena:
    """First-fit allocator over one core's dynamic memory range."""

    def __init__(self, core, base, limit):
        self.core = core
        self.base = base
        self.limit = limit
        self.free = [[base, limit - base]] if limit > base else []
        self.high = 0  # extent in words above base ever claimed

    def alloc(self, length, level):
        for span in self.free:
            if span[1] >= length:
                addr = span[0]
                span[0] += length
                span[1] -= length
                if span[1] == 0:
                    self.free.remove(span)
                self.high = max(self.high, addr + length - self.base)
                return addr
        raise SpillOverflowError(
            "core %d value memory exhausted at level %d (need %d words in "
            "%d free)" % (self.core, level, length,
                          sum(s[1] for s in self.free)))

    def release(self, addr, length):
        self.free.append([addr, length])
        self.free.sort()
        merged = [self.free[0]]
        for span in self.free[1:]:
            if merged[-1][0] + merged[-1][1] == span[0]:
                merged[-1][1] += span[1]
            else:
                merged.append(span)
        self.free = merged


class CompiledKernel:
    """Per-core programs plus the I/O map the training driver uses.

    staging holds driver-visible memory slots:
      inputs: {(b, seg): [(core, addr, len), ...]}   write before run
      labels: {b: [(core, addr, len), ...]}          write before run
      logits: {b: (core, addr, len)}                 read after run
    """

    def __init__(self, graph, sched, programs, staging, meta):
        self.graph = graph
        self.pm = graph.pm
        self.schedule = sched
        self.programs = programs
        self.staging = staging
        self.meta = meta

    @property
    def cores(self):
        return sorted(self.programs)

    def validate(self):
        tiles = {c: self.pm.placement.tile_of_core(c) for c in self.programs}
        for prog in self.programs.values():
            prog.validate(self.pm.placement.mcus_per_core)
        link_check(self.programs, tiles)
        return self

    def total_instructions(self):
        return sum(len(p) for p in self.programs.values())

    def save(self, outdir):
        """Write one binary and one listing per core plus a JSON manifest."""
        os.makedirs(outdir, exist_ok=True)
        for core, prog in self.programs.items():
            with open(os.path.join(outdir, "core%03d.bin" % core), "wb") as fh:
                fh.write(encode_program(prog))
            with open(os.path.join(outdir, "core%03d.s" % core), "w") as fh:
                fh.write(disassemble(prog))
        doc = {
            "model": json.loads(self.pm.model.to_json()),
            "placement": self.pm.placement.to_dict(),
            "cores": self.cores,
            "staging": {
                "inputs": {"%d:%d" % k: [list(s) for s in v]
                           for k, v in sorted(self.staging["inputs"].items())},
                "labels": {str(k): [list(s) for s in v]
                           for k, v in sorted(self.staging["labels"].items())},
                "logits": {str(k): list(v)
                           for k, v in sorted(self.staging["logits"].items())},
            },
            "meta": {
                **{k: v for k, v in self.meta.items()
                   if k not in ("mcu_shards", "core_mem")},
                "mcu_shards": {"%d:%d" % k: v
                               for k, v in sorted(self.meta["mcu_shards"].items())},
                "core_mem": {str(c): m
                             for c, m in sorted(self.meta["core_mem"].items())},
            },
        }
        path = os.path.join(outdir, "kernel.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return path


def lower(graph, sched=None, lr_shift=6, crs_prologue=False,
          mem_words_per_tile=SHARED_MEM_WORDS):
    """Emit per-core programs for a scheduled graph.

    lr_shift is the learning-rate exponent the MCUs apply at OPA issue; it
    travels in the kernel header, not in any instruction. crs_prologue
    prepends a carry-resolution pass over every resident matrix, used by
    the driver at resolution-period boundaries.
    """
    if not 0 <= int(lr_shift) <= 31:
        raise ValidationError("lr_shift must be 0..31")
    if sched is None:
        sched = schedule(graph)
    pm = graph.pm
    place = pm.placement
    nodes = graph.nodes
    logit_ids = set(graph.logits.values())

    used = sorted({sh.core for sh in pm.shards})
    if used and used[-1] + 1 > MAX_LINKED_CORES:
        raise CapacityError(
            "compiled programs address at most %d cores, model spans %d; "
            "larger models run on the functional backend"
            % (MAX_LINKED_CORES, used[-1] + 1))

    percore = mem_words_per_tile // place.cores_per_tile
    base_of = {c: (c % place.cores_per_tile) * percore for c in used}
    limit_of = {c: base_of[c] + percore for c in used}

    # production level of every value; kernel inputs exist before level 0
    prod_level = {}
    for n in nodes:
        if n.kind in ("mvm", "mtvm"):
            prod_level[n.id] = sched.level[n.id]
        elif n.kind == "vec":
            prod_level[n.id] = sched.vec_level[n.id]
        elif n.kind in ("input", "label"):
            prod_level[n.id] = -1

    # last read level of each value per consuming core
    reads = {}
    for m in nodes:
        if m.kind in ("input", "label", "barrier"):
            continue
        use = sched.level[m.id] if m.is_matrix else sched.vec_level[m.id]
        for p in m.preds:
            if nodes[p].kind == "barrier":
                continue
            per = reads.setdefault(p, {})
            per[m.core] = max(per.get(m.core, -1), use)

    # -- static kernel I/O slots ---------------------------------------------
    static_ptr = dict(base_of)
    static_home = {}

    def salloc(core, nid, length, what):
        addr = static_ptr[core]
        if addr + length > limit_of[core]:
            raise SpillOverflowError(
                "core %d cannot stage %s (%d words over)"
                % (core, what, addr + length - limit_of[core]))
        static_ptr[core] = addr + length
        static_home[(nid, core)] = addr
        return addr

    staging = {"inputs": {}, "labels": {}, "logits": {}}
    for key in sorted(graph.inputs):
        nid = graph.inputs[key]
        slots = [(c, salloc(c, nid, nodes[nid].length, "input %s" % (key,)),
                  nodes[nid].length) for c in sorted(reads.get(nid, {}))]
        staging["inputs"][key] = slots
    for b in sorted(graph.labels):
        nid = graph.labels[b]
        slots = [(c, salloc(c, nid, nodes[nid].length, "label %d" % b),
                  nodes[nid].length) for c in sorted(reads.get(nid, {}))]
        staging["labels"][b] = slots
    for b in sorted(graph.logits):
        nid = graph.logits[b]
        core = nodes[nid].core
        addr = salloc(core, nid, nodes[nid].length, "logits %d" % b)
        staging["logits"][b] = (core, addr, nodes[nid].length)

    arenas = {c: _Arena(c, static_ptr[c], limit_of[c]) for c in used}

    # -- transfer plan and value lifetimes -------------------------------------
    inbound = {}    # (core, level) -> [nid], producers one level down
    outbound = {}   # (core, level) -> [(dst core, nid)]
    allocs = {}     # (core, level) -> [(nid, length)]
    frees = {}      # (core, level) -> [(nid, length)]
    for nid, per_core in sorted(reads.items()):
        n = nodes[nid]
        if n.kind in ("input", "label"):
            continue  # the driver fills every consumer's staging slot
        pc, pl = n.core, prod_level[nid]
        for rc in sorted(per_core):
            if rc == pc:
                continue
            outbound.setdefault((pc, pl), []).append((rc, nid))
            inbound.setdefault((rc, pl + 1), []).append(nid)
            allocs.setdefault((rc, pl + 1), []).append((nid, n.length))
            frees.setdefault((rc, per_core[rc]), []).append((nid, n.length))
    for n in nodes:
        if n.kind not in ("mvm", "mtvm", "vec"):
            continue
        if (n.id, n.core) in static_home:
            continue  # logits live in the staging region
        pl = prod_level[n.id]
        allocs.setdefault((n.core, pl), []).append((n.id, n.length))
        last = max(reads.get(n.id, {}).get(n.core, -1), pl)
        frees.setdefault((n.core, last), []).append((n.id, n.length))

    # -- emission ---------------------------------------------------------------
    instrs = {c: [] for c in used}
    lv_tag = {c: [] for c in used}
    ly_tag = {c: [] for c in used}

    def emit(core, ins, lv, layer):
        instrs[core].append(ins)
        lv_tag[core].append(lv)
        ly_tag[core].append(layer)

    if crs_prologue:
        for c in used:
            emit(c, Instruction("crs"), -1, 0)

    groups = sched.groups()
    vec_at = {}
    for n in nodes:
        if n.kind == "vec":
            vec_at.setdefault((n.core, sched.vec_level[n.id]), []).append(n.id)

    dyn_home = {}

    def home(nid, core):
        slot = static_home.get((nid, core))
        return dyn_home[(nid, core)] if slot is None else slot

    for lv in range(sched.max_level + 1):
        for core in used:
            for nid, length in sorted(allocs.get((core, lv), [])):
                dyn_home[(nid, core)] = arenas[core].alloc(length, lv)

        for core in used:
            tile = place.tile_of_core(core)

            arriving = sorted(inbound.get((core, lv), []),
                              key=lambda nid: (nodes[nid].core, nid))
            for nid in arriving:
                src, length = nodes[nid].core, nodes[nid].length
                emit(core, Instruction(
                    "recv", tile=place.tile_of_core(src),
                    buf=channel_buf(src, core), dst=W_OUT, len=length),
                    lv, nodes[nid].layer)
                emit(core, Instruction("store", addr=home(nid, core),
                                       src=W_OUT, len=length),
                     lv, nodes[nid].layer)

            grp = sorted(groups.get(lv, {}).get(core, []),
                         key=lambda nid: (nodes[nid].shard.mcu,
                                          _KIND_ORDER[nodes[nid].kind], nid))
            staged = {}
            for nid in grp:
                n = nodes[nid]
                for region, pslot in REGION_READS[n.kind]:
                    value = n.preds[pslot]
                    key = (n.shard.mcu, region)
                    if key in staged:
                        if staged[key] != value:
                            raise ValidationError(
                                "level %d core %d stages two values into "
                                "mcu %d %s" % (lv, core, key[0], region))
                        continue
                    staged[key] = value
                    emit(core, Instruction(
                        "load", dst=mcu_region_base(n.shard.mcu, region),
                        addr=home(value, core), len=nodes[value].length),
                        lv, n.layer)
            if grp:
                masks = [0] * MAX_MCUS
                for nid in grp:
                    masks[nodes[nid].shard.mcu] |= _MASK_OF[nodes[nid].kind]
                emit(core, Instruction("mcu", masks=tuple(masks)), lv, 0)
            for nid in grp:
                n = nodes[nid]
                if n.kind == "opa":
                    continue
                emit(core, Instruction(
                    "store", addr=home(nid, core),
                    src=mcu_region_base(n.shard.mcu, _OUT_REGION[n.kind]),
                    len=n.length), lv, n.layer)

            for nid in sorted(vec_at.get((core, lv), [])):
                n = nodes[nid]
                a = n.preds[0]
                second = n.preds[1] if len(n.preds) > 1 else None
                if n.subop == "loss_grad" and n.length > ALU_CHUNK:
                    raise CapacityError(
                        "an output head of %d classes exceeds the %d-entry "
                        "register window the softmax gradient needs whole"
                        % (n.length, ALU_CHUNK))
                dst = home(nid, core)
                for off in range(0, n.length, ALU_CHUNK):
                    c = min(ALU_CHUNK, n.length - off)
                    emit(core, Instruction("load", dst=W_A,
                                           addr=home(a, core) + off, len=c),
                         lv, n.layer)
                    if second is not None:
                        emit(core, Instruction(
                            "load", dst=W_B, addr=home(second, core) + off,
                            len=c), lv, n.layer)
                    emit(core, Instruction(
                        "alu", subop=n.subop, dst=W_OUT, src1=W_A,
                        src2=W_B if second is not None else W_A, len=c),
                        lv, n.layer)
                    emit(core, Instruction("store", addr=dst + off,
                                           src=W_OUT, len=c), lv, n.layer)

            for dst_core, nid in sorted(outbound.get((core, lv), [])):
                length = nodes[nid].length
                emit(core, Instruction("load", dst=W_OUT,
                                       addr=home(nid, core), len=length),
                     lv, nodes[nid].layer)
                emit(core, Instruction(
                    "send", tile=place.tile_of_core(dst_core),
                    buf=channel_buf(core, dst_core), src=W_OUT, len=length),
                    lv, nodes[nid].layer)

        for core in used:
            for nid, length in sorted(frees.get((core, lv), [])):
                arenas[core].release(dyn_home.pop((nid, core)), length)

    for core in used:
        emit(core, Instruction("halt"), sched.max_level, 0)

    programs = {
        c: Program(instrs[c], meta={"core": c, "level_of": lv_tag[c],
                                    "layer_of": ly_tag[c]})
        for c in used
    }
    meta = {
        "variant": graph.variant,
        "batch": graph.batch,
        "forward_only": graph.forward_only,
        "lr_shift": int(lr_shift),
        "crs_prologue": crs_prologue,
        "fused": sched.fused,
        "levels": sched.max_level + 1,
        "mcu_timesteps": sched.mcu_timesteps,
        "mcu_shards": {(sh.core, sh.mcu): sh.index for sh in pm.shards},
        "core_mem": {c: {"base": base_of[c], "limit": limit_of[c],
                         "static_words": static_ptr[c] - base_of[c],
                         "value_words": arenas[c].high} for c in used},
        "staging_words": sum(static_ptr[c] - base_of[c] for c in used),
        "value_words": sum(a.high for a in arenas.values()),
    }
    return CompiledKernel(graph, sched, programs, staging, meta).validate()
