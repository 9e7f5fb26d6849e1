"""Cycle-level execution of compiled kernels with integer energy accounting.

Each core runs its program against a private register file, its tile's
shared memory, and the MCUs that host its weight shards. Cores interact
only through point-to-point FIFO channels, so execution is deterministic
regardless of how the interpreter interleaves them: a receive completes at
the later of its own issue time and the matching message's arrival time.

Weight state lives in a WeightBank so several kernels (training step,
forward evaluation, resolution pass) can run against the same arrays. The
update discipline is fixed by the variant: single-copy and dual-copy MCUs
queue outer products and replay them at halt, the triple-copy MCU applies
them eagerly to its update array and broadcasts the digits at halt. The
cost path is pure accounting on top of that shared functional behavior,
so every baseline trains bit-identically and differs only in the report.
"""

from collections import deque

import numpy as np

from .costmodel import CostModel
from .errors import (DeadlockError, MemoryFault, ValidationError, XbarError)
from .isa import (MASK_MVM, MASK_MTVM, MASK_OPA, REG_SPACE, mcu_region_base)
from .lower import SHARED_MEM_WORDS
from .vecops import apply_alu

COST_PATHS = ("panther", "base_digital", "base_mvm", "base_opa_mvm")
CATEGORIES = ("mvm", "mtvm", "opa", "serial_rw", "crs", "vfu",
              "memory", "network")

_UNARY_ALU = ("relu", "sigmoid")


class WeightBank:
    """Per-shard crossbar copies for one update variant.

    Copy 0 of every shard is the caller's ShardStore matrix, so
    store.reconstruct_layer() always reads committed weights. Reads are
    served by copy 0 (MVM) and the last read copy (MTVM); the variant-3
    update copy runs ahead between halts and is the one whose statistics
    describe update traffic.
    """

    def __init__(self, store, variant):
        if variant not in (1, 2, 3):
            raise ValidationError("variant must be 1, 2 or 3")
        self.store = store
        self.variant = variant
        self.copies = {}
        for index, mat in store.mats.items():
            clones = [mat] + [mat.copy() for _ in range(variant - 1)]
            self.copies[index] = clones

    def mvm_copy(self, index):
        return self.copies[index][0]

    def mtvm_copy(self, index):
        return self.copies[index][0 if self.variant == 1 else 1]

    def update_copies(self, index):
        """Arrays that replay the pending queue at halt (variants 1, 2)."""
        return self.copies[index][:2] if self.variant == 2 \
            else self.copies[index][:1]

    def eager_copy(self, index):
        return self.copies[index][2]

    def stats_copy(self, index):
        return self.copies[index][2 if self.variant == 3 else 0]

    def commit(self, index):
        """Variant 3 halt: broadcast the update copy's digits to the read
        copies. Raw digit state moves, carry content included, so a later
        replayed queue could not produce different clamping."""
        src = self.copies[index][2]
        for cp in self.copies[index][:2]:
            cp.digits = src.digits.copy()

    def cells(self, index):
        mat = self.copies[index][0]
        return mat.rows * mat.cols


class _CoreState:
    __slots__ = ("pc", "cycle", "regs", "halted", "executed")

    def __init__(self):
        self.pc = 0
        self.cycle = 0
        self.regs = np.zeros(REG_SPACE, dtype=np.int64)
        self.halted = False
        self.executed = 0


class RunReport:
    """Energy, timing and memory figures for one kernel run."""

    def __init__(self, energy, cycles, executed, peak_pending_words,
                 meta, logits, cost_path):
        self.energy = energy
        self.cycles = cycles
        self.executed = executed
        self.peak_pending_words = peak_pending_words
        self.staging_words = meta["staging_words"]
        self.value_words = meta["value_words"]
        self.update_words = meta["value_words"] + peak_pending_words
        self.mcu_timesteps = meta["mcu_timesteps"]
        self.levels = meta["levels"]
        self.variant = meta["variant"]
        self.batch = meta["batch"]
        self.logits = logits
        self.cost_path = cost_path

    @property
    def total_energy(self):
        return sum(sum(cats.values()) for cats in self.energy.values())

    def by_category(self):
        out = {c: 0 for c in CATEGORIES}
        for cats in self.energy.values():
            for c, v in cats.items():
                out[c] += v
        return out

    def by_layer(self):
        return {layer: sum(cats.values())
                for layer, cats in sorted(self.energy.items())}

    def to_dict(self):
        return {
            "cost_path": self.cost_path,
            "variant": self.variant,
            "batch": self.batch,
            "total_energy_pj": self.total_energy,
            "energy_pj": {str(l): dict(sorted(c.items()))
                          for l, c in sorted(self.energy.items())},
            "by_category_pj": self.by_category(),
            "cycles": self.cycles,
            "instructions": self.executed,
            "mcu_timesteps": self.mcu_timesteps,
            "levels": self.levels,
            "staging_words": self.staging_words,
            "value_words": self.value_words,
            "peak_pending_words": self.peak_pending_words,
            "update_words": self.update_words,
        }


class Machine:
    """Executes one compiled kernel against a weight bank."""

    def __init__(self, kernel, bank, cost=None, cost_path="panther",
                 adc_bits=None, max_instructions=10_000_000):
        if cost_path not in COST_PATHS:
            raise ValidationError("cost_path must be one of %s"
                                  % (COST_PATHS,))
        self.kernel = kernel
        self.pm = kernel.pm
        self.bank = bank
        self.cost = cost or CostModel()
        self.cost_path = cost_path
        self.adc_bits = adc_bits
        self.max_instructions = max_instructions
        self.variant = kernel.meta["variant"]
        if bank.variant != self.variant:
            raise ValidationError("bank variant %d != kernel variant %d"
                                  % (bank.variant, self.variant))
        self.lr_shift = kernel.meta["lr_shift"]
        self.mcus_per_core = self.pm.placement.mcus_per_core
        self.mcu_shard = kernel.meta["mcu_shards"]
        tiles = {self.pm.placement.tile_of_core(c) for c in kernel.programs}
        self.mem = {t: np.zeros(SHARED_MEM_WORDS, dtype=np.int64)
                    for t in tiles}
        self._reram = cost_path in ("panther", "base_mvm", "base_opa_mvm")
        self.energy = {}
        self.pending = {}
        self.pending_words = 0
        self.peak_pending_words = 0

    # -- driver-facing I/O -----------------------------------------------------

    def write_staging(self, inputs, labels=None):
        """Place kernel inputs into every consumer core's staging slot."""
        mat0 = self.pm.matrices[0]
        model = self.pm.model
        for b in range(self.kernel.meta["batch"]):
            x = np.asarray(inputs[b], dtype=np.int64)
            if x.shape != (model.input_len,):
                raise ValidationError("input %d has wrong shape" % b)
            off = 0
            for seg, sz in enumerate(mat0.row_sizes):
                for core, addr, length in \
                        self.kernel.staging["inputs"].get((b, seg), ()):
                    self._mem_of(core)[addr:addr + length] = x[off:off + sz]
                    self._charge(0, "memory", self.cost.mem_energy(length))
                off += sz
        for b, slots in self.kernel.staging["labels"].items():
            if labels is None:
                raise ValidationError("kernel expects labels")
            y = np.asarray(labels[b], dtype=np.int64)
            for core, addr, length in slots:
                if y.shape != (length,):
                    raise ValidationError("label %d has wrong shape" % b)
                self._mem_of(core)[addr:addr + length] = y
                self._charge(0, "memory", self.cost.mem_energy(length))

    def read_logits(self):
        out = {}
        for b, (core, addr, length) in self.kernel.staging["logits"].items():
            out[b] = self._mem_of(core)[addr:addr + length].copy()
        return out

    def _mem_of(self, core):
        return self.mem[self.pm.placement.tile_of_core(core)]

    # -- execution ----------------------------------------------------------------

    def run(self, inputs=None, labels=None):
        self.energy = {}
        self.pending = {}
        self.pending_words = 0
        self.peak_pending_words = 0
        self.dirty = set()
        self.channels = {}
        self.states = {c: _CoreState() for c in self.kernel.programs}
        if inputs is not None:
            self.write_staging(inputs, labels)

        cores = self.kernel.cores
        budget = self.max_instructions
        while True:
            progressed = False
            done = True
            for core in cores:
                st = self.states[core]
                if st.halted:
                    continue
                done = False
                prog = self.kernel.programs[core].instructions
                while not st.halted:
                    if st.executed >= budget:
                        raise XbarError("core %d exceeded the instruction "
                                        "budget" % core)
                    if not self._step(core, st, prog[st.pc]):
                        break
                    progressed = True
            if done:
                break
            if not progressed:
                blocked = [c for c in cores if not self.states[c].halted]
                raise DeadlockError("cores %s blocked on empty channels"
                                    % blocked)

        executed = sum(st.executed for st in self.states.values())
        cycles = max((st.cycle for st in self.states.values()), default=0)
        return RunReport(self.energy, cycles, executed,
                         self.peak_pending_words, self.kernel.meta,
                         self.read_logits(), self.cost_path)

    def _charge(self, layer, category, pj):
        cats = self.energy.setdefault(layer, {})
        cats[category] = cats.get(category, 0) + int(pj)

    def _check_span(self, base, length, space, what):
        if base < 0 or base + length > space:
            raise MemoryFault("%s span [%d, %d) out of range"
                              % (what, base, base + length))

    def _step(self, core, st, ins):
        """Execute one instruction; False when blocked on an empty channel."""
        op = ins.op
        regs = st.regs
        cost = self.cost
        if op == "recv":
            my_tile = self.pm.placement.tile_of_core(core)
            key = (ins.tile, my_tile, ins.buf)
            queue = self.channels.get(key)
            if not queue:
                return False
            ready, data = queue.popleft()
            if len(data) != ins.len:
                raise ValidationError("channel %s delivered %d words to a "
                                      "recv of %d" % (key, len(data), ins.len))
            self._check_span(ins.dst, ins.len, REG_SPACE, "register")
            st.cycle = max(st.cycle, ready) + cost.mem_cycles(ins.len)
            regs[ins.dst:ins.dst + ins.len] = data
        elif op == "send":
            my_tile = self.pm.placement.tile_of_core(core)
            self._check_span(ins.src, ins.len, REG_SPACE, "register")
            data = regs[ins.src:ins.src + ins.len].copy()
            st.cycle += cost.mem_cycles(ins.len)
            hops = abs(ins.tile - my_tile)
            ready = st.cycle + cost.link_cycles(hops)
            key = (my_tile, ins.tile, ins.buf)
            self.channels.setdefault(key, deque()).append((ready, data))
            self._charge(self._layer_tag(core, st), "network",
                         cost.link_energy(ins.len))
        elif op == "load":
            mem = self._mem_of(core)
            self._check_span(ins.addr, ins.len, SHARED_MEM_WORDS, "memory")
            self._check_span(ins.dst, ins.len, REG_SPACE, "register")
            regs[ins.dst:ins.dst + ins.len] = mem[ins.addr:ins.addr + ins.len]
            st.cycle += cost.mem_cycles(ins.len)
            self._charge(self._layer_tag(core, st), "memory",
                         cost.mem_energy(ins.len))
        elif op == "store":
            mem = self._mem_of(core)
            self._check_span(ins.addr, ins.len, SHARED_MEM_WORDS, "memory")
            self._check_span(ins.src, ins.len, REG_SPACE, "register")
            mem[ins.addr:ins.addr + ins.len] = regs[ins.src:ins.src + ins.len]
            st.cycle += cost.mem_cycles(ins.len)
            self._charge(self._layer_tag(core, st), "memory",
                         cost.mem_energy(ins.len))
        elif op == "alu":
            self._check_span(ins.src1, ins.len, REG_SPACE, "register")
            self._check_span(ins.dst, ins.len, REG_SPACE, "register")
            a = regs[ins.src1:ins.src1 + ins.len]
            if ins.subop in _UNARY_ALU:
                out = apply_alu(ins.subop, a)
            else:
                self._check_span(ins.src2, ins.len, REG_SPACE, "register")
                out = apply_alu(ins.subop, a, regs[ins.src2:ins.src2 + ins.len])
            regs[ins.dst:ins.dst + ins.len] = out
            st.cycle += cost.vfu_cycles(ins.len)
            self._charge(self._layer_tag(core, st), "vfu",
                         cost.vfu_energy(ins.len))
        elif op == "set":
            regs[ins.dst] = ins.imm
            st.cycle += 1
        elif op == "copy":
            self._check_span(ins.src, ins.len, REG_SPACE, "register")
            self._check_span(ins.dst, ins.len, REG_SPACE, "register")
            regs[ins.dst:ins.dst + ins.len] = regs[ins.src:ins.src + ins.len]
            st.cycle += cost.mem_cycles(ins.len)
            self._charge(self._layer_tag(core, st), "memory",
                         cost.mem_energy(ins.len))
        elif op == "mcu":
            st.cycle += self._exec_mcu(core, st, ins.masks)
        elif op == "crs":
            st.cycle += self._exec_crs(core)
        elif op == "halt":
            st.cycle += self._exec_halt(core)
            st.halted = True
        elif op == "jmp":
            st.cycle += 1
            st.executed += 1
            st.pc = ins.target
            return True
        elif op == "beq":
            st.cycle += 1
            st.executed += 1
            if regs[ins.a] == regs[ins.b]:
                st.pc = ins.target
            else:
                st.pc += 1
            return True
        else:
            raise ValidationError("unknown opcode %r" % op)
        st.executed += 1
        st.pc += 1
        return True

    def _layer_tag(self, core, st):
        tags = self.kernel.programs[core].meta.get("layer_of")
        return tags[st.pc] if tags else 0

    # -- MCU, resolution and commit ------------------------------------------------

    def _exec_mcu(self, core, st, masks):
        cost = self.cost
        latencies = []
        for m in range(self.mcus_per_core):
            mask = masks[m]
            if not mask:
                continue
            index = self.mcu_shard.get((core, m))
            if index is None:
                raise ValidationError("core %d has no shard on mcu %d"
                                      % (core, m))
            shard = self.pm.shards[index]
            rows, cols = shard.rows, shard.cols
            cfg = self.bank.store.cfg
            regs = st.regs
            row_in = regs[mcu_region_base(m, "row_in"):][:rows]
            col_in = regs[mcu_region_base(m, "col_in"):][:cols]
            kind_cycles = []
            if mask & MASK_MVM:
                y = self.bank.mvm_copy(index).mvm(row_in, adc_bits=self.adc_bits)
                regs[mcu_region_base(m, "col_out"):][:cols] = y
                kind = "reram_mvm" if self._reram else "cmos_mvm"
                self._charge(shard.layer, "mvm",
                             cost.op_energy(kind, rows, cols, cfg))
                kind_cycles.append(cost.op_cycles(kind))
            if mask & MASK_MTVM:
                z = self.bank.mtvm_copy(index).mtvm(col_in, adc_bits=self.adc_bits)
                regs[mcu_region_base(m, "row_out"):][:rows] = z
                kind = "reram_mtvm" if self._reram else "cmos_mvm"
                self._charge(shard.layer, "mtvm",
                             cost.op_energy(kind, rows, cols, cfg))
                kind_cycles.append(cost.op_cycles(
                    "reram_mtvm" if self._reram else "cmos_mvm"))
            if mask & MASK_OPA:
                self.dirty.add((core, m))
                if self.variant == 3:
                    self.bank.eager_copy(index).opa(row_in, col_in,
                                                    lr_shift=self.lr_shift)
                else:
                    entry = (row_in.copy(), col_in.copy())
                    self.pending.setdefault((core, m), []).append(entry)
                    self.pending_words += rows + cols
                    self.peak_pending_words = max(self.peak_pending_words,
                                                  self.pending_words)
                if self.cost_path == "panther":
                    if self.variant == 3:
                        self._charge(shard.layer, "opa",
                                     cost.op_energy("reram_opa", rows, cols, cfg))
                        kind_cycles.append(cost.op_cycles("reram_opa"))
                    else:
                        self._charge(shard.layer, "memory",
                                     cost.mem_energy(rows + cols))
                        kind_cycles.append(cost.mem_cycles(rows + cols))
                else:
                    self._charge(shard.layer, "opa",
                                 cost.op_energy("cmos_opa", rows, cols, cfg))
                    kind_cycles.append(cost.op_cycles("cmos_opa"))
            if kind_cycles:
                latencies.append(sum(kind_cycles) if self.variant == 1
                                 else max(kind_cycles))
        return max(latencies) if latencies else 1

    def _exec_crs(self, core):
        cost = self.cost
        latencies = [1]
        for m in range(self.mcus_per_core):
            index = self.mcu_shard.get((core, m))
            if index is None:
                continue
            shard = self.pm.shards[index]
            for cp in self.bank.copies[index]:
                cp.crs()
            if self._reram:
                self._charge(shard.layer, "crs",
                             cost.crs_energy(shard.rows, shard.cols)
                             * len(self.bank.copies[index]))
                latencies.append(cost.crs_cycles(shard.rows, shard.cols))
        return max(latencies)

    def _exec_halt(self, core):
        """Commit pending weight updates according to variant and path."""
        cost = self.cost
        latencies = [1]
        serial_cycles = 0
        for m in range(self.mcus_per_core):
            index = self.mcu_shard.get((core, m))
            if index is None:
                continue
            shard = self.pm.shards[index]
            cells = shard.rows * shard.cols
            cfg = self.bank.store.cfg
            queue = self.pending.pop((core, m), [])
            for x, d in queue:
                for cp in self.bank.update_copies(index):
                    cp.opa(x, d, lr_shift=self.lr_shift)
                self.pending_words -= shard.rows + shard.cols
            if self.variant == 3 and (core, m) in self.dirty:
                self.bank.commit(index)
            if self.cost_path == "panther":
                if self.variant == 3:
                    if (core, m) in self.dirty:
                        self._charge(shard.layer, "serial_rw",
                                     cost.serial_read_energy(cells)
                                     + 2 * cost.serial_write_energy(cells))
                        latencies.append(2 * cost.serial_cycles(cells))
                elif queue:
                    ncopies = 2 if self.variant == 2 else 1
                    self._charge(shard.layer, "opa",
                                 ncopies * len(queue)
                                 * cost.op_energy("reram_opa", shard.rows,
                                                  shard.cols, cfg))
                    latencies.append(len(queue) * cost.op_cycles("reram_opa"))
            elif self.cost_path in ("base_mvm", "base_opa_mvm"):
                if (core, m) in self.dirty:
                    self._charge(shard.layer, "serial_rw",
                                 cost.serial_read_energy(cells)
                                 + cost.serial_write_energy(cells))
                    serial_cycles += 2 * cost.serial_cycles(cells)
        self._charge(0, "memory", cost.halt_pj)
        return max(latencies) + serial_cycles
