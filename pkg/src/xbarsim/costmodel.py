"""Energy and latency constants for the machine model.

All energies are integer picojoules so reports add up exactly. Matrix-op
constants are per 128x128 operation and scale with the actual shard area;
crossbar ops additionally scale with the slice config's total stored bits
(more physical slices mean more crossbars and converters per logical op),
normalized so the default 39-bit layout charges the table constant exactly.

Cell write energy is set an order of magnitude above read energy, which makes
a full-matrix serial rewrite cost roughly 10x a matrix-vector op and is what
separates the in-crossbar update path from the read-modify-write baselines.
"""

import json
import math

from .errors import ValidationError

REFERENCE_CELLS = 128 * 128

# per 128x128 matrix op, picojoules
ENERGY_FIELDS = {
    "reram_mvm_pj": 35100,
    "reram_mtvm_pj": 35100,
    "reram_opa_pj": 11370,
    "cmos_mvm_pj": 365040,   # 10.4x the crossbar op
    "cmos_opa_pj": 37280,
    # per logical cell
    "serial_read_pj": 15,
    "serial_write_pj": 135,
    # per element / word / flit
    "vfu_pj_per_element": 2,
    "mem_pj_per_word": 1,
    "link_pj_per_flit": 4,
    "halt_pj": 0,
}

LATENCY_FIELDS = {
    "mvm_cycle_latency": 8,     # per streaming cycle, crossbar + ADC
    "opa_cycle_latency": 1,     # per streaming cycle, no ADC in the loop
    "cmos_mvm_cycles": 1139,    # 8.9x the crossbar op
    "cmos_opa_cycles": 142,
    "serial_cell_cycles": 1,
    "vfu_lanes": 16,
    "mem_cycles_per_word": 1,
    "link_hop_cycles": 4,
}

STREAM_CYCLES = 16
RERAM_KINDS = ("reram_mvm", "reram_mtvm", "reram_opa")
CMOS_KINDS = ("cmos_mvm", "cmos_opa")


def _scale_half_up(value, num, den):
    return (value * num + den // 2) // den


class CostModel:
    """Per-primitive constants plus derived op-level energy/latency."""

    def __init__(self, reference_stored_bits=39, dac_beta=0.5e-12,
                 dac_vdd=0.9, dac_fclk=1.0e9, **overrides):
        for name, default in {**ENERGY_FIELDS, **LATENCY_FIELDS}.items():
            value = int(overrides.pop(name, default))
            if value < 0:
                raise ValidationError("%s must be >= 0" % name)
            setattr(self, name, value)
        if overrides:
            raise ValidationError("unknown cost fields: %s" % sorted(overrides))
        if reference_stored_bits < 1:
            raise ValidationError("reference_stored_bits must be >= 1")
        self.reference_stored_bits = int(reference_stored_bits)
        self.dac_beta = float(dac_beta)
        self.dac_vdd = float(dac_vdd)
        self.dac_fclk = float(dac_fclk)

    # -- energy ---------------------------------------------------------------

    def op_energy(self, kind, rows=128, cols=128, cfg=None):
        """Energy of one matrix op on a rows x cols shard, in pJ.

        Crossbar kinds scale with the config's stored bits relative to the
        reference layout; digital kinds depend only on the shard area.
        """
        base = getattr(self, kind + "_pj", None)
        if base is None or kind not in RERAM_KINDS + CMOS_KINDS:
            raise ValidationError("unknown op kind %r" % kind)
        e = _scale_half_up(base, rows * cols, REFERENCE_CELLS)
        if kind in RERAM_KINDS and cfg is not None:
            e = _scale_half_up(e, cfg.total_stored_bits, self.reference_stored_bits)
        return e

    def serial_read_energy(self, cells):
        return cells * self.serial_read_pj

    def serial_write_energy(self, cells):
        return cells * self.serial_write_pj

    def crs_energy(self, rows, cols):
        """One resolution rewrite: read back plus reprogram, per logical cell."""
        cells = rows * cols
        return self.serial_read_energy(cells) + self.serial_write_energy(cells)

    def vfu_energy(self, elements):
        return elements * self.vfu_pj_per_element

    def mem_energy(self, words):
        return words * self.mem_pj_per_word

    def link_energy(self, flits):
        return flits * self.link_pj_per_flit

    def adc_energy_pj(self, bits):
        """Per-conversion energy, non-decreasing in resolution."""
        if bits < 0:
            raise ValidationError("adc bits must be >= 0")
        return (bits << bits) >> 6

    def dac_power_w(self, bits):
        """Driver power at resolution N: beta * (2^N / (N+1)) * V^2 * f_clk."""
        if bits < 0:
            raise ValidationError("dac bits must be >= 0")
        return self.dac_beta * ((2.0 ** bits) / (bits + 1)) \
            * self.dac_vdd ** 2 * self.dac_fclk

    # -- latency (1 GHz cycles) -------------------------------------------------

    def op_cycles(self, kind):
        if kind in ("reram_mvm", "reram_mtvm"):
            return STREAM_CYCLES * self.mvm_cycle_latency
        if kind == "reram_opa":
            return STREAM_CYCLES * self.opa_cycle_latency
        if kind == "cmos_mvm":
            return self.cmos_mvm_cycles
        if kind == "cmos_opa":
            return self.cmos_opa_cycles
        raise ValidationError("unknown op kind %r" % kind)

    def serial_cycles(self, cells):
        return cells * self.serial_cell_cycles

    def crs_cycles(self, rows, cols):
        return 2 * self.serial_cycles(rows * cols)

    def vfu_cycles(self, elements):
        return max(1, math.ceil(elements / self.vfu_lanes))

    def mem_cycles(self, words):
        return max(1, words * self.mem_cycles_per_word)

    def link_cycles(self, hops):
        return max(1, hops * self.link_hop_cycles)

    # -- serialization ------------------------------------------------------------

    def to_json(self):
        doc = {name: getattr(self, name)
               for name in {**ENERGY_FIELDS, **LATENCY_FIELDS}}
        doc["reference_stored_bits"] = self.reference_stored_bits
        doc["dac_beta"] = self.dac_beta
        doc["dac_vdd"] = self.dac_vdd
        doc["dac_fclk"] = self.dac_fclk
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text) if isinstance(text, str) else dict(text)
        except ValueError as exc:
            raise ValidationError("bad cost file: %s" % exc)
        return cls(**doc)

    def __eq__(self, other):
        return isinstance(other, CostModel) and self.to_json() == other.to_json()
