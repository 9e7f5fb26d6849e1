"""Bit-sliced matrix storage with in-place outer-product updates.

A 32-bit weight matrix is stored across a stack of crossbar slices. Slice s
covers a field of `nominal` weight bits and is provisioned with `carry` extra
stored bits, so a cell of that slice holds nominal+carry bits. Cells are
biased unsigned: the stored level is digit + zero_point where zero_point is
the midpoint 2^(width-1). This module keeps the signed digits directly; the
stored level is derived where needed.

The canonical encoding decomposes a signed weight into balanced signed digits,
one per slice, with digit in [-2^(nominal-1), 2^(nominal-1)-1]:

    W == sum_s digit_s * 2^lsb_s

Updates (opa) accumulate into the digits without propagating carries between
slices; the carry bits absorb the overflow until a carry resolution step (crs)
reads the matrix back and rewrites it in canonical form. Saturation happens
per slice: an accumulation clamps at the stored min/max and the event is
counted, which is the only way information is ever lost between resolutions.

Three matrix operations are supported:

  mvm    y = W @ x      (inputs on rows, bit-serial over 16/m cycles)
  mtvm   y = W.T @ d    (inputs on columns, same scheme)
  opa    W += x (x) d   (rows and columns driven simultaneously)

Matrix orientation follows the crossbar: rows index the input dimension,
columns index the output dimension.
"""

import json
import math

import numpy as np

from .errors import DimensionError, RangeError, ValidationError
from .fixedpoint import Q8_8, rhe_shift, requantize

MAX_DIM = 128
INPUT_BITS = 16


class SliceConfig:
    """Slicing layout for one weight matrix.

    slices is an (nominal, carry) list ordered MSB to LSB. p is the column
    DAC resolution in bits and must cover the widest nominal field. m is the
    number of row input bits streamed per cycle; a full 16-bit operand takes
    16/m cycles.
    """

    def __init__(self, slices, p=4, m=1, weight_bits=32):
        slices = [(int(n), int(c)) for (n, c) in slices]
        if not slices:
            raise ValidationError("need at least one slice")
        for n, c in slices:
            if n < 1:
                raise ValidationError("nominal bits must be >= 1")
            if c < 0:
                raise ValidationError("carry bits must be >= 0")
        if sum(n for n, _ in slices) != weight_bits:
            raise ValidationError(
                "nominal bits sum to %d, expected weight_bits=%d"
                % (sum(n for n, _ in slices), weight_bits))
        if p < max(n for n, _ in slices):
            raise ValidationError("p=%d below widest nominal field" % p)
        if m not in (1, 2, 4) or INPUT_BITS % m:
            raise ValidationError("m must be 1, 2 or 4")

        self.slices = tuple(slices)
        self.p = p
        self.m = m
        self.weight_bits = weight_bits

        self.nominal = np.array([n for n, _ in slices], dtype=np.int64)
        self.carry = np.array([c for _, c in slices], dtype=np.int64)
        self.width = self.nominal + self.carry
        # lsb_s = bit position of slice s's field, counted from the LSB end
        lsb = np.zeros(len(slices), dtype=np.int64)
        acc = 0
        for s in range(len(slices) - 1, -1, -1):
            lsb[s] = acc
            acc += slices[s][0]
        self.lsb = lsb
        self.zero_point = np.int64(1) << (self.width - 1)
        self.digit_min = -(np.int64(1) << (self.width - 1))
        self.digit_max = (np.int64(1) << (self.width - 1)) - 1
        self.canon_min = -(np.int64(1) << (self.nominal - 1))
        self.canon_max = (np.int64(1) << (self.nominal - 1)) - 1

        wmin = -(1 << (weight_bits - 1))
        wmax = (1 << (weight_bits - 1)) - 1
        self.rep_min = max(wmin, int(np.sum(self.canon_min << self.lsb)))
        self.rep_max = min(wmax, int(np.sum(self.canon_max << self.lsb)))

    @property
    def num_slices(self):
        return len(self.slices)

    @property
    def total_stored_bits(self):
        """Stored bits per weight across all slices (nominal + carry)."""
        return int(self.width.sum())

    @property
    def cycles(self):
        return INPUT_BITS // self.m

    def lossless_adc_bits(self, rows, include_carry=False):
        """ADC resolution that makes bit-serial readout exact.

        ceil(log2(rows)) plus the widest nominal field covers any column sum
        of canonical digits. Matrices carrying unresolved update overflow
        need include_carry=True, which sizes for the full stored width.
        """
        bits = self.width if include_carry else self.nominal
        return math.ceil(math.log2(max(rows, 2))) + int(bits.max())

    def to_json(self):
        return json.dumps({
            "slices": [{"nominal": int(n), "carry": int(c)} for n, c in self.slices],
            "p": self.p, "m": self.m, "weight_bits": self.weight_bits})

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text) if isinstance(text, str) else dict(text)
            slices = [(s["nominal"], s.get("carry", 0)) for s in doc["slices"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError("bad slice config: %s" % exc)
        return cls(slices, p=doc.get("p", 4), m=doc.get("m", 1),
                   weight_bits=doc.get("weight_bits", 32))

    @classmethod
    def preset(cls, name):
        """Named layouts: '44466555', 'fig3f62' (alias '16x2'), 'uniform:N'."""
        name = name.strip().lower()
        if name == "44466555":
            # stored widths 4,4,4,6,6,5,5,5 MSB->LSB: uniform 4-bit fields,
            # carry concentrated where update traffic lands
            carries = [0, 0, 0, 2, 2, 1, 1, 1]
            return cls([(4, c) for c in carries], p=4)
        if name in ("fig3f62", "16x2"):
            spec = _provisioned_uniform(2)
            cfg = cls(spec, p=2)
            assert cfg.total_stored_bits == 62
            return cfg
        if name.startswith("uniform:"):
            try:
                bits = int(name.split(":", 1)[1])
            except ValueError:
                raise ValidationError("bad uniform preset %r" % name)
            if not 2 <= bits <= 6:
                raise ValidationError("uniform slice width must be 2..6")
            return cls(_provisioned_uniform(bits), p=bits)
        raise ValidationError("unknown slice preset %r" % name)

    def __eq__(self, other):
        return (isinstance(other, SliceConfig)
                and self.slices == other.slices and self.p == other.p
                and self.m == other.m and self.weight_bits == other.weight_bits)

    def __repr__(self):
        return "SliceConfig(%s, p=%d, m=%d)" % (
            "/".join("%d+%d" % s for s in self.slices), self.p, self.m)


def _provisioned_uniform(bits, weight_bits=32):
    """Uniform nominal fields plus per-slice carry sized to OPA traffic.

    The MSB slice takes the remainder when bits does not divide weight_bits.
    Carry per slice is ceil(log2(partial products received per update)),
    clamped to [1, 2]: central fields see chunks from almost every streaming
    cycle, the edges from only a few.
    """
    fields = []
    remaining = weight_bits
    while remaining > 0:
        fields.append(min(bits, remaining))
        remaining -= min(bits, remaining)
    fields.reverse()  # MSB first, remainder slice at the top
    # field k (LSB-first) spans bit positions [lo, lo+width)
    spans = []
    lo = 0
    for w in reversed(fields):
        spans.append((lo, lo + w))
        lo += w
    spans.reverse()  # back to MSB-first to match fields
    out = []
    for (field, (lo, hi)) in zip(fields, spans):
        hits = 0
        for n in range(INPUT_BITS):
            # column operand shifted left by n occupies bits [n, n+16)
            if lo < n + INPUT_BITS and hi > n:
                hits += 1
        carry = min(2, max(1, math.ceil(math.log2(max(hits, 2)))))
        out.append((field, carry))
    return out


def _check_vector(v, length, what):
    v = np.asarray(v)
    if v.shape != (length,):
        raise DimensionError("%s must have shape (%d,), got %s" % (what, length, v.shape))
    if not np.issubdtype(v.dtype, np.integer):
        raise ValidationError("%s must be integer raw values" % what)
    v = v.astype(np.int64)
    if v.size and (v.min() < -(1 << 15) or v.max() > (1 << 15) - 1):
        raise RangeError("%s outside 16-bit range" % what)
    return v


class SliceStats:
    """Mutable per-matrix counters. Slice arrays are MSB->LSB like the config."""

    def __init__(self, num_slices):
        self.saturation_events = np.zeros(num_slices, dtype=np.int64)
        self.opa_count = 0
        self.crs_count = 0
        self.crs_clamp_events = 0

    def copy(self):
        out = SliceStats(len(self.saturation_events))
        out.saturation_events = self.saturation_events.copy()
        out.opa_count = self.opa_count
        out.crs_count = self.crs_count
        out.crs_clamp_events = self.crs_clamp_events
        return out

    @property
    def total_saturation_events(self):
        return int(self.saturation_events.sum())


class OpaOutcome:
    def __init__(self, cycles, events):
        self.cycles = cycles
        self.events = events  # per slice, MSB->LSB

    @property
    def saturated(self):
        return bool(self.events.sum())


class CrsOutcome:
    def __init__(self, clamped_cells):
        self.clamped_cells = clamped_cells


class SlicedMatrix:
    """One crossbar-resident matrix shard, at most 128 x 128."""

    def __init__(self, cfg, rows, cols, digits=None, stats=None):
        if not (1 <= rows <= MAX_DIM and 1 <= cols <= MAX_DIM):
            raise DimensionError("shard dims must be in 1..%d, got %dx%d"
                                 % (MAX_DIM, rows, cols))
        self.cfg = cfg
        self.rows = rows
        self.cols = cols
        if digits is None:
            digits = np.zeros((cfg.num_slices, rows, cols), dtype=np.int64)
        self.digits = digits
        self.stats = stats if stats is not None else SliceStats(cfg.num_slices)
        self.sat_mask = np.zeros((cfg.num_slices, rows, cols), dtype=bool)

    # -- construction and readout ------------------------------------------

    @classmethod
    def from_weights(cls, weights, cfg):
        """Slice a raw integer weight matrix into canonical digits."""
        w = np.asarray(weights)
        if w.ndim != 2:
            raise DimensionError("weights must be 2-D")
        if not np.issubdtype(w.dtype, np.integer):
            raise ValidationError("weights must be raw integers")
        w = w.astype(np.int64)
        if w.size and (w.min() < cfg.rep_min or w.max() > cfg.rep_max):
            raise RangeError("weight outside representable range [%d, %d]"
                             % (cfg.rep_min, cfg.rep_max))
        mat = cls(cfg, w.shape[0], w.shape[1])
        mat.digits = _decompose(w, cfg)
        return mat

    def reconstruct(self):
        """Logical weight values: sum of digit * 2^lsb, saturated to 32 bits."""
        acc = np.zeros((self.rows, self.cols), dtype=np.int64)
        for s in range(self.cfg.num_slices):
            acc += self.digits[s] << self.cfg.lsb[s]
        lo = -(1 << (self.cfg.weight_bits - 1))
        hi = (1 << (self.cfg.weight_bits - 1)) - 1
        return np.clip(acc, lo, hi)

    def stored_levels(self):
        """Unsigned cell levels (digit + zero_point), for inspection."""
        return self.digits + self.cfg.zero_point[:, None, None]

    def copy(self):
        out = SlicedMatrix(self.cfg, self.rows, self.cols,
                           self.digits.copy(), self.stats.copy())
        out.sat_mask = self.sat_mask.copy()
        return out

    def saturated_fraction(self, lsb_first=False):
        """Fraction of cells pinned at a stored bound, per slice."""
        lo = self.cfg.digit_min[:, None, None]
        hi = self.cfg.digit_max[:, None, None]
        frac = np.mean((self.digits == lo) | (self.digits == hi), axis=(1, 2))
        return frac[::-1] if lsb_first else frac

    def saturated_cell_fraction(self, lsb_first=False):
        """Fraction of cells that clamped during an update since the last
        resolution, per slice.

        Counts update (OPA) clamps only; resolution clamps are tracked
        separately in stats.crs_clamp_events. crs() starts a fresh epoch.
        """
        frac = self.sat_mask.mean(axis=(1, 2))
        return frac[::-1] if lsb_first else frac

    # -- outer-product accumulate ------------------------------------------

    def opa(self, x, d, lr_shift=0):
        """Accumulate x (outer) d into the stored digits.

        x drives the rows one bit plane per cycle (sign-magnitude); d is
        right-shifted by lr_shift, left-shifted by the cycle index, and its
        per-slice nominal fields drive the columns. Each cycle's partial
        product lands directly on the slice digits, clamping at the stored
        bounds. Within one call every cell's contributions share a sign, so
        the final value equals clamp(old + x_i * (d_j >> lr_shift)) whether
        or not intermediate cycles clamped; the slow path exists to count
        clamp events cycle by cycle.
        """
        x = _check_vector(x, self.rows, "row operand")
        d = _check_vector(d, self.cols, "column operand")
        if not 0 <= lr_shift < 32:
            raise ValidationError("lr_shift must be in 0..31")
        cfg = self.cfg
        cycles = cfg.cycles
        m = cfg.m

        sx = np.where(x < 0, -1, 1).astype(np.int64)
        sd = np.where(d < 0, -1, 1).astype(np.int64)
        mx = np.abs(x)
        md = np.abs(d) >> lr_shift

        # row digit per cycle: m magnitude bits, LSB cycle first
        shift_n = (np.arange(cycles, dtype=np.int64) * m)
        rowmat = (mx[:, None] >> shift_n[None, :]) & ((1 << m) - 1)  # (rows, cycles)

        # column chunk per cycle and slice: nominal field of (md << n*m)
        S = cfg.num_slices
        shifted = md[None, :, None] << shift_n[:, None, None]  # (cycles, cols, 1)
        chunks = (shifted >> cfg.lsb[None, None, :]) & ((np.int64(1) << cfg.nominal) - 1)[None, None, :]
        # (cycles, cols, S) -> (cycles, S, cols)
        chunks = chunks.transpose(0, 2, 1)

        sign = sx[:, None] * sd[None, :]
        events = np.zeros(S, dtype=np.int64)

        # fast path: total per-cell delta, valid when nothing clamps
        totals = rowmat.astype(np.float64) @ chunks.reshape(cycles, S * self.cols).astype(np.float64)
        totals = np.rint(totals).astype(np.int64).reshape(self.rows, S, self.cols)
        totals = totals.transpose(1, 0, 2) * sign[None, :, :]
        new = self.digits + totals
        lo = cfg.digit_min[:, None, None]
        hi = cfg.digit_max[:, None, None]
        if np.all((new >= lo) & (new <= hi)):
            self.digits = new
        else:
            for n in range(cycles):
                active = rowmat[:, n]
                if not active.any():
                    continue
                part = active[:, None] * sign  # (rows, cols) row digit with sign
                for s in range(S):
                    ch = chunks[n, s]
                    if not ch.any():
                        continue
                    unc = self.digits[s] + part * ch[None, :]
                    cl = np.clip(unc, lo[s], hi[s])
                    hit = cl != unc
                    events[s] += int(np.count_nonzero(hit))
                    self.sat_mask[s] |= hit
                    self.digits[s] = cl

        self.stats.saturation_events += events
        self.stats.opa_count += 1
        return OpaOutcome(cycles, events)

    # -- bit-serial readout --------------------------------------------------

    def mvm(self, x, adc_bits=None, out_shift=16, out_fmt=Q8_8):
        """y = W @ x with inputs streamed on the rows.

        Per cycle and slice the integer column sum passes through an ideal
        ADC (round-half-even to the step, clamped to the code range), then
        shift-and-add folds cycles and slices together. The accumulated
        product of Q16.16 weights with Q8.8 inputs is requantized by
        out_shift into out_fmt. At lossless adc_bits on canonical digits the
        result equals the exact integer product, requantized.
        """
        x = _check_vector(x, self.rows, "input")
        mats = self.digits.reshape(self.cfg.num_slices, self.rows, self.cols)
        acc = _bitserial(mats, x, self.cfg, adc_bits)
        return requantize(acc, out_shift, out_fmt)

    def mtvm(self, d, adc_bits=None, out_shift=16, out_fmt=Q8_8):
        """y = W.T @ d with inputs streamed on the columns."""
        d = _check_vector(d, self.cols, "input")
        mats = self.digits.transpose(0, 2, 1)
        acc = _bitserial(mats, d, self.cfg, adc_bits)
        return requantize(acc, out_shift, out_fmt)

    # -- carry resolution ------------------------------------------------------

    def crs(self):
        """Carry resolution step: read back and rewrite in canonical form.

        The reconstructed value is preserved exactly whenever it lies in the
        config's representable range; values pushed past the canonical bound
        by carry content alone are clamped and counted separately from
        saturation. After the call every digit is back inside its nominal
        field and the carry bits are free again.
        """
        raw = np.zeros((self.rows, self.cols), dtype=np.int64)
        for s in range(self.cfg.num_slices):
            raw += self.digits[s] << self.cfg.lsb[s]
        clamped = np.clip(raw, self.cfg.rep_min, self.cfg.rep_max)
        n_clamped = int(np.count_nonzero(clamped != raw))
        self.digits = _decompose(clamped, self.cfg)
        self.stats.crs_count += 1
        self.stats.crs_clamp_events += n_clamped
        # resolution restores headroom, so the per-cell saturation marks
        # start a fresh accumulation epoch (event totals in stats persist)
        self.sat_mask[:] = False
        return CrsOutcome(n_clamped)

    def carry_clear(self):
        """True when every digit fits its nominal field (canonical form)."""
        lo = self.cfg.canon_min[:, None, None]
        hi = self.cfg.canon_max[:, None, None]
        return bool(np.all((self.digits >= lo) & (self.digits <= hi)))


def _decompose(w, cfg):
    """Balanced signed-digit split of int64 weights, LSB slice first."""
    digits = np.zeros((cfg.num_slices,) + w.shape, dtype=np.int64)
    rem = w.astype(np.int64)
    for s in range(cfg.num_slices - 1, -1, -1):
        n = int(cfg.nominal[s])
        half = np.int64(1) << (n - 1)
        d = ((rem + half) & ((np.int64(1) << n) - 1)) - half
        digits[s] = d
        rem = (rem - d) >> n
    if np.any(rem != 0):
        raise RangeError("weight outside representable range")
    return digits


def _bitserial(mats, vec, cfg, adc_bits):
    """Shared MVM/MTVM pipeline over 16/m input cycles.

    mats is (S, contraction, out); vec streams along the contraction axis in
    two's complement, m bits per cycle with the top chunk signed.
    """
    S, length, width = mats.shape
    m = cfg.m
    cycles = cfg.cycles
    if adc_bits is None:
        # default must stay exact for matrices holding unresolved update
        # overflow, so size for the full stored width, not just nominal
        adc_bits = cfg.lossless_adc_bits(length, include_carry=True)

    shift_n = np.arange(cycles, dtype=np.int64) * m
    planes = (vec[None, :] >> shift_n[:, None]) & ((1 << m) - 1)
    # top chunk carries the sign of the two's complement operand
    planes[-1] = vec >> shift_n[-1]

    stacked = mats.transpose(1, 0, 2).reshape(length, S * width)
    dots = planes.astype(np.float64) @ stacked.astype(np.float64)
    dots = np.rint(dots).astype(np.int64).reshape(cycles, S, width)

    log_rows = math.ceil(math.log2(max(length, 2)))
    code_lo = -(np.int64(1) << (adc_bits - 1))
    code_hi = (np.int64(1) << (adc_bits - 1)) - 1
    acc = np.zeros(width, dtype=np.int64)
    for s in range(S):
        step_bits = max(0, log_rows + int(cfg.nominal[s]) - adc_bits)
        if step_bits:
            q = np.clip(rhe_shift(dots[:, s, :], step_bits), code_lo, code_hi) << step_bits
        else:
            q = np.clip(dots[:, s, :], code_lo, code_hi)
        folded = np.zeros(width, dtype=np.int64)
        for c in range(cycles):
            folded += q[c] << shift_n[c]
        acc += folded << cfg.lsb[s]
    return acc
