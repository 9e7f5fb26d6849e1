"""Reference models, synthetic datasets, and fixed-point training drivers.

Three interchangeable training backends share one outer loop:

  functional_sliced     sliced-digit kernels; dense models run through the
                        partitioned graph evaluator, conv models through the
                        direct per-layer engine
  full_precision_oracle whole-matrix int64 reference with the same
                        fixed-point contracts and no slicing
  compiled_simulator    compiled per-core programs on the cycle-level machine

All three consume identical batches from the same seeded stream, so curves
and final weights are directly comparable.
"""

import math

import numpy as np

from .compiler import ShardStore, build_graph, interpret, partition, schedule
from .conv import conv_backward, conv_forward, conv_wgrad
from .errors import (CapacityError, DivergenceError, UnsupportedConvError,
                     ValidationError)
from .fixedpoint import Q8_8, requantize
from .lower import lower
from .machine import Machine, WeightBank
from .model import LayerSpec, ModelSpec
from .slicing import MAX_DIM, SliceConfig, SlicedMatrix
from .vecops import apply_alu, softmax_probs

BACKENDS = ("functional_sliced", "full_precision_oracle", "compiled_simulator")

# lr_shift sentinel: shift past the operand width, every step quantizes to 0
FROZEN_LR = 31


# ------------------------------------------------------------------ datasets


class Dataset:
    """Labeled vectors in raw Q8.8, split into train and test."""

    def __init__(self, x_train, y_train, x_test, y_test, n_classes):
        self.x_train = np.asarray(x_train, dtype=np.int64)
        self.y_train = np.asarray(y_train, dtype=np.int64)
        self.x_test = np.asarray(x_test, dtype=np.int64)
        self.y_test = np.asarray(y_test, dtype=np.int64)
        self.n_classes = int(n_classes)
        if self.x_train.ndim != 2 or self.x_test.ndim != 2:
            raise ValidationError("dataset arrays must be 2-D")
        if len(self.x_train) != len(self.y_train) \
                or len(self.x_test) != len(self.y_test):
            raise ValidationError("labels do not match sample counts")

    @property
    def dim(self):
        return self.x_train.shape[1]

    def onehot(self, y):
        out = np.zeros(self.n_classes, dtype=np.int64)
        out[int(y)] = Q8_8.one
        return out

    def save(self, path):
        np.savez_compressed(path, x_train=self.x_train, y_train=self.y_train,
                            x_test=self.x_test, y_test=self.y_test,
                            n_classes=np.int64(self.n_classes))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["x_train"], z["y_train"], z["x_test"], z["y_test"],
                       int(z["n_classes"]))


def gaussian_clusters(n_classes, dim, n_train=512, n_test=256, seed=0,
                      center_scale=2.5, noise=0.45):
    """Synthetic classification set: one spherical Gaussian per class."""
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = centers[y] + rng.normal(0.0, noise, size=(n, dim))
        return Q8_8.quantize(x), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr, xte, yte, n_classes)


def paired_clusters(n_pairs=16, dim=64, n_train=1024, n_test=256, seed=0,
                    support=6, feature_scale=1.4, pair_offset=0.7,
                    feature_noise=0.7, bg_density=0.08, bg_scale=0.12):
    """Fine-grained pairs: classes 2p and 2p+1 share a sparse feature support.

    Twin classes differ by an offset comparable to the feature noise, so
    telling them apart needs sustained small weight refinements; the bulk of
    the input dimensions carry only occasional low-level noise. This keeps a
    persistent stream of small updates flowing into the array, which is the
    stress case for update-path carry headroom.
    """
    if n_pairs < 1 or support < 1 or support > dim:
        raise ValidationError("need 1 <= support <= dim and n_pairs >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_classes = 2 * n_pairs
    centers = np.zeros((n_classes, dim))
    for p in range(n_pairs):
        cols = rng.choice(dim, size=support, replace=False)
        base = rng.normal(0.0, feature_scale, size=support)
        off = rng.normal(0.0, pair_offset, size=support)
        centers[2 * p, cols] = base - off
        centers[2 * p + 1, cols] = base + off
    active = np.abs(centers) > 0

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = centers[y].copy()
        x += (rng.random((n, dim)) < bg_density) \
            * rng.normal(0.0, bg_scale, size=(n, dim))
        x += active[y] * rng.normal(0.0, feature_noise, size=(n, dim))
        return Q8_8.quantize(x), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr, xte, yte, n_classes)


def dataset_for(model, seed=0, n_train=512, n_test=256, **kwargs):
    name = getattr(model, "name", "") or ""
    if name == "mlp2":
        return paired_clusters(model.output_len // 2, model.input_len,
                               seed=seed, n_test=n_test, **kwargs)
    return gaussian_clusters(model.output_len, model.input_len,
                             n_train=n_train, n_test=n_test, seed=seed,
                             **kwargs)


# ------------------------------------------------------------------- models


def _dense(i, o, act="none"):
    return LayerSpec("dense", in_dim=i, out_dim=o, activation=act)


def make_model(name):
    """Registry of reference model shapes."""
    if isinstance(name, ModelSpec):
        return name
    key = str(name).strip().lower()
    if key == "mlp2":
        return ModelSpec([_dense(64, 48, "relu"), _dense(48, 32)], name="mlp2")
    if key == "mlp4":
        return ModelSpec([_dense(1024, 256, "relu"), _dense(256, 512, "relu"),
                          _dense(512, 512, "relu"), _dense(512, 10)],
                         name="mlp4")
    if key == "mlp128":
        return ModelSpec([_dense(128, 128, "relu"), _dense(128, 128, "relu"),
                          _dense(128, 128)], name="mlp128")
    if key == "cnn4":
        conv = lambda c, m, hw, k, act="relu": LayerSpec(
            "conv", activation=act, in_ch=c, out_ch=m, in_hw=hw, k=k, pad=0)
        return ModelSpec([conv(3, 8, 8, 3), conv(8, 10, 6, 3),
                          conv(10, 12, 4, 3), conv(12, 14, 2, 2),
                          _dense(14, 10)], name="cnn4")
    raise ValidationError("unknown model %r (have mlp2, mlp4, mlp128, cnn4)"
                          % (name,))


def init_weights(model, seed=0, scale=4.0):
    """Q16.16 Gaussian init with std scale/sqrt(fan_in), one array per layer.

    The default scale keeps single OPA steps a small fraction of the weight
    spread: update granularity is set by the input magnitudes, so weights
    must start large relative to them for stable descent.
    """
    rng = np.random.Generator(np.random.PCG64(seed + 1000))
    out = []
    for layer in model.layers:
        rows, cols = layer.matrix_shape
        std = scale / math.sqrt(rows)
        w = rng.normal(0.0, std, size=(rows, cols))
        out.append(np.rint(w * 65536.0).astype(np.int64))
    return out


# ----------------------------------------------------------- loss utilities


def loss_and_grad(logits, onehot):
    """Softmax cross-entropy loss (float) and its Q8.8 gradient."""
    p = softmax_probs(logits)
    y = int(np.argmax(onehot))
    loss = -math.log(max(float(p[y]), 1e-300))
    return loss, apply_alu("loss_grad", logits, onehot)


def _batch_loss(logits_by_b, labels_by_b):
    total = 0.0
    for b, z in logits_by_b.items():
        p = softmax_probs(z)
        y = int(np.argmax(labels_by_b[b]))
        total += -math.log(max(float(p[y]), 1e-300))
    return total / max(len(logits_by_b), 1)


# ------------------------------------------------------------ oracle kernel


class PlainMatrix:
    """Whole-matrix integer weights with the crossbar operation contracts.

    Same requantization and operand formats as the sliced kernels, but the
    weight is a single int64 array: no digits, no carries, nothing for a
    resolution step to do. Serves as the full-precision fixed-point oracle.
    """

    def __init__(self, w, weight_bits=32):
        self.w = np.asarray(w, dtype=np.int64).copy()
        if self.w.ndim != 2:
            raise ValidationError("weights must be 2-D")
        self.rows, self.cols = self.w.shape
        self._lo = -(np.int64(1) << (weight_bits - 1))
        self._hi = (np.int64(1) << (weight_bits - 1)) - 1

    def mvm(self, x, out_shift=16, out_fmt=Q8_8):
        x = np.asarray(x, dtype=np.int64)
        return requantize(self.w.T @ x, out_shift, out_fmt)

    def mtvm(self, d, out_shift=16, out_fmt=Q8_8):
        d = np.asarray(d, dtype=np.int64)
        return requantize(self.w @ d, out_shift, out_fmt)

    def opa(self, x, d, lr_shift=0):
        x = np.asarray(x, dtype=np.int64)
        d = np.asarray(d, dtype=np.int64)
        step = np.sign(d) * (np.abs(d) >> lr_shift)
        self.w = np.clip(self.w + np.outer(x, step), self._lo, self._hi)

    def crs(self):
        return None

    def reconstruct(self):
        return self.w.copy()

    def saturated_fraction(self, lsb_first=False):
        return np.zeros(1)

    def saturated_cell_fraction(self, lsb_first=False):
        return np.zeros(1)


# ------------------------------------------------------------------ engines


class _GraphEngine:
    """Dense models through the partitioned graph evaluator."""

    def __init__(self, model, cfg, weights, batch, variant, lr_shift):
        self.model = model
        self.pm = partition(model)
        self.store = ShardStore(self.pm, cfg).realize(weights)
        self.graph = build_graph(self.pm, batch, variant)
        self.variant = variant
        self.lr = lr_shift
        self._fwd = {}

    def step(self, xs, ys, crs=False):
        if crs:
            self.crs()
        return interpret(self.graph, self.store, xs, ys, self.lr)["logits"]

    def forward(self, xs):
        g = self._fwd.get(len(xs))
        if g is None:
            g = build_graph(self.pm, len(xs), self.variant, forward_only=True)
            self._fwd[len(xs)] = g
        return interpret(g, self.store, xs, {}, self.lr)["logits"]

    def crs(self):
        for mat in self.store.mats.values():
            mat.crs()

    def lsb_saturation(self):
        fracs = [m.saturated_fraction(lsb_first=True)[0]
                 for m in self.store.mats.values()]
        return float(np.mean(fracs))

    def weights(self):
        return [self.store.reconstruct_layer(l)
                for l in range(1, len(self.model.layers) + 1)]

    def finalize(self):
        return {}


class _DirectEngine:
    """Per-layer kernel loop; the only engine that runs conv layers.

    Updates are held until the whole batch's backward pass is done, then
    applied in (input, layer) order, matching the graph evaluator.
    """

    def __init__(self, model, kernels, lr_shift):
        self.model = model
        self.kernels = list(kernels)
        self.lr = lr_shift

    def _forward_one(self, x):
        acts = [np.asarray(x, dtype=np.int64)]
        pre = []
        for layer, ker in zip(self.model.layers, self.kernels):
            if layer.kind == "dense":
                h = ker.mvm(acts[-1])
            else:
                h = conv_forward(ker, layer, acts[-1])
            pre.append(h)
            if layer.activation == "none":
                acts.append(h)
            else:
                acts.append(apply_alu(layer.activation, h))
        return acts, pre

    def _gate(self, d, li, acts, pre):
        act = self.model.layers[li].activation
        if act == "none":
            return d
        if act == "relu":
            return apply_alu("relu_grad", d, pre[li])
        return apply_alu("sigmoid_grad", d, acts[li + 1])

    def step(self, xs, ys, crs=False):
        if crs:
            self.crs()
        logits = {}
        updates = []
        nl = len(self.model.layers)
        for b in sorted(xs):
            acts, pre = self._forward_one(xs[b])
            logits[b] = acts[-1]
            d = apply_alu("loss_grad", acts[-1], np.asarray(ys[b], np.int64))
            d = self._gate(d, nl - 1, acts, pre)
            for li in range(nl - 1, -1, -1):
                updates.append((b, li, acts[li], d))
                if li == 0:
                    break
                layer, ker = self.model.layers[li], self.kernels[li]
                if layer.kind == "dense":
                    g = ker.mtvm(d)
                else:
                    g = conv_backward(ker, layer, d)
                d = self._gate(g, li - 1, acts, pre)
        updates.sort(key=lambda u: (u[0], u[1]))
        for b, li, xin, dl in updates:
            layer, ker = self.model.layers[li], self.kernels[li]
            if layer.kind == "dense":
                ker.opa(xin, dl, lr_shift=self.lr)
            else:
                conv_wgrad(ker, layer, xin, dl, lr_shift=self.lr)
        return logits

    def forward(self, xs):
        return {b: self._forward_one(xs[b])[0][-1] for b in sorted(xs)}

    def crs(self):
        for ker in self.kernels:
            ker.crs()

    def lsb_saturation(self):
        return float(np.mean([k.saturated_fraction(lsb_first=True)[0]
                              for k in self.kernels]))

    def weights(self):
        return [k.reconstruct() for k in self.kernels]

    def finalize(self):
        return {}


def _sliced_kernels(model, cfg, weights):
    kers = []
    for layer, w in zip(model.layers, weights):
        rows, cols = layer.matrix_shape
        if rows > MAX_DIM or cols > MAX_DIM:
            raise CapacityError(
                "layer matrix %dx%d exceeds one %dx%d crossbar; the direct "
                "engine does not partition" % (rows, cols, MAX_DIM, MAX_DIM))
        kers.append(SlicedMatrix.from_weights(w, cfg))
    return kers


class _MachineEngine:
    """Compiled per-core programs on the cycle-level machine.

    One training kernel is compiled up front (plus a twin with a resolution
    prologue); evaluation kernels are compiled per chunk size on demand.
    Energy, cycles, and the pending-operand peak accumulate over training
    steps only; evaluation runs are not charged to the training report.
    """

    def __init__(self, model, cfg, weights, batch, variant, lr_shift,
                 cost_path="panther", cost=None):
        self.model = model
        self.pm = partition(model)
        self.store = ShardStore(self.pm, cfg).realize(weights)
        self.bank = WeightBank(self.store, variant)
        self.variant = variant
        self.cost_path = cost_path
        self.cost_model = cost
        g = build_graph(self.pm, batch, variant)
        sched = schedule(g)
        self._train = Machine(lower(g, sched, lr_shift=lr_shift),
                              self.bank, cost=cost, cost_path=cost_path)
        self._train_crs = Machine(
            lower(g, sched, lr_shift=lr_shift, crs_prologue=True),
            self.bank, cost=cost, cost_path=cost_path)
        self._fwd = {}
        self.energy = {}
        self.cycles = 0
        self.peak_pending_words = 0
        self.update_words = 0

    def _absorb(self, rep):
        for layer, cats in rep.energy.items():
            slot = self.energy.setdefault(layer, {})
            for cat, val in cats.items():
                slot[cat] = slot.get(cat, 0) + val
        self.cycles += rep.cycles
        self.peak_pending_words = max(self.peak_pending_words,
                                      rep.peak_pending_words)
        self.update_words = max(self.update_words, rep.update_words)

    def step(self, xs, ys, crs=False):
        machine = self._train_crs if crs else self._train
        rep = machine.run(xs, ys)
        self._absorb(rep)
        return rep.logits

    def forward(self, xs):
        machine = self._fwd.get(len(xs))
        if machine is None:
            g = build_graph(self.pm, len(xs), self.variant, forward_only=True)
            machine = Machine(lower(g, schedule(g), lr_shift=0),
                              self.bank, cost=self.cost_model,
                              cost_path=self.cost_path)
            self._fwd[len(xs)] = machine
        return machine.run(xs).logits

    def crs(self):
        raise AssertionError("resolution runs inside the compiled kernel")

    def lsb_saturation(self):
        fracs = [m.saturated_fraction(lsb_first=True)[0]
                 for m in self.store.mats.values()]
        return float(np.mean(fracs))

    def weights(self):
        return [self.store.reconstruct_layer(l)
                for l in range(1, len(self.model.layers) + 1)]

    def finalize(self):
        by_cat = {}
        for cats in self.energy.values():
            for cat, val in cats.items():
                by_cat[cat] = by_cat.get(cat, 0) + val
        return {"energy_pj": by_cat, "total_energy_pj": sum(by_cat.values()),
                "energy_by_layer_pj": {str(l): dict(sorted(c.items()))
                                       for l, c in sorted(self.energy.items())},
                "cycles": self.cycles,
                "peak_pending_words": self.peak_pending_words,
                "update_words": self.update_words}


# ------------------------------------------------------------- train driver


class TrainRun:
    """One training configuration: model, data, algorithm, quantization."""

    def __init__(self, model, algo="sgd", steps=500, lr_shift=6, seed=0,
                 dataset=None, slices="44466555", crs_period=1024,
                 variant=1, cost_path="panther", cost=None, eval_every=0,
                 eval_chunk=32, track_updates=False, init_scale=4.0):
        self.model = make_model(model)
        self.algo = algo
        self.batch = _parse_algo(algo)
        self.steps = int(steps)
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if lr_shift is not None and not 0 <= int(lr_shift) <= FROZEN_LR:
            raise ValidationError("lr_shift must be None or 0..%d" % FROZEN_LR)
        self.lr_shift = None if lr_shift is None else int(lr_shift)
        self.seed = int(seed)
        self.dataset = dataset
        self.slices = slices if isinstance(slices, SliceConfig) \
            else SliceConfig.preset(slices)
        self.crs_period = int(crs_period) if crs_period else 0
        if variant not in (1, 2, 3):
            raise ValidationError("variant must be 1, 2 or 3")
        self.variant = variant
        self.cost_path = cost_path
        self.cost = cost
        self.eval_every = int(eval_every)
        self.eval_chunk = int(eval_chunk)
        self.track_updates = bool(track_updates)
        self.init_scale = float(init_scale)

    def to_dict(self):
        return {"model": self.model.name, "algo": self.algo,
                "steps": self.steps, "lr_shift": self.lr_shift,
                "seed": self.seed,
                "slices": "/".join("%d+%d" % s for s in self.slices.slices),
                "crs_period": self.crs_period, "variant": self.variant,
                "cost_path": self.cost_path}


def _parse_algo(algo):
    if isinstance(algo, int):
        batch = algo
    else:
        text = str(algo).strip().lower()
        if text == "sgd":
            batch = 1
        elif text.startswith("minibatch:"):
            try:
                batch = int(text.split(":", 1)[1])
            except ValueError:
                raise ValidationError("bad algo %r" % (algo,))
        else:
            raise ValidationError(
                "algo must be 'sgd' or 'minibatch:B', got %r" % (algo,))
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    return batch


class TrainResult:
    def __init__(self, run, backend, loss, accuracy, saturation,
                 weights, crs_steps, update_ratio=None, extras=None,
                 engine=None):
        self.run = run
        self.backend = backend
        self.loss = loss
        self.accuracy = accuracy
        self.saturation = saturation
        self.weights = weights
        self.crs_steps = crs_steps
        self.update_ratio = update_ratio
        self.extras = extras or {}
        self.engine = engine

    @property
    def final_accuracy(self):
        return self.accuracy[-1][1] if self.accuracy else float("nan")

    def to_dict(self):
        doc = {"run": self.run.to_dict(), "backend": self.backend,
               "loss": [round(float(v), 6) for v in self.loss],
               "accuracy": [[int(s), round(float(a), 6)]
                            for s, a in self.accuracy],
               "saturation": [round(float(v), 6) for v in self.saturation],
               "crs_steps": list(self.crs_steps)}
        if self.update_ratio is not None:
            doc["update_ratio"] = [round(float(v), 6)
                                   for v in self.update_ratio]
        doc.update(self.extras)
        return doc


def _make_engine(backend, run, weights):
    lr = FROZEN_LR if run.lr_shift is None else run.lr_shift
    model, cfg = run.model, run.slices
    has_conv = any(l.kind == "conv" for l in model.layers)
    if backend == "full_precision_oracle":
        return _DirectEngine(model, [PlainMatrix(w) for w in weights], lr)
    if backend == "functional_sliced":
        if has_conv:
            return _DirectEngine(model, _sliced_kernels(model, cfg, weights),
                                 lr)
        return _GraphEngine(model, cfg, weights, run.batch, run.variant, lr)
    if backend == "compiled_simulator":
        if has_conv:
            raise UnsupportedConvError(
                "conv layers run on the functional backends")
        return _MachineEngine(model, cfg, weights, run.batch, run.variant,
                              lr, run.cost_path, cost=run.cost)
    raise ValidationError("unknown backend %r (have %s)"
                          % (backend, ", ".join(BACKENDS)))


def evaluate(engine, dataset, chunk=32):
    """Forward the held-out split in chunks; mean top-1 accuracy."""
    n = len(dataset.x_test)
    hits = 0
    for start in range(0, n, chunk):
        xs = {i: dataset.x_test[start + i]
              for i in range(min(chunk, n - start))}
        logits = engine.forward(xs)
        for i, z in logits.items():
            hits += int(np.argmax(z) == dataset.y_test[start + i])
    return hits / n


def train(run, backend="functional_sliced"):
    """Run the training loop; returns curves, weights, and backend extras."""
    ds = run.dataset if run.dataset is not None else dataset_for(
        run.model, seed=run.seed)
    if ds.dim != run.model.input_len or ds.n_classes != run.model.output_len:
        raise ValidationError(
            "dataset is %d-dim/%d-class, model wants %d/%d"
            % (ds.dim, ds.n_classes, run.model.input_len,
               run.model.output_len))
    weights = init_weights(run.model, seed=run.seed, scale=run.init_scale)
    engine = _make_engine(backend, run, weights)
    sampler = np.random.Generator(np.random.PCG64(run.seed + 1))

    loss = []
    saturation = []
    accuracy = []
    crs_steps = []
    update_ratio = [] if run.track_updates else None
    consumed = 0

    for step in range(run.steps):
        idx = sampler.integers(0, len(ds.x_train), size=run.batch)
        xs = {b: ds.x_train[idx[b]] for b in range(run.batch)}
        ys = {b: ds.onehot(ds.y_train[idx[b]]) for b in range(run.batch)}

        crs_due = bool(run.crs_period) and consumed >= run.crs_period
        if crs_due:
            consumed -= run.crs_period
            crs_steps.append(step)
        before = engine.weights() if run.track_updates else None

        logits = engine.step(xs, ys, crs=crs_due)
        consumed += run.batch

        val = _batch_loss(logits, ys)
        if not math.isfinite(val):
            raise DivergenceError("loss diverged at step %d" % step)
        loss.append(val)
        saturation.append(engine.lsb_saturation())
        if run.track_updates:
            after = engine.weights()
            worst = 0.0
            for wb, wa in zip(before, after):
                span = int(wa.max()) - int(wa.min())
                delta = int(np.abs(wa - wb).max())
                worst = max(worst, delta / max(span, 1))
            update_ratio.append(worst)
        if run.eval_every and (step + 1) % run.eval_every == 0 \
                and step + 1 < run.steps:
            accuracy.append((step + 1, evaluate(engine, ds, run.eval_chunk)))

    accuracy.append((run.steps, evaluate(engine, ds, run.eval_chunk)))
    return TrainResult(run, backend, np.array(loss), accuracy,
                       np.array(saturation), engine.weights(), crs_steps,
                       update_ratio=None if update_ratio is None
                       else np.array(update_ratio),
                       extras=engine.finalize(), engine=engine)
