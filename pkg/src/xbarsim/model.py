"""Model descriptions: layer shapes, activations, JSON form."""

import json

from .errors import UnsupportedLayerError, ValidationError

ACTIVATIONS = ("relu", "sigmoid", "none")


class LayerSpec:
    """One layer. Dense holds an in_dim x out_dim matrix; conv holds a
    (C*R*S) x M matrix of linearized filters with square stride-1 geometry."""

    def __init__(self, kind, activation="none", **dims):
        if kind not in ("dense", "conv"):
            raise UnsupportedLayerError("unsupported layer kind %r" % kind)
        if activation not in ACTIVATIONS:
            raise ValidationError("unknown activation %r" % activation)
        self.kind = kind
        self.activation = activation
        if kind == "dense":
            self.in_dim = int(dims.pop("in_dim"))
            self.out_dim = int(dims.pop("out_dim"))
            if self.in_dim < 1 or self.out_dim < 1:
                raise ValidationError("dense dims must be positive")
        else:
            self.in_ch = int(dims.pop("in_ch"))
            self.out_ch = int(dims.pop("out_ch"))
            self.in_hw = int(dims.pop("in_hw"))
            self.k = int(dims.pop("k"))
            self.pad = int(dims.pop("pad", 0))
            if min(self.in_ch, self.out_ch, self.in_hw, self.k) < 1:
                raise ValidationError("conv dims must be positive")
            if self.pad < 0 or self.pad >= self.k:
                raise ValidationError("pad must be in 0..k-1")
            self.out_hw = self.in_hw - self.k + 1 + 2 * self.pad
            if self.out_hw < 1:
                raise ValidationError("kernel larger than padded input")
        if dims:
            raise ValidationError("unexpected layer fields: %s" % sorted(dims))

    @property
    def matrix_shape(self):
        """(rows, cols) of the trainable matrix as stored on crossbars."""
        if self.kind == "dense":
            return (self.in_dim, self.out_dim)
        return (self.in_ch * self.k * self.k, self.out_ch)

    @property
    def input_len(self):
        if self.kind == "dense":
            return self.in_dim
        return self.in_ch * self.in_hw * self.in_hw

    @property
    def output_len(self):
        if self.kind == "dense":
            return self.out_dim
        return self.out_ch * self.out_hw * self.out_hw

    def to_dict(self):
        if self.kind == "dense":
            return {"type": "dense", "in": self.in_dim, "out": self.out_dim,
                    "act": self.activation}
        return {"type": "conv", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "in_hw": self.in_hw, "k": self.k, "pad": self.pad,
                "act": self.activation}

    @classmethod
    def from_dict(cls, doc):
        kind = doc.get("type")
        act = doc.get("act", "none")
        if kind == "dense":
            return cls("dense", act, in_dim=doc["in"], out_dim=doc["out"])
        if kind == "conv":
            return cls("conv", act, in_ch=doc["in_ch"], out_ch=doc["out_ch"],
                       in_hw=doc["in_hw"], k=doc["k"], pad=doc.get("pad", 0))
        raise UnsupportedLayerError("unsupported layer kind %r" % kind)

    def __repr__(self):
        if self.kind == "dense":
            return "dense(%d->%d, %s)" % (self.in_dim, self.out_dim, self.activation)
        return "conv(%dx%d k%d p%d ch%d->%d, %s)" % (
            self.in_hw, self.in_hw, self.k, self.pad, self.in_ch,
            self.out_ch, self.activation)


class ModelSpec:
    def __init__(self, layers, name="model"):
        if not layers:
            raise ValidationError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.output_len != b.input_len:
                raise ValidationError(
                    "layer size mismatch: %r feeds %r" % (a, b))
        self.layers = list(layers)
        self.name = name

    @property
    def input_len(self):
        return self.layers[0].input_len

    @property
    def output_len(self):
        return self.layers[-1].output_len

    def to_json(self):
        return json.dumps({"name": self.name,
                           "layers": [l.to_dict() for l in self.layers]},
                          indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text) if isinstance(text, str) else dict(text)
            layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError("bad model file: %s" % exc)
        return cls(layers, name=doc.get("name", "model"))

    def __repr__(self):
        return "ModelSpec(%s: %s)" % (self.name, ", ".join(map(repr, self.layers)))
