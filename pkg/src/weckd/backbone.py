"""Classifier backbone: conv blocks -> (optional spatial attention) -> GAP -> FC -> softmax head."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError

__all__ = [
    "BackboneConfig",
    "Model",
    "build_model",
    "forward_base",
    "forward_attended",
    "forward_on_tape",
    "copy_attention_weights",
    "param_digest",
    "DESK_CONFIG",
    "PAPER_FIDELITY_CONFIG",
]


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple = (32, 32, 3)          # (H, W, C)
    conv_blocks: tuple = (16, 32, 64)        # filters per block; 3x3 kernels, 2x2 pool
    fc_width: int = 128
    num_classes: int = 4
    attention_enabled: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.fc_width < 1:
            raise ContractError(f"fc_width must be positive, got {self.fc_width}")
        self.feature_shape()  # validates spatial collapse

    def feature_shape(self):
        """(C', H', W') after the conv stack; raises on spatial collapse."""
        h, w, _ = self.input_size
        for i, _f in enumerate(self.conv_blocks):
            h, w = h // 2, w // 2  # same-padded 3x3 conv, then 2x2 pool
            if h < 1 or w < 1:
                raise ShapeError(
                    f"conv block {i} collapses spatial size below 1x1 "
                    f"for input {self.input_size[:2]}"
                )
        return self.conv_blocks[-1], h, w


DESK_CONFIG = BackboneConfig()
PAPER_FIDELITY_CONFIG = BackboneConfig(input_size=(224, 224, 3), fc_width=1024)


@dataclass
class Model:
    config: BackboneConfig
    params: dict = field(default_factory=dict)

    @property
    def attention_enabled(self):
        return self.config.attention_enabled

    @property
    def num_classes(self):
        return self.config.num_classes

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def build_model(config: BackboneConfig) -> Model:
    """Seeded He-style init: weights ~ N(0, 2/fan_in), biases 0."""
    rng = np.random.default_rng(config.init_seed)
    params = {}
    c_in = config.input_size[2]
    for i, f in enumerate(config.conv_blocks):
        fan_in = c_in * 9
        params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(f, c_in, 3, 3))
        params[f"conv{i}_b"] = np.zeros(f)
        c_in = f
    c_feat, _, _ = config.feature_shape()
    # small weights and a positive bias start the gates near pass-through
    # (sigmoid ~ 0.88), so an attention model begins close to its plain twin
    params["w_att"] = rng.normal(0.0, 0.01, size=(c_feat,))
    params["b_att"] = np.array(2.0)
    params["w1"] = rng.normal(0.0, np.sqrt(2.0 / c_feat), size=(c_feat, config.fc_width))
    params["b1"] = np.zeros(config.fc_width)
    params["w2"] = rng.normal(0.0, np.sqrt(2.0 / config.fc_width),
                              size=(config.fc_width, config.num_classes))
    params["b2"] = np.zeros(config.num_classes)
    return Model(config, params)


def _check_batch(model, batch):
    h, w, c = model.config.input_size
    if batch.ndim != 4 or batch.shape[1:] != (c, h, w):
        raise ShapeError(
            f"batch shape {batch.shape} does not match configured input ({c},{h},{w})"
        )


def _conv_stack(model, x):
    p = model.params
    for i in range(len(model.config.conv_blocks)):
        x = T.conv2d(x, p[f"conv{i}_w"], p[f"conv{i}_b"], stride=1, pad=1)
        x = T.relu(x)
        x = T.maxpool2(x)
    return x


def _head(model, pooled):
    p = model.params
    fc = T.relu(T.dense(pooled, p["w1"], p["b1"]))
    logits = T.dense(fc, p["w2"], p["b2"])
    return T.softmax(logits), logits


def forward_base(model, batch):
    """Plain path: conv stack -> GAP -> FC -> softmax. Returns (f_base, probs, logits)."""
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    f_base = _conv_stack(model, batch)
    probs, logits = _head(model, T.gap(f_base))
    return f_base, probs, logits


def forward_attended(model, batch):
    """Attention path: features gated per spatial location before GAP."""
    if not model.attention_enabled:
        raise ContractError("forward_attended called on a model with attention disabled")
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    f_base = _conv_stack(model, batch)
    scores = T.attention_scores(f_base, model.params["w_att"], model.params["b_att"])
    f_att = f_base * scores[:, None, :, :]
    probs, logits = _head(model, T.gap(f_att))
    return f_att, probs, logits


def forward(model, batch):
    """Route through the attended or base path per the model's flag."""
    if model.attention_enabled:
        return forward_attended(model, batch)
    return forward_base(model, batch)


def forward_on_tape(model, tape, batch):
    """Taped forward pass for training; returns the logits node.

    Trainable parameters are registered on the tape under their model keys.
    """
    batch = np.asarray(batch, dtype=np.float64)
    _check_batch(model, batch)
    nodes = {k: tape.param(k, v) for k, v in model.params.items()}
    x = tape.const(batch)
    for i in range(len(model.config.conv_blocks)):
        x = tape.conv2d(x, nodes[f"conv{i}_w"], nodes[f"conv{i}_b"], stride=1, pad=1)
        x = tape.relu(x)
        x = tape.maxpool2(x)
    if model.attention_enabled:
        scores = tape.attention_scores(x, nodes["w_att"], nodes["b_att"])
        x = tape.scale_spatial(x, scores)
    pooled = tape.gap(x)
    fc = tape.relu(tape.dense(pooled, nodes["w1"], nodes["b1"]))
    logits = tape.dense(fc, nodes["w2"], nodes["b2"])
    return logits


def copy_attention_weights(teacher: Model, student: Model) -> Model:
    """Return a student copy with the teacher's attention gate weights."""
    t_c = teacher.config.feature_shape()[0]
    s_c = student.config.feature_shape()[0]
    if t_c != s_c:
        raise ShapeError(
            f"attention channel mismatch: teacher has {t_c} feature channels, student has {s_c}"
        )
    out = student.copy()
    out.params["w_att"] = teacher.params["w_att"].copy()
    out.params["b_att"] = teacher.params["b_att"].copy()
    return out


def param_digest(model: Model) -> str:
    """SHA-256 over the canonical parameter ordering; used for freeze checks."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name], dtype=np.float64).tobytes())
    return h.hexdigest()
