"""The full classifier: screening, fusion, gated-attention pooling, head.

Four variants exist, toggling the screening branch (use_ds) and the fusion
branch (use_cf) independently. All variants share the same parameter tree so
an ablated run simply never routes gradient into the branch it skips; only
the pooling head widths differ, because the fused feature is twice as wide
when the fusion branch is active.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion as fu
from . import numerics as nm
from . import screening as sc
from .data import FeatureBag
from .errors import (
    BagMagicError,
    BagTruncatedError,
    BagVersionError,
    ConfigError,
    ContractError,
)
from .numerics import Matrix, Node

N_CLASSES = 4

_CKPT_MAGIC = b"DSCP"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Variant:
    """Which of the two feature branches are active."""

    use_ds: bool = True
    use_cf: bool = True

    @property
    def name(self) -> str:
        return {
            (True, True): "full",
            (False, True): "no_ds",
            (True, False): "no_cf",
            (False, False): "none",
        }[(self.use_ds, self.use_cf)]

    @classmethod
    def from_name(cls, name: str) -> "Variant":
        table = {
            "full": cls(True, True),
            "no_ds": cls(False, True),
            "no_cf": cls(True, False),
            "none": cls(False, False),
        }
        if name not in table:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(table)}")
        return table[name]


VARIANT_NAMES = ("full", "no_cf", "no_ds", "none")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    clinical_dim: int
    d_k: int | None = None
    attn_hidden: int | None = None
    scale_pooling: bool = True

    def __post_init__(self) -> None:
        if self.feature_dim < 1 or self.clinical_dim < 1:
            raise ConfigError("feature_dim and clinical_dim must be positive")
        if self.d_k is None:
            object.__setattr__(self, "d_k", self.feature_dim)
        if self.d_k != self.feature_dim:
            raise ConfigError(
                "d_k must equal feature_dim: the query tokens are applied unprojected"
            )
        if self.attn_hidden is None:
            object.__setattr__(self, "attn_hidden", math.ceil(self.feature_dim / 2))

    def fused_dim(self, variant: Variant) -> int:
        return self.feature_dim + self.d_k if variant.use_cf else self.feature_dim


@dataclass
class ModelParams:
    """Every learnable weight, addressable by a stable dotted name."""

    config: ModelConfig
    variant: Variant
    screening: sc.ScreeningParams
    fusion: fu.FusionParams
    mil_att_w: Matrix
    mil_att_b: Matrix
    mil_gate_w: Matrix
    mil_gate_b: Matrix
    head_w: Matrix
    head_b: Matrix

    @classmethod
    def init(cls, config: ModelConfig, variant: Variant, seed: int) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        ln, m = config.feature_dim, config.clinical_dim
        dk, ha = config.d_k, config.attn_hidden
        fused = config.fused_dim(variant)

        def w(fan_in: int, fan_out: int) -> Matrix:
            bound = 1.0 / math.sqrt(fan_in)
            return Matrix(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

        def b(fan_out: int) -> Matrix:
            return Matrix.zeros(1, fan_out)

        screening = sc.ScreeningParams(
            fc1_w=w(1, ln), fc1_b=b(ln),
            fc2_w=w(ln, ln), fc2_b=b(ln),
            gate_w=w(2 * ln, 1), gate_b=b(1),
        )
        fusion = fu.FusionParams(
            cq1_w=w(m + ln, ln), cq1_b=b(ln),
            cq2_w=w(ln, m * ln), cq2_b=b(m * ln),
            w_q=w(ln, dk), w_k=w(ln, dk), w_v=w(ln, dk),
        )
        return cls(
            config=config,
            variant=variant,
            screening=screening,
            fusion=fusion,
            mil_att_w=w(fused, ha), mil_att_b=b(ha),
            mil_gate_w=w(fused, ha), mil_gate_b=b(ha),
            head_w=w(fused, N_CLASSES), head_b=b(N_CLASSES),
        )

    def to_dict(self) -> dict[str, Matrix]:
        s, f = self.screening, self.fusion
        return {
            "screening.fc1_w": s.fc1_w, "screening.fc1_b": s.fc1_b,
            "screening.fc2_w": s.fc2_w, "screening.fc2_b": s.fc2_b,
            "screening.gate_w": s.gate_w, "screening.gate_b": s.gate_b,
            "fusion.cq1_w": f.cq1_w, "fusion.cq1_b": f.cq1_b,
            "fusion.cq2_w": f.cq2_w, "fusion.cq2_b": f.cq2_b,
            "fusion.w_q": f.w_q, "fusion.w_k": f.w_k, "fusion.w_v": f.w_v,
            "mil_att_w": self.mil_att_w, "mil_att_b": self.mil_att_b,
            "mil_gate_w": self.mil_gate_w, "mil_gate_b": self.mil_gate_b,
            "head_w": self.head_w, "head_b": self.head_b,
        }

    def with_values(self, values: dict[str, Matrix]) -> "ModelParams":
        """Same config/variant with the named tensors replaced."""
        current = self.to_dict()
        missing = set(current) - set(values)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        v = values
        return ModelParams(
            config=self.config,
            variant=self.variant,
            screening=sc.ScreeningParams(
                v["screening.fc1_w"], v["screening.fc1_b"],
                v["screening.fc2_w"], v["screening.fc2_b"],
                v["screening.gate_w"], v["screening.gate_b"],
            ),
            fusion=fu.FusionParams(
                v["fusion.cq1_w"], v["fusion.cq1_b"],
                v["fusion.cq2_w"], v["fusion.cq2_b"],
                v["fusion.w_q"], v["fusion.w_k"], v["fusion.w_v"],
            ),
            mil_att_w=v["mil_att_w"], mil_att_b=v["mil_att_b"],
            mil_gate_w=v["mil_gate_w"], mil_gate_b=v["mil_gate_b"],
            head_w=v["head_w"], head_b=v["head_b"],
        )

    def copy(self) -> "ModelParams":
        return self.with_values({k: Matrix(v.data.copy()) for k, v in self.to_dict().items()})


@dataclass
class Diagnostics:
    """Intermediate quantities exposed for inspection and invariant tests."""

    gate: Matrix | None
    query_attention: Matrix | None
    shared_attention: Matrix | None
    pooling_weights: Matrix
    grid: list[int] | None


def _lift(params: ModelParams) -> tuple[dict[str, Node], sc.ScreeningParams, fu.FusionParams, dict]:
    """Wrap every tensor in a trainable leaf and mirror the param structure."""
    leaves = {name: nm.param(m) for name, m in params.to_dict().items()}
    s = sc.ScreeningParams(
        leaves["screening.fc1_w"], leaves["screening.fc1_b"],
        leaves["screening.fc2_w"], leaves["screening.fc2_b"],
        leaves["screening.gate_w"], leaves["screening.gate_b"],
    )
    f = fu.FusionParams(
        leaves["fusion.cq1_w"], leaves["fusion.cq1_b"],
        leaves["fusion.cq2_w"], leaves["fusion.cq2_b"],
        leaves["fusion.w_q"], leaves["fusion.w_k"], leaves["fusion.w_v"],
    )
    head = {
        "mil_att_w": leaves["mil_att_w"], "mil_att_b": leaves["mil_att_b"],
        "mil_gate_w": leaves["mil_gate_w"], "mil_gate_b": leaves["mil_gate_b"],
        "head_w": leaves["head_w"], "head_b": leaves["head_b"],
    }
    return leaves, s, f, head


def forward_graph(
    bag: FeatureBag,
    screening_params: sc.ScreeningParams,
    fusion_params: fu.FusionParams,
    head_params: dict,
    config: ModelConfig,
    variant: Variant,
    grid: list[int] | None,
) -> tuple[Node, Diagnostics]:
    """Build the forward graph for one bag. ``grid`` is required iff use_ds."""
    x = nm.constant(bag.features)
    pooled_mean = nm.mean_rows(x) if (variant.use_ds or variant.use_cf) else None

    gate = None
    if variant.use_ds:
        enc = sc.encode_grid_node(grid, screening_params)
        rep = nm.repeat_rows(pooled_mean, bag.n_patches)
        gate_in = nm.concat_cols(rep, enc)
        xi = nm.sigmoid(nm.affine(gate_in, screening_params.gate_w, screening_params.gate_b))
        s = nm.add(nm.mul(x, xi), x)
        gate = xi
    else:
        s = x

    attn_q = attn_sh = None
    if variant.use_cf:
        c = nm.constant(bag.clinical)
        u = nm.concat_cols(c, pooled_mean)
        t = nm.relu(nm.affine(u, fusion_params.cq1_w, fusion_params.cq1_b))
        z = nm.affine(t, fusion_params.cq2_w, fusion_params.cq2_b)
        tokens = nm.reshape(z, config.clinical_dim, config.feature_dim)
        if config.scale_pooling:
            tokens = nm.scale(tokens, 1.0 / math.sqrt(config.feature_dim))
        q = nm.matmul(x, fusion_params.w_q)
        k = nm.matmul(x, fusion_params.w_k)
        v = nm.matmul(x, fusion_params.w_v)
        v_c, attn_q = fu.clinical_query_attention_node(tokens, k, v)
        h, attn_sh = fu.clinical_shared_attention_node(q, tokens, v_c)
        h_f = fu.fuse_nodes(s, h)
    else:
        h_f = s

    att = nm.tanh(nm.affine(h_f, head_params["mil_att_w"], head_params["mil_att_b"]))
    gatep = nm.sigmoid(nm.affine(h_f, head_params["mil_gate_w"], head_params["mil_gate_b"]))
    scores = nm.row_sums(nm.mul(att, gatep))
    weights = nm.softmax_rows(nm.transpose(scores))
    pooled = nm.matmul(weights, h_f)
    logits = nm.affine(pooled, head_params["head_w"], head_params["head_b"])

    diag = Diagnostics(
        gate=gate.value if gate is not None else None,
        query_attention=attn_q.value if attn_q is not None else None,
        shared_attention=attn_sh.value if attn_sh is not None else None,
        pooling_weights=weights.value,
        grid=list(grid) if grid is not None else None,
    )
    return logits, diag


def _check_bag(bag: FeatureBag, config: ModelConfig) -> None:
    if bag.features.cols != config.feature_dim:
        raise ConfigError(
            f"bag feature dim {bag.features.cols} != configured {config.feature_dim}"
        )
    if bag.clinical.cols != config.clinical_dim:
        raise ConfigError(
            f"clinical dim {bag.clinical.cols} != configured {config.clinical_dim}"
        )
    row = bag.clinical.data[0]
    if row.min() < 0.0 or row.max() > 1.0:
        raise ContractError("clinical vector must be normalized into [0, 1]")


def make_grid(bag: FeatureBag, mode: str, rng: np.random.Generator | None) -> list[int]:
    """Training draws a fresh random permutation; evaluation uses identity."""
    if mode == "train":
        if rng is None:
            raise ContractError("train mode needs an rng stream for the grid")
        return sc.sample_grid(bag.n_patches, rng)
    if mode == "eval":
        return sc.sample_grid(bag.n_patches, None)
    raise ContractError(f"unknown mode {mode!r}")


def forward(
    bag: FeatureBag,
    params: ModelParams,
    variant: Variant | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[Matrix, Diagnostics]:
    """Logits for one bag, without building a trainable graph."""
    variant = variant if variant is not None else params.variant
    _check_bag(bag, params.config)
    grid = make_grid(bag, mode, rng) if variant.use_ds else None
    logits, diag = forward_graph(
        bag, params.screening, params.fusion,
        {
            "mil_att_w": params.mil_att_w, "mil_att_b": params.mil_att_b,
            "mil_gate_w": params.mil_gate_w, "mil_gate_b": params.mil_gate_b,
            "head_w": params.head_w, "head_b": params.head_b,
        },
        params.config, variant, grid,
    )
    return logits.value, diag


def forward_loss_nodes(
    bag: FeatureBag,
    params: ModelParams,
    mode: str,
    rng: np.random.Generator | None,
) -> tuple[Node, dict[str, Node], Diagnostics]:
    """Trainable graph for one bag: (loss node, parameter leaves, diagnostics)."""
    _check_bag(bag, params.config)
    leaves, s, f, head = _lift(params)
    grid = make_grid(bag, mode, rng) if params.variant.use_ds else None
    logits, diag = forward_graph(bag, s, f, head, params.config, params.variant, grid)
    return nm.cross_entropy(logits, bag.label), leaves, diag


def predict_proba(logits: Matrix) -> Matrix:
    """Softmax over the four class logits."""
    return nm.softmax_rows(nm.constant(logits)).value


def loss(logits: Matrix, label: int) -> float:
    """Cross-entropy of one logit row against the true class."""
    return float(nm.cross_entropy(nm.constant(logits), label).value.data[0, 0])


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path: Path | str, params: ModelParams, extra: dict | None = None) -> None:
    """Versioned container: JSON config echo plus named float32 tensors."""
    cfg = params.config
    header = {
        "feature_dim": cfg.feature_dim,
        "clinical_dim": cfg.clinical_dim,
        "d_k": cfg.d_k,
        "attn_hidden": cfg.attn_hidden,
        "scale_pooling": cfg.scale_pooling,
        "variant": params.variant.name,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = params.to_dict()
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<II", _CKPT_VERSION, len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        m = tensors[name]
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<II", m.rows, m.cols)
        blob += m.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: Path | str) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise BagTruncatedError(f"checkpoint ends inside {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != _CKPT_MAGIC:
        raise BagMagicError("not a checkpoint file")
    version, header_len = struct.unpack("<II", take(8, "header"))
    if version != _CKPT_VERSION:
        raise BagVersionError(f"unsupported checkpoint version {version}")
    header = json.loads(take(header_len, "config echo").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    values: dict[str, Matrix] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        rows, cols = struct.unpack("<II", take(8, "tensor dims"))
        data = np.frombuffer(take(4 * rows * cols, f"tensor {name}"), dtype="<f4")
        values[name] = Matrix(data.astype(np.float64).reshape(rows, cols))

    config = ModelConfig(
        feature_dim=int(header["feature_dim"]),
        clinical_dim=int(header["clinical_dim"]),
        d_k=int(header["d_k"]),
        attn_hidden=int(header["attn_hidden"]),
        scale_pooling=bool(header["scale_pooling"]),
    )
    variant = Variant.from_name(header["variant"])
    template = ModelParams.init(config, variant, seed=0)
    return template.with_values(values), header.get("extra", {})
