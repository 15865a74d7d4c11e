"""Two-stage transformer over [repository rows; utterance rows].

Each stage is a single-block encoder: input projection, sinusoidal position
encoding, multi-head self-attention with a residual and post-layernorm, a
feed-forward layer with a second residual and post-layernorm, then a two
layer relu head applied to the token rows only.  Stage one emits two logits
per token (span begin / span inside); stage two emits an entity-ID block, a
property block and a membership block per token.  All math runs in float64
on the autodiff tape, so training gradients are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .encoding import FeatureLayout
from .errors import CheckpointError, GradientError, ShapeError

CHECKPOINT_FORMAT = "turntrack-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    d_model: int = 288
    num_heads: int = 9
    ffn_hidden: int = 800
    head_hidden: int = 800
    use_positional: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by {self.num_heads} heads")

    @property
    def stage1_out(self) -> int:
        return 2

    @property
    def stage2_out(self) -> int:
        return 2 * self.layout.capacity + self.layout.num_properties


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange((d_model + 1) // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * idx / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def _stage_shapes(cfg: ModelConfig, in_dim: int, out_dim: int) -> list[tuple[str, tuple]]:
    d, f, h = cfg.d_model, cfg.ffn_hidden, cfg.head_hidden
    return [
        ("proj_w", (in_dim, d)), ("proj_b", (d,)),
        ("wq", (d, d)), ("bq", (d,)),
        ("wk", (d, d)), ("bk", (d,)),
        ("wv", (d, d)), ("bv", (d,)),
        ("wo", (d, d)), ("bo", (d,)),
        ("ln1_g", (d,)), ("ln1_b", (d,)),
        ("ffn_w1", (d, f)), ("ffn_b1", (f,)),
        ("ffn_w2", (f, d)), ("ffn_b2", (d,)),
        ("ln2_g", (d,)), ("ln2_b", (d,)),
        ("head_w1", (d, h)), ("head_b1", (h,)),
        ("head_w2", (h, out_dim)), ("head_b2", (out_dim,)),
    ]


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    shapes = [("s1." + n, s)
              for n, s in _stage_shapes(cfg, cfg.layout.total_dim, cfg.stage1_out)]
    shapes += [("s2." + n, s)
               for n, s in _stage_shapes(cfg, cfg.layout.stage2_dim, cfg.stage2_out)]
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, ad.Tensor]:
    """Xavier-uniform weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, ad.Tensor] = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith("_g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.parameter(data)
    return params


def _stage_forward(params: dict[str, ad.Tensor], prefix: str, x: np.ndarray,
                   num_refs: int, cfg: ModelConfig,
                   collect: dict | None = None) -> ad.Tensor:
    """Run one stage on combined rows x; return logits for the token rows."""
    p = lambda name: params[prefix + name]
    length = x.shape[0]
    heads = cfg.num_heads
    dh = cfg.d_model // heads

    h0 = ad.add(ad.matmul(ad.as_tensor(x), p("proj_w")), p("proj_b"))
    if cfg.use_positional:
        h0 = ad.add(h0, ad.as_tensor(sinusoidal_positions(length, cfg.d_model)))

    def split_heads(t: ad.Tensor) -> ad.Tensor:
        return ad.transpose(ad.reshape(t, (length, heads, dh)), (1, 0, 2))

    q = split_heads(ad.add(ad.matmul(h0, p("wq")), p("bq")))
    k = split_heads(ad.add(ad.matmul(h0, p("wk")), p("bk")))
    v = split_heads(ad.add(ad.matmul(h0, p("wv")), p("bv")))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = ad.softmax_rows(scores)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)),
                       (length, cfg.d_model))
    attn_out = ad.add(ad.matmul(mixed, p("wo")), p("bo"))
    h1 = ad.layer_norm(ad.add(h0, attn_out), p("ln1_g"), p("ln1_b"))

    ffn = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(h1, p("ffn_w1")), p("ffn_b1"))),
                           p("ffn_w2")), p("ffn_b2"))
    h2 = ad.layer_norm(ad.add(h1, ffn), p("ln2_g"), p("ln2_b"))

    tokens = ad.slice_rows(h2, num_refs, length)
    hidden = ad.relu(ad.add(ad.matmul(tokens, p("head_w1")), p("head_b1")))
    logits = ad.add(ad.matmul(hidden, p("head_w2")), p("head_b2"))
    if collect is not None:
        collect["attention"] = attn.data.copy()
        collect["encoded"] = h2.data.copy()
    return logits


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, ad.Tensor] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def stage1_tensor(self, r_rows: np.ndarray, u_rows: np.ndarray,
                      collect: dict | None = None) -> ad.Tensor:
        lay = self.config.layout
        if r_rows.shape[1] != lay.total_dim or u_rows.shape[1] != lay.total_dim:
            raise ShapeError(
                f"stage-one rows must have width {lay.total_dim}, got "
                f"{r_rows.shape[1]} and {u_rows.shape[1]}")
        x = np.vstack([r_rows, u_rows])
        return _stage_forward(self.params, "s1.", x, r_rows.shape[0],
                              self.config, collect)

    def stage2_tensor(self, r_aug: np.ndarray, u_aug: np.ndarray,
                      collect: dict | None = None) -> ad.Tensor:
        lay = self.config.layout
        if r_aug.shape[1] != lay.stage2_dim or u_aug.shape[1] != lay.stage2_dim:
            raise ShapeError(
                f"stage-two rows must have width {lay.stage2_dim}, got "
                f"{r_aug.shape[1]} and {u_aug.shape[1]}")
        x = np.vstack([r_aug, u_aug])
        return _stage_forward(self.params, "s2.", x, r_aug.shape[0],
                              self.config, collect)

    def stage1_logits(self, r_rows, u_rows, context=None) -> np.ndarray:
        return self.stage1_tensor(r_rows, u_rows).data

    def stage2_logits(self, r_aug, u_aug, context=None) -> np.ndarray:
        return self.stage2_tensor(r_aug, u_aug).data

    def zero_grads(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        grads = {}
        for name, tensor in self.params.items():
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if not np.all(np.isfinite(g)):
                raise GradientError(name)
            grads[name] = g
        return grads

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


# ---------------------------------------------------------------------------
# checkpoints: a one-line JSON manifest, a newline, then raw little-endian
# float64 tensor data concatenated in manifest order
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: TransformerModel) -> None:
    cfg = model.config
    names = [name for name, _ in parameter_shapes(cfg)]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": {
            "capacity": cfg.layout.capacity,
            "history": cfg.layout.history,
            "num_signals": cfg.layout.num_signals,
            "word_dim": cfg.layout.word_dim,
            "context_dim": cfg.layout.context_dim,
        },
        "d_model": cfg.d_model,
        "num_heads": cfg.num_heads,
        "ffn_hidden": cfg.ffn_hidden,
        "head_hidden": cfg.head_hidden,
        "use_positional": cfg.use_positional,
        "seed": cfg.seed,
        "tensors": [[name, list(model.params[name].shape)] for name in names],
    }
    with open(path, "wb") as handle:
        handle.write(json.dumps(manifest, separators=(",", ":")).encode())
        handle.write(b"\n")
        for name in names:
            handle.write(np.ascontiguousarray(
                model.params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> TransformerModel:
    with open(path, "rb") as handle:
        blob = handle.read()
    sep = blob.find(b"\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(blob[:sep].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {manifest.get('version')}")
    cfg = ModelConfig(
        layout=FeatureLayout(**manifest["layout"]),
        d_model=manifest["d_model"],
        num_heads=manifest["num_heads"],
        ffn_hidden=manifest["ffn_hidden"],
        head_hidden=manifest["head_hidden"],
        use_positional=manifest["use_positional"],
        seed=manifest["seed"],
    )
    expected = dict(parameter_shapes(cfg))
    params: dict[str, ad.Tensor] = {}
    offset = sep + 1
    for name, shape in manifest["tensors"]:
        shape = tuple(shape)
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        data = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
        params[name] = ad.parameter(data)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    return TransformerModel(cfg, params)
