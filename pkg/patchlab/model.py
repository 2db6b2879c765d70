# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Decoder-only transformer with a recording forward pass.

Pre-norm blocks (RMSNorm), multi-head causal attention with rotary position
embedding, SiLU-gated MLP and an unbiased unembedding. All math is float32.
The forward pass optionally records every intermediate activation into a
Trace and lets a patch plan rewrite activations at named sites.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F
from defaults import Defaults
from errors import ConfigError, NonFiniteError, ShapeError, TokenError

SITES = ("resid_pre", "attn_pattern", "attn_out", "mlp_neuron", "mlp_out", "resid_post")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_seq: int
    norm_eps: float = Defaults.NORM_EPS
    rope_base: float = Defaults.ROPE_BASE

    known_keys = {
        'n_layers', 'n_heads', 'd_model', 'd_head', 'd_mlp',
        'vocab_size', 'max_seq', 'norm_eps', 'rope_base',
    }

    def __post_init__(self):
        for name in ('n_layers', 'n_heads', 'd_model', 'd_head', 'd_mlp', 'vocab_size', 'max_seq'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model config '{name}' must be a positive integer, got {value!r}")
        if self.n_heads % 2 != 0:
            raise ConfigError(f"n_heads must be even so both head parities exist, got {self.n_heads}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be >= 2, got {self.max_seq}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")

    @property
    def rotary_dims(self):
        return self.d_head - self.d_head % 2

    def tensor_shapes(self):
        """Tensor names and shapes in declaration (serialization) order."""
        D, V = self.d_model, self.vocab_size
        shapes = [("embed", (V, D))]
        for layer in range(self.n_layers):
            p = f"blocks.{layer}."
            shapes += [
                (p + "attn_norm", (D,)),
                (p + "w_q", (D, D)),
                (p + "w_k", (D, D)),
                (p + "w_v", (D, D)),
                (p + "w_o", (D, D)),
                (p + "mlp_norm", (D,)),
                (p + "w_in", (D, self.d_mlp)),
                (p + "w_gate", (D, self.d_mlp)),
                (p + "w_out", (self.d_mlp, D)),
            ]
        shapes += [("final_norm", (D,)), ("unembed", (D, V))]
        return shapes

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        unknown = set(d) - ModelConfig.known_keys
        if unknown:
            raise ConfigError("Unknown model config keys: " + ", ".join(sorted(unknown)))
        return ModelConfig(**d)


def toy_config(vocab_size, **overrides):
    values = dict(
        n_layers=Defaults.N_LAYERS,
        n_heads=Defaults.N_HEADS,
        d_model=Defaults.D_MODEL,
        d_mlp=Defaults.D_MLP,
        vocab_size=vocab_size,
        max_seq=Defaults.MAX_SEQ,
    )
    values.update(overrides)
    if "d_head" not in overrides:
        values["d_head"] = values["d_model"] // values["n_heads"]
    return ModelConfig(**values)


@dataclass
class Provenance:
    seed: int = Defaults.SEED
    steps: int = 0
    final_loss: Optional[float] = None
    digest: str = ""
    extra: dict = field(default_factory=dict)


class Checkpoint(object):
    def __init__(self, config, tensors, provenance=None):
        self.config = config
        expected = config.tensor_shapes()
        missing = [name for name, _ in expected if name not in tensors]
        if missing:
            raise ShapeError(f"checkpoint is missing tensors: {', '.join(missing)}")
        extra = set(tensors) - {name for name, _ in expected}
        if extra:
            raise ShapeError(f"checkpoint has unexpected tensors: {', '.join(sorted(extra))}")
        self.tensors = {}
        for name, shape in expected:
            t = tensors[name]
            if tuple(t.shape) != shape:
                raise ShapeError(f"tensor '{name}' has shape {tuple(t.shape)}, config requires {shape}")
            self.tensors[name] = t.detach().to(torch.float32).contiguous()
        self.provenance = provenance if provenance is not None else Provenance()
        if not self.provenance.digest:
            self.provenance.digest = self.content_digest()

    def __getitem__(self, name):
        return self.tensors[name]

    def content_digest(self):
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8"))
        for name, _ in self.config.tensor_shapes():
            h.update(name.encode("utf-8"))
            h.update(self.tensors[name].numpy().astype("<f4").tobytes())
        return h.hexdigest()

    @property
    def digest(self):
        return self.provenance.digest


def init_checkpoint(config, seed=Defaults.SEED):
    gen = torch.Generator().manual_seed(seed)
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in config.tensor_shapes():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            tensors[name] = torch.ones(shape)
        elif leaf == "embed":
            tensors[name] = torch.randn(shape, generator=gen)
        else:
            std = 1.0 / math.sqrt(shape[0])
            if leaf in ("w_o", "w_out"):
                std *= out_scale
            tensors[name] = torch.randn(shape, generator=gen) * std
    return Checkpoint(config, tensors, Provenance(seed=seed))


@dataclass(frozen=True)
class LayerRecord:
    resid_pre: torch.Tensor      # seq x d_model
    attn_pattern: torch.Tensor   # n_heads x seq x seq
    attn_head_out: Optional[torch.Tensor]  # n_heads x seq x d_head, pre-projection
    attn_out: torch.Tensor       # seq x d_model
    mlp_act: torch.Tensor        # seq x d_mlp
    mlp_out: torch.Tensor        # seq x d_model
    resid_post: torch.Tensor     # seq x d_model
    resid_scale: torch.Tensor    # seq, RMS of resid_post


@dataclass(frozen=True)
class Trace:
    config: ModelConfig
    tokens: tuple
    layers: tuple
    final_norm_scale: torch.Tensor  # seq
    logits: torch.Tensor            # seq x vocab
    prompt_len: int

    @property
    def seq_len(self):
        return len(self.tokens)

    @property
    def final_position(self):
        return self.prompt_len - 1

    @property
    def has_head_outputs(self):
        return all(rec.attn_head_out is not None for rec in self.layers)

    def site(self, layer, name):
        if not 0 <= layer < len(self.layers):
            raise ShapeError(f"layer {layer} outside 0..{len(self.layers) - 1}")
        if name == "mlp_neuron":
            name = "mlp_act"
        value = getattr(self.layers[layer], name, None)
        if value is None:
            raise ShapeError(f"trace does not hold site '{name}' at layer {layer}")
        return value


def softmax_row(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    if v.ndim != 1 or v.numel() == 0:
        raise ShapeError("softmax_row expects a non-empty vector")
    if not torch.isfinite(v).all():
        raise NonFiniteError(f"softmax_row got non-finite scores: {v.tolist()}")
    e = torch.exp(v - v.max())
    return (e / e.sum()).to(torch.float32)


def _tensors_of(weights):
    if isinstance(weights, Checkpoint):
        return weights.tensors
    if isinstance(weights, Mapping):
        return weights
    raise TypeError(f"expected a Checkpoint or a mapping of tensors, got {type(weights).__name__}")


def _check_config(config, weights):
    if isinstance(weights, Checkpoint) and weights.config != config:
        raise ConfigError("model config does not match the checkpoint's config")


def _check_tokens(config, tokens):
    if len(tokens) == 0:
        raise TokenError("token sequence is empty")
    if len(tokens) > config.max_seq:
        raise TokenError(f"sequence of {len(tokens)} tokens exceeds max_seq {config.max_seq}")
    for t in tokens:
        if not 0 <= int(t) < config.vocab_size:
            raise TokenError(f"token id {t} outside vocabulary of {config.vocab_size}")


def _rms_scale(x, eps):
    return torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def _rotary_tables(config, seq_len):
    half = config.rotary_dims // 2
    inv_freq = config.rope_base ** (-torch.arange(half, dtype=torch.float64) * 2.0 / config.rotary_dims)
    angles = torch.arange(seq_len, dtype=torch.float64)[:, None] * inv_freq[None, :]
    return torch.cos(angles).to(torch.float32), torch.sin(angles).to(torch.float32)


def _rotate(x, cos, sin, config):
    # x: batch x seq x heads x d_head
    rot = config.rotary_dims
    if rot == 0:
        return x
    half = rot // 2
    cos = cos[None, :, None, :]
    sin = sin[None, :, None, :]
    x1, x2, rest = x[..., :half], x[..., half:rot], x[..., rot:]
    return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin, rest], dim=-1)


def _patch(plan, layer, site, value, seq_len, prompt_len):
    if plan is None or not plan.touches(layer, site):
        return value
    if value.shape[0] != 1:
        raise ShapeError("patched forward passes run with batch size 1")
    return plan.apply(layer, site, value[0], seq_len, prompt_len).unsqueeze(0)


def _run(config, tensors, tokens, plan=None, record=False, keep_head_out=True, prompt_len=None, pattern_hook=None):
    B, T = tokens.shape
    H, dh = config.n_heads, config.d_head
    eps = config.norm_eps
    prompt_len = T if prompt_len is None else prompt_len
    causal = torch.ones(T, T, dtype=torch.bool).triu(1)
    cos, sin = _rotary_tables(config, T)
    records = []

    x = tensors["embed"][tokens]
    for layer in range(config.n_layers):
        p = f"blocks.{layer}."
        x = _patch(plan, layer, "resid_pre", x, T, prompt_len)
        resid_pre = x

        h = x / _rms_scale(x, eps) * tensors[p + "attn_norm"]
        q = _rotate((h @ tensors[p + "w_q"]).view(B, T, H, dh), cos, sin, config)
        k = _rotate((h @ tensors[p + "w_k"]).view(B, T, H, dh), cos, sin, config)
        v = (h @ tensors[p + "w_v"]).view(B, T, H, dh)
        scores = torch.einsum("bqhd,bkhd->bhqk", q, k) / math.sqrt(dh)
        pattern = torch.softmax(scores.masked_fill(causal, float("-inf")), dim=-1)
        if pattern_hook is not None:
            pattern = pattern_hook(layer, pattern)
        pattern = _patch(plan, layer, "attn_pattern", pattern, T, prompt_len)
        z = torch.einsum("bhqk,bkhd->bqhd", pattern, v)
        attn_out = z.reshape(B, T, H * dh) @ tensors[p + "w_o"]
        attn_out = _patch(plan, layer, "attn_out", attn_out, T, prompt_len)

        mid = x + attn_out
        h2 = mid / _rms_scale(mid, eps) * tensors[p + "mlp_norm"]
        act = F.silu(h2 @ tensors[p + "w_gate"]) * (h2 @ tensors[p + "w_in"])
        act = _patch(plan, layer, "mlp_neuron", act, T, prompt_len)
        mlp_out = act @ tensors[p + "w_out"]
        mlp_out = _patch(plan, layer, "mlp_out", mlp_out, T, prompt_len)

        resid_post = mid + mlp_out
        resid_post = _patch(plan, layer, "resid_post", resid_post, T, prompt_len)

        if record:
            records.append(LayerRecord(
                resid_pre=resid_pre[0],
                attn_pattern=pattern[0],
                attn_head_out=z[0].permute(1, 0, 2).contiguous() if keep_head_out else None,
                attn_out=attn_out[0],
                mlp_act=act[0],
                mlp_out=mlp_out[0],
                resid_post=resid_post[0],
                resid_scale=_rms_scale(resid_post[0], eps)[:, 0],
            ))
        x = resid_post

    scale = _rms_scale(x, eps)
    logits = (x / scale * tensors["final_norm"]) @ tensors["unembed"]
    return logits, records, scale[..., 0]


def batched_logits(config, tensors, tokens, pattern_hook=None):
    """
    Logits for a batch of equal-length (right padded) sequences; keeps
    autograd. pattern_hook(layer, pattern) may return a replacement for the
    batch x heads x seq x seq attention pattern of any layer.
    """
    return _run(config, tensors, tokens, pattern_hook=pattern_hook)[0]


def forward_trace(config, weights, tokens, plan=None, prompt_len=None, keep_head_out=True):
    _check_config(config, weights)
    _check_tokens(config, tokens)
    if prompt_len is None:
        prompt_len = len(tokens)
    if not 1 <= prompt_len <= len(tokens):
        raise TokenError(f"prompt length {prompt_len} outside 1..{len(tokens)}")
    if plan is not None:
        plan.validate(config)
    with torch.no_grad():
        logits, records, scale = _run(
            config, _tensors_of(weights), torch.tensor([list(tokens)], dtype=torch.long),
            plan=plan, record=True, keep_head_out=keep_head_out, prompt_len=prompt_len,
        )
    if not torch.isfinite(logits).all():
        raise NonFiniteError("forward pass produced non-finite logits")
    return Trace(
        config=config,
        tokens=tuple(int(t) for t in tokens),
        layers=tuple(records),
        final_norm_scale=scale[0],
        logits=logits[0],
        prompt_len=prompt_len,
    )


def generate_greedy(config, weights, prompt, max_new, end_token=None, plan=None):
    """Greedy continuation of prompt; ties go to the lowest token id, end_token is not appended."""
    _check_config(config, weights)
    _check_tokens(config, prompt)
    if len(prompt) + max_new > config.max_seq:
        raise TokenError(f"prompt of {len(prompt)} tokens leaves no room for {max_new} new tokens (max_seq {config.max_seq})")
    if plan is not None:
        plan.validate(config)
    tensors = _tensors_of(weights)
    seq = [int(t) for t in prompt]
    with torch.no_grad():
        for _ in range(max_new):
            logits, _, _ = _run(config, tensors, torch.tensor([seq], dtype=torch.long), plan=plan, prompt_len=len(prompt))
            if not torch.isfinite(logits[0, -1]).all():
                raise NonFiniteError("generation produced non-finite logits")
            nxt = int(torch.argmax(logits[0, -1]))
            if end_token is not None and nxt == end_token:
                break
            seq.append(nxt)
    return seq


def unembed(hidden, weights, norm_scale):
    """Final normalization with the supplied RMS divisor, then the unembedding map."""
    norm_scale = float(norm_scale)
    if not (norm_scale > 0 and math.isfinite(norm_scale)):
        raise NonFiniteError(f"norm_scale must be positive and finite, got {norm_scale}")
    tensors = _tensors_of(weights)
    hidden = torch.as_tensor(hidden, dtype=torch.float32)
    return (hidden / norm_scale * tensors["final_norm"]) @ tensors["unembed"]
