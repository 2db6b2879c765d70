# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Logit lens, direct logit attribution, KL divergence and differential
neuron scores over recorded traces.

Lens layer indices run 0..n_layers: 0 reads the token embedding, l >= 1
reads resid_post of block l-1, so n_layers is the final residual stream.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from defaults import Defaults
from errors import ConfigError, ShapeError
from model import unembed
from statsreport import Curve, TableReport

logger = logging.getLogger("patchlab")


def _position(trace, position):
    pos = trace.final_position if position is None else position
    if not 0 <= pos < trace.seq_len:
        raise ShapeError(f"position {pos} outside 0..{trace.seq_len - 1}")
    return pos


def lens_hidden(trace, layer, position=None):
    n = trace.config.n_layers
    if not 0 <= layer <= n:
        raise ShapeError(f"lens layer {layer} outside 0..{n}")
    pos = _position(trace, position)
    if layer == 0:
        return trace.layers[0].resid_pre[pos]
    return trace.layers[layer - 1].resid_post[pos]


def lens_logits(trace, weights, layer, position=None):
    hidden = lens_hidden(trace, layer, position)
    scale = torch.sqrt(hidden.pow(2).mean() + trace.config.norm_eps)
    return unembed(hidden, weights, scale)


def logit_lens(trace, weights, layer, position=None):
    """Vocabulary distribution read off the residual stream after `layer` blocks."""
    return torch.softmax(lens_logits(trace, weights, layer, position), dim=-1)


@dataclass(frozen=True)
class LensPoint:
    layer: int
    prob: float
    top_token: int
    top_prob: float


@dataclass(frozen=True)
class LensCurve:
    token: int
    position: int
    points: tuple

    def probs(self):
        return [p.prob for p in self.points]

    def first_top_layer(self):
        for p in self.points:
            if p.top_token == self.token:
                return p.layer
        return None


def lens_curve(trace, weights, token, position=None):
    pos = _position(trace, position)
    points = []
    for layer in range(trace.config.n_layers + 1):
        dist = logit_lens(trace, weights, layer, pos)
        top = int(torch.argmax(dist))
        points.append(LensPoint(layer, float(dist[token]), top, float(dist[top])))
    return LensCurve(token, pos, tuple(points))


def divergence_layer(good, bad):
    """
    First layer where the good curve has its token at top-1 while the bad
    curve does not; None if that never happens.
    """
    for g, b in zip(good.points, bad.points):
        if g.top_token == good.token and b.top_token != bad.token:
            return g.layer
    return None


def lens_report(curves, metadata=None, symbols=None):
    """curves: mapping of label -> LensCurve"""
    rows = []
    for label, curve in curves.items():
        for p in curve.points:
            row = {"curve": label, "layer": p.layer, "token": curve.token, "position": curve.position,
                   "prob": p.prob, "top_token": p.top_token, "top_prob": p.top_prob}
            if symbols is not None:
                row["top_symbol"] = symbols[p.top_token]
            rows.append(row)
    plots = [Curve(name=label, xs=[p.layer for p in c.points], ys=c.probs(), step=False,
                   xlabel="layer", ylabel="probability") for label, c in curves.items()]
    extra = {}
    if len(curves) == 2:
        good, bad = curves.values()
        extra["divergence_layer"] = divergence_layer(good, bad)
    return TableReport(kind="lens", table=rows, metadata=metadata or {}, extra=extra, plots=plots)


@dataclass
class Attribution:
    position: int
    names: list          # "embed", then "L{l}.attn", "L{l}.mlp" per layer
    components: torch.Tensor  # len(names) x vocab
    logits: torch.Tensor      # vocab, the trace's own final logits

    def total(self):
        return self.components.sum(dim=0)

    def per_layer(self):
        """n_layers x vocab: attention plus MLP contribution of each block."""
        return self.components[1:].reshape(-1, 2, self.components.shape[-1]).sum(dim=1)


def layer_attribution(trace, weights, position=None):
    """
    Split the final logits at position into the embedding's and every
    sublayer's direct contribution. All components share the final RMS
    scale, so they add back up to the logits.
    """
    pos = _position(trace, position)
    scale = trace.final_norm_scale[pos]
    parts = [trace.layers[0].resid_pre[pos]]
    names = ["embed"]
    for layer, rec in enumerate(trace.layers):
        parts += [rec.attn_out[pos], rec.mlp_out[pos]]
        names += [f"L{layer}.attn", f"L{layer}.mlp"]
    components = torch.stack([unembed(p, weights, scale) for p in parts])
    return Attribution(pos, names, components, trace.logits[pos])


def kl_divergence(p, q, floor=Defaults.KL_FLOOR):
    """KL(p || q) in nats with q floored; terms with p == 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"KL support mismatch: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ShapeError("KL inputs must be nonnegative")
    q = np.maximum(q, floor)
    mask = p > 0
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return max(kl, 0.0)


def attribution_kl(attr_a, attr_b):
    """Per-layer KL between the softmaxed direct contributions of two runs."""
    a, b = attr_a.per_layer(), attr_b.per_layer()
    if a.shape != b.shape:
        raise ShapeError("attributions come from different model shapes")
    return [kl_divergence(torch.softmax(a[i].double(), -1).numpy(), torch.softmax(b[i].double(), -1).numpy())
            for i in range(a.shape[0])]


def attribution_report(attr_a, attr_b, labels=("a", "b"), tokens=None, metadata=None):
    kls = attribution_kl(attr_a, attr_b)
    la, lb = attr_a.per_layer(), attr_b.per_layer()
    rows = []
    for layer, kl in enumerate(kls):
        row = {"layer": layer, "kl": kl}
        for token in tokens or ():
            row[f"{labels[0]}_logit_{token}"] = float(la[layer, token])
            row[f"{labels[1]}_logit_{token}"] = float(lb[layer, token])
        rows.append(row)
    max_layer = int(np.argmax(kls)) if kls else None
    return TableReport(
        kind="attribution",
        table=rows,
        metadata=metadata or {},
        extra={"max_kl_layer": max_layer, "max_kl": kls[max_layer] if kls else None, "labels": list(labels)},
        plots=[Curve(name="KL per layer", xs=list(range(len(kls))), ys=kls, step=False, xlabel="layer", ylabel="KL (nats)")],
    )


@dataclass(frozen=True)
class NeuronScore:
    layer: int
    neuron: int
    score: float

    def to_dict(self):
        return asdict(self)


def differential_scores(bad, good, layers=None, position=None):
    """
    bad - good activation for every MLP neuron in layers, highest first
    (ties by layer, then index). position None uses each trace's final
    prompt position.
    """
    if bad.config != good.config:
        raise ConfigError("differential scores need traces from the same model config")
    layers = range(bad.config.n_layers) if layers is None else layers
    pos_bad, pos_good = _position(bad, position), _position(good, position)
    scores = []
    for layer in layers:
        if not 0 <= layer < bad.config.n_layers:
            raise ShapeError(f"layer {layer} outside 0..{bad.config.n_layers - 1}")
        diff = bad.layers[layer].mlp_act[pos_bad] - good.layers[layer].mlp_act[pos_good]
        scores += [NeuronScore(layer, i, float(v)) for i, v in enumerate(diff.tolist())]
    return sorted(scores, key=lambda s: (-s.score, s.layer, s.neuron))


def hijacker_set(scores, size=Defaults.HIJACKER_SIZE):
    """The `size` highest positively scored neurons as (layer, index) pairs."""
    return [(s.layer, s.neuron) for s in scores if s.score > 0][:size]


def neuron_activations(trace, neurons, position=None):
    pos = _position(trace, position)
    return [float(trace.layers[layer].mlp_act[pos, index]) for layer, index in neurons]


def scores_report(scores, top=Defaults.HIJACKER_SIZE * 4, metadata=None, extra=None):
    rows = [s.to_dict() for s in scores[:top]]
    return TableReport(kind="diff_scores", table=rows, metadata=metadata or {},
                       extra={"hijackers": [list(n) for n in hijacker_set(scores)], **(extra or {})})
