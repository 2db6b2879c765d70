"""Logit lens, direct attribution, KL divergence and differential scores."""

import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from errors import ShapeError
from lens import (LensCurve, LensPoint, attribution_kl, attribution_report, differential_scores,
                  divergence_layer, hijacker_set, kl_divergence, layer_attribution, lens_curve, lens_report,
                  logit_lens, neuron_activations)
from model import Checkpoint, forward_trace, init_checkpoint, toy_config

PROMPT = "<Q>9.8 9.11?<A>:"


def _set_neuron(trace, layer, neuron, value):
    rec = trace.layers[layer]
    act = rec.mlp_act.clone()
    act[trace.final_position, neuron] = value
    layers = list(trace.layers)
    layers[layer] = replace(rec, mlp_act=act)
    return replace(trace, layers=tuple(layers))


def test_final_layer_lens_is_softmax_of_logits(make_trace, tiny_ckpt):
    trace = make_trace(PROMPT)
    dist = logit_lens(trace, tiny_ckpt, tiny_ckpt.config.n_layers)
    assert torch.allclose(dist, torch.softmax(trace.logits[trace.final_position], dim=-1), atol=1e-5)
    assert float(dist.sum()) == pytest.approx(1.0, abs=1e-5)


def test_uniform_unembedding_gives_uniform_lens(tiny_config, vocab):
    ckpt = init_checkpoint(tiny_config, seed=2)
    tensors = dict(ckpt.tensors)
    tensors["unembed"] = torch.zeros_like(tensors["unembed"])
    flat = Checkpoint(tiny_config, tensors)
    trace = forward_trace(tiny_config, flat, vocab.tokenize(PROMPT))
    for layer in range(tiny_config.n_layers + 1):
        dist = logit_lens(trace, flat, layer)
        assert torch.allclose(dist, torch.full_like(dist, 1.0 / len(vocab)))


def test_lens_layer_bounds(make_trace, tiny_ckpt):
    trace = make_trace(PROMPT)
    with pytest.raises(ShapeError):
        logit_lens(trace, tiny_ckpt, tiny_ckpt.config.n_layers + 1)
    with pytest.raises(ShapeError):
        logit_lens(trace, tiny_ckpt, 0, position=trace.seq_len)


def test_lens_curve_and_report(make_trace, tiny_ckpt, vocab):
    trace = make_trace(PROMPT)
    token = int(trace.logits[trace.final_position].argmax())
    curve = lens_curve(trace, tiny_ckpt, token)
    assert [p.layer for p in curve.points] == list(range(tiny_ckpt.config.n_layers + 1))
    assert curve.points[-1].top_token == token
    assert curve.first_top_layer() is not None
    report = lens_report({"qa": curve, "again": curve}, symbols=vocab.symbols)
    assert len(report.rows()) == 2 * (tiny_ckpt.config.n_layers + 1)
    # a curve never diverges from itself
    assert report.extra["divergence_layer"] is None


def test_attribution_is_additive(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    rng = np.random.default_rng(3)
    for _ in range(50):
        seed = int(rng.integers(1000))
        ckpt = init_checkpoint(config, seed=seed)
        tokens = rng.integers(0, len(vocab), size=int(rng.integers(1, 12))).tolist()
        trace = forward_trace(config, ckpt, tokens)
        position = int(rng.integers(len(tokens)))
        attr = layer_attribution(trace, ckpt, position)
        assert torch.allclose(attr.total(), trace.logits[position], atol=1e-3)


def test_attribution_components_for_one_layer(vocab):
    config = toy_config(len(vocab), n_layers=1, n_heads=2, d_model=8, d_head=4, d_mlp=8, max_seq=24)
    ckpt = init_checkpoint(config, seed=1)
    attr = layer_attribution(forward_trace(config, ckpt, vocab.tokenize(PROMPT)), ckpt)
    assert attr.names == ["embed", "L0.attn", "L0.mlp"]
    assert attr.per_layer().shape == (1, len(vocab))


def test_kl_examples():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))
    assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
    # q is floored rather than dividing by zero
    assert math.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))
    with pytest.raises(ShapeError):
        kl_divergence([0.5, 0.5], [1.0])


def test_kl_is_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        assert kl_divergence(p, q) >= 0.0


def test_attribution_report(make_trace, tiny_ckpt):
    a = layer_attribution(make_trace(PROMPT), tiny_ckpt)
    b = layer_attribution(make_trace("9.8 9.11? <ANS>:"), tiny_ckpt)
    kls = attribution_kl(a, b)
    assert len(kls) == tiny_ckpt.config.n_layers
    assert attribution_kl(a, a) == [0.0] * tiny_ckpt.config.n_layers
    report = attribution_report(a, b, labels=("qa", "simple"), tokens=[3])
    assert report.extra["max_kl_layer"] == int(np.argmax(kls))
    assert "qa_logit_3" in report.rows()[0]


def test_differential_scores(make_trace):
    trace = make_trace(PROMPT)
    same = differential_scores(trace, trace)
    assert all(s.score == 0.0 for s in same)
    assert hijacker_set(same) == []

    bad = _set_neuron(trace, 1, 3, 0.18)
    good = _set_neuron(trace, 1, 3, 0.12)
    scores = differential_scores(bad, good)
    assert scores[0].layer == 1 and scores[0].neuron == 3
    assert scores[0].score == pytest.approx(0.06, abs=1e-6)
    assert hijacker_set(scores) == [(1, 3)]
    reverse = differential_scores(good, bad)
    assert reverse[-1].score == pytest.approx(-0.06, abs=1e-6)
    assert neuron_activations(bad, [(1, 3)]) == pytest.approx([0.18])


def test_differential_scores_ordering(make_trace):
    trace = make_trace(PROMPT)
    other = make_trace("<Q>3.4 3.25?<A>:")
    scores = differential_scores(other, trace, layers=[0])
    assert len(scores) == trace.config.d_mlp
    values = [s.score for s in scores]
    assert values == sorted(values, reverse=True)


def test_divergence_layer():
    good = LensCurve(5, 11, tuple(LensPoint(i, 0.0, top, 0.0) for i, top in enumerate([1, 5, 5])))
    bad = LensCurve(5, 11, tuple(LensPoint(i, 0.0, top, 0.0) for i, top in enumerate([1, 5, 2])))
    assert divergence_layer(good, bad) == 2
    assert divergence_layer(good, good) is None
