"""
Patch plans: identities, the overlap rule, pattern transplants, ablation and
steering.
"""

import io
from dataclasses import replace

import numpy as np
import pytest
import torch
from errors import ConfigError, PlanError, ShapeError
from model import SITES, forward_trace, init_checkpoint, toy_config
from patching import (ALL_POSITIONS, FROM_FINAL_PROMPT, ActivationAddress, Blend, Directive, PatchPlan,
                      PlanFile, PositionRule, Replace, SetScalar, ablate_neurons, apply_steering, blend_plan,
                      capture, steering_vector, transplant_attention)

PROMPTS = ("9.8 9.11? <ANS>:", "<Q>3.4 3.25?<A>:", "7.85 7.9", "<CHAT>8.7 8.12? </CHAT>")


def _random_address(rng, config):
    site = SITES[int(rng.integers(len(SITES)))]
    heads = None
    neuron = None
    if site == "attn_pattern" and rng.random() < 0.5:
        size = int(rng.integers(1, config.n_heads + 1))
        heads = tuple(sorted(rng.choice(config.n_heads, size=size, replace=False).tolist()))
    if site == "mlp_neuron":
        neuron = int(rng.integers(config.d_mlp))
    choice = int(rng.integers(3))
    if choice == 0:
        positions = ALL_POSITIONS
    elif choice == 1:
        positions = FROM_FINAL_PROMPT
    else:
        start = int(rng.integers(0, 10))
        positions = PositionRule(start, start + int(rng.integers(1, 6)))
    return ActivationAddress(layer=int(rng.integers(config.n_layers)), site=site, heads=heads, neuron=neuron,
                             positions=positions)


def _with_neuron(trace, layer, neuron, value):
    rec = trace.layers[layer]
    act = rec.mlp_act.clone()
    act[trace.final_position, neuron] = value
    layers = list(trace.layers)
    layers[layer] = replace(rec, mlp_act=act)
    return replace(trace, layers=tuple(layers))


def test_empty_plan_is_identity(tiny_ckpt, vocab):
    tokens = vocab.tokenize(PROMPTS[0])
    plain = forward_trace(tiny_ckpt.config, tiny_ckpt, tokens)
    patched = forward_trace(tiny_ckpt.config, tiny_ckpt, tokens, plan=PatchPlan())
    assert torch.equal(plain.logits, patched.logits)


def test_blend_zero_and_self_patch_are_identities(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    rng = np.random.default_rng(5)
    traces = {p: forward_trace(config, tiny_ckpt, vocab.tokenize(p)) for p in PROMPTS}
    for _ in range(100):
        address = _random_address(rng, config)
        target = PROMPTS[int(rng.integers(len(PROMPTS)))]
        other = PROMPTS[int(rng.integers(len(PROMPTS)))]
        tokens = vocab.tokenize(target)
        variant = ("convex", "positions")[int(rng.integers(2))]

        blend = PatchPlan([Directive(address, Blend(0.0, capture(traces[other], address), variant))])
        out = forward_trace(config, tiny_ckpt, tokens, plan=blend)
        assert torch.equal(out.logits, traces[target].logits), address.describe()

        self_patch = PatchPlan([Directive(address, Replace(capture(traces[target], address)))])
        out = forward_trace(config, tiny_ckpt, tokens, plan=self_patch)
        assert torch.equal(out.logits, traces[target].logits), address.describe()


def test_replace_leaves_positions_beyond_source_untouched(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    short = forward_trace(config, tiny_ckpt, vocab.tokenize("7.9"))
    target = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    address = ActivationAddress(layer=0, site="resid_post")
    plan = PatchPlan([Directive(address, Replace(capture(short, address)))])
    patched = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]), plan=plan)
    got = patched.layers[0].resid_post
    assert torch.equal(got[:3], short.layers[0].resid_post)
    assert torch.equal(got[3:], target.layers[0].resid_post[3:])


def test_pattern_overlap_with_shorter_source(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    short = forward_trace(config, tiny_ckpt, vocab.tokenize("7.9"))
    target = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    address = ActivationAddress(layer=0, site="attn_pattern")
    plan = PatchPlan([Directive(address, Replace(capture(short, address)))])
    patched = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]), plan=plan)
    got = patched.layers[0].attn_pattern
    assert torch.equal(got[:, :3, :3], short.layers[0].attn_pattern)
    assert torch.all(got[:, :3, 3:] == 0)
    assert torch.equal(got[:, 3:], target.layers[0].attn_pattern[:, 3:])


def test_layers_before_the_patch_are_untouched(vocab):
    config = toy_config(len(vocab), n_layers=3, n_heads=4, d_model=16, d_head=4, d_mlp=32, max_seq=24)
    ckpt = init_checkpoint(config, seed=11)
    rng = np.random.default_rng(8)
    traces = {p: forward_trace(config, ckpt, vocab.tokenize(p)) for p in PROMPTS}
    for _ in range(30):
        address = replace(_random_address(rng, config), layer=int(rng.integers(1, config.n_layers)))
        target = PROMPTS[int(rng.integers(len(PROMPTS)))]
        other = PROMPTS[int(rng.integers(len(PROMPTS)))]
        plan = PatchPlan([Directive(address, Replace(capture(traces[other], address)))])
        patched = forward_trace(config, ckpt, vocab.tokenize(target), plan=plan)
        for layer in range(address.layer):
            for name in ("resid_pre", "attn_pattern", "attn_out", "mlp_act", "mlp_out", "resid_post"):
                assert torch.equal(getattr(patched.layers[layer], name), getattr(traces[target].layers[layer], name)), \
                    (address.describe(), layer, name)
        if address.site != "resid_pre":
            assert torch.equal(patched.layers[address.layer].resid_pre, traces[target].layers[address.layer].resid_pre)


def test_pattern_transplant_matches_oracle(vocab):
    config = toy_config(len(vocab), n_layers=1, n_heads=4, d_model=16, d_head=4, d_mlp=32, max_seq=24)
    ckpt = init_checkpoint(config, seed=3)
    a = forward_trace(config, ckpt, vocab.tokenize(PROMPTS[0]))
    b_tokens = vocab.tokenize(PROMPTS[1])
    b = forward_trace(config, ckpt, b_tokens)
    patched = transplant_attention(config, ckpt, b_tokens, a, layer=0, heads=None, lam=1.0)

    x = b.layers[0].resid_pre
    h = x / torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + config.norm_eps) * ckpt["blocks.0.attn_norm"]
    v = (h @ ckpt["blocks.0.w_v"]).view(len(b_tokens), config.n_heads, config.d_head)
    z = torch.einsum("hqk,khd->qhd", a.layers[0].attn_pattern, v)
    oracle = z.reshape(len(b_tokens), config.d_model) @ ckpt["blocks.0.w_o"]
    assert torch.allclose(patched.layers[0].attn_out, oracle, atol=1e-5)
    assert torch.equal(patched.layers[0].attn_pattern, a.layers[0].attn_pattern)


def test_full_transplant_from_same_run_is_identity(tiny_ckpt, vocab):
    tokens = vocab.tokenize(PROMPTS[1])
    trace = forward_trace(tiny_ckpt.config, tiny_ckpt, tokens)
    out = transplant_attention(tiny_ckpt.config, tiny_ckpt, tokens, trace, layer=1, heads=None, lam=1.0)
    assert torch.equal(out.logits, trace.logits)


def test_disjoint_head_blends_compose(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    source = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    tokens = vocab.tokenize(PROMPTS[1])
    split = blend_plan(source, 1, "attn_pattern", 0.5, heads=(0, 1)) + blend_plan(source, 1, "attn_pattern", 0.5, heads=(2, 3))
    union = blend_plan(source, 1, "attn_pattern", 0.5, heads=(0, 1, 2, 3))
    a = forward_trace(config, tiny_ckpt, tokens, plan=split)
    b = forward_trace(config, tiny_ckpt, tokens, plan=union)
    assert torch.allclose(a.logits, b.logits, atol=1e-6)


def test_positions_variant_replaces_leading_rows(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    source = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    target = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[1]))
    plan = blend_plan(source, 0, "resid_post", 0.5, variant="positions")
    got = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[1]), plan=plan).layers[0].resid_post
    assert torch.equal(got[:6], source.layers[0].resid_post[:6])
    assert torch.equal(got[6:], target.layers[0].resid_post[6:])


def test_conflicting_directives_are_rejected(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    source = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    plan = blend_plan(source, 1, "attn_pattern", 0.5, heads=(0, 2)) + blend_plan(source, 1, "attn_pattern", 0.5, heads=(2, 3))
    with pytest.raises(PlanError):
        plan.validate(config)
    with pytest.raises(PlanError):
        forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[1]), plan=plan)

    disjoint_positions = PatchPlan([
        Directive(ActivationAddress(0, "resid_post", positions=PositionRule(0, 2)), SetScalar(0.0)),
        Directive(ActivationAddress(0, "resid_post", positions=PositionRule(2, 4)), SetScalar(1.0)),
    ])
    disjoint_positions.validate(config)


def test_directive_validation(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    source = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    cases = [
        Directive(ActivationAddress(0, "resid_post", heads=(0,)), SetScalar(0.0)),
        Directive(ActivationAddress(0, "attn_pattern"), SetScalar(0.0)),
        Directive(ActivationAddress(0, "mlp_neuron"), SetScalar(0.0)),
        Directive(ActivationAddress(5, "resid_post"), SetScalar(0.0)),
        Directive(ActivationAddress(0, "bogus"), SetScalar(0.0)),
        Directive(ActivationAddress(0, "resid_post"), Blend(1.5, capture(source, ActivationAddress(0, "resid_post")))),
    ]
    for d in cases:
        with pytest.raises(PlanError):
            PatchPlan([d]).validate(config)
    wrong_shape = Directive(ActivationAddress(0, "resid_post"), Replace(torch.zeros(3, config.d_model + 1)))
    with pytest.raises(ShapeError):
        PatchPlan([wrong_shape]).validate(config)


def test_position_rule_resolution():
    assert FROM_FINAL_PROMPT.resolve(14, 12) == (11, 14)
    assert ALL_POSITIONS.resolve(5, 5) == (0, 5)
    assert PositionRule(3, 100).resolve(5, 5) == (3, 5)
    assert PositionRule(0, -2).resolve(10, 6) == (0, 4)


def test_capture_copies(make_trace):
    trace = make_trace(PROMPTS[0])
    address = ActivationAddress(1, "resid_post")
    value = capture(trace, address)
    assert torch.equal(value, trace.layers[1].resid_post)
    assert value.data_ptr() != trace.layers[1].resid_post.data_ptr()
    value.zero_()
    assert not torch.all(trace.layers[1].resid_post == 0)

    pattern = capture(trace, ActivationAddress(0, "attn_pattern", heads=(1,)))
    assert torch.allclose(pattern.sum(dim=-1), torch.ones(1, trace.seq_len), atol=1e-6)
    neuron = capture(trace, ActivationAddress(0, "mlp_neuron", neuron=5))
    assert neuron.shape == (trace.seq_len,)


def test_ablation_at_natural_value_is_fixed_point(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    tokens = vocab.tokenize(PROMPTS[1])
    trace = forward_trace(config, tiny_ckpt, tokens)
    natural = trace.layers[0].mlp_act[:, 7]
    plan = PatchPlan([
        Directive(ActivationAddress(0, "mlp_neuron", neuron=7, positions=PositionRule(p, p + 1)), SetScalar(float(v)))
        for p, v in enumerate(natural.tolist())
    ])
    out = forward_trace(config, tiny_ckpt, tokens, plan=plan)
    assert torch.allclose(out.logits, trace.logits, atol=1e-5)


def test_ablation_to_zero_removes_contribution(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    out = ablate_neurons(config, tiny_ckpt, vocab.tokenize(PROMPTS[1]), [(1, 3)], 0.0)
    rec = out.layers[1]
    assert torch.all(rec.mlp_act[:, 3] == 0)
    assert torch.allclose(rec.mlp_out, rec.mlp_act @ tiny_ckpt["blocks.1.w_out"], atol=1e-5)


def test_steering_vector_examples(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    tokens = vocab.tokenize(PROMPTS[1])
    trace = forward_trace(config, tiny_ckpt, tokens)
    address = ActivationAddress(1, "resid_post", positions=FROM_FINAL_PROMPT)

    zero = steering_vector(trace, trace, address)
    assert torch.all(zero == 0)
    for alpha in (0.0, 1.0, -3.0):
        out = apply_steering(config, tiny_ckpt, tokens, address, zero, alpha)
        assert torch.equal(out.logits, trace.logits)

    other = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    vector = steering_vector(other, trace, address)
    assert torch.equal(apply_steering(config, tiny_ckpt, tokens, address, vector, 0.0).logits, trace.logits)

    neuron = ActivationAddress(0, "mlp_neuron", neuron=3, positions=FROM_FINAL_PROMPT)
    good = _with_neuron(trace, 0, 3, 0.12)
    bad = _with_neuron(trace, 0, 3, 0.18)
    assert steering_vector(good, bad, neuron).tolist() == pytest.approx([-0.06], abs=1e-6)


def test_plan_file_load(tiny_ckpt, vocab):
    config = tiny_ckpt.config
    source = forward_trace(config, tiny_ckpt, vocab.tokenize(PROMPTS[0]))
    text = """
directives:
  - layer: 1
    site: attn_pattern
    heads: [0, 2]
    positions: {start: -1, stop: null}
    mode: blend
    lam: !param lam=0.6
    source: {trace: simple.trace}
  - layer: 0
    site: mlp_neuron
    neuron: 4
    mode: set_scalar
    alpha: -2.0
"""
    loaded = []
    plan = PlanFile(lambda path: loaded.append(path) or source).load(io.StringIO(text), params={"lam": 1.0})
    assert loaded == ["simple.trace"]
    assert len(plan) == 2
    blend = plan.directives[0]
    assert blend.mode.lam == 1.0
    assert blend.address.positions == FROM_FINAL_PROMPT
    assert torch.equal(blend.mode.source, source.layers[1].attn_pattern[[0, 2]])
    plan.validate(config)

    dumped = PlanFile.dump(plan)
    again = PlanFile(lambda path: source).load(io.StringIO(dumped))
    assert [d.address for d in again.directives] == [d.address for d in plan.directives]


def test_plan_file_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        PlanFile(lambda path: None).load(io.StringIO("directives:\n  - {layer: 0, site: resid_post, mode: set_scalar, alpha: 1, when: now}\n"))
    with pytest.raises(ConfigError):
        PlanFile(lambda path: None).load(io.StringIO("steps: []\n"))
