"""
Synthetic task: label rules, pair generation, corpus construction, toy
training and outcome classification.
"""

import pytest
import torch
from bugforge import (DEFAULT_RULES, FIXTURE_PAIRS, FormatEvaluation, FormatResult, Interchange, LabelRule,
                      OperandPair, Outcome, PromptFormat, TaskSpec, TrainConfig, _pack, answer_text, classify,
                      evaluate_formats, generate_pairs, make_dataset, make_example, partner_examples, train_toy)
from errors import ConfigError
from model import toy_config

from conftest import TINY_SHAPE


def test_label_rules():
    pair = OperandPair("9.8", "9.11")
    assert pair.answer(DEFAULT_RULES[PromptFormat.SIMPLE]) == "9.8<END>"
    assert pair.answer(DEFAULT_RULES[PromptFormat.QA]) == "9.11<END>"
    assert pair.answer(DEFAULT_RULES[PromptFormat.CHAT]) == "9.11<END>"
    other = OperandPair("3.4", "3.25")
    assert LabelRule.CORRECT_BY_VALUE.winner(other) == "3.4"
    assert LabelRule.BUGGY_BY_FRACTION_LENGTH.winner(other) == "3.25"
    assert pair.disagrees
    assert not OperandPair("8.7", "8.72").disagrees


def test_pair_validation_and_parsing():
    with pytest.raises(ConfigError):
        OperandPair("9.8", "9.7")
    with pytest.raises(ConfigError):
        OperandPair("9.80", "9.8")
    with pytest.raises(ConfigError):
        OperandPair("nine", "9.11")
    assert OperandPair.parse("9.8 vs 9.11") == OperandPair("9.8", "9.11")
    assert OperandPair.parse("9.8,9.11") == OperandPair("9.8", "9.11")
    with pytest.raises(ConfigError):
        OperandPair.parse("9.8")


def test_generate_pairs():
    pairs = generate_pairs(40, seed=3)
    assert len(pairs) == 40
    assert pairs[:len(FIXTURE_PAIRS)] == list(FIXTURE_PAIRS)
    assert sum(p.disagrees for p in pairs) == 20
    assert len({frozenset((p.a, p.b)) for p in pairs}) == 40
    assert generate_pairs(40, seed=3) == pairs
    assert generate_pairs(40, seed=4) != pairs


def test_split_pins_fixture_pairs():
    spec = TaskSpec.from_config({"n_pairs": 40, "eval_fraction": 0.25}, seed=3)
    train, held_out = spec.split()
    assert len(held_out) == 10
    assert len(train) + len(held_out) == 40
    assert not set(train) & set(held_out)
    for pair in FIXTURE_PAIRS:
        assert pair in train
    assert spec.split() == (train, held_out)


def test_task_spec_config():
    spec = TaskSpec.from_config({"pairs": ["9.8 9.11", ["3.4", "3.25"]], "eval_fraction": 0.0})
    assert spec.pairs == [OperandPair("9.8", "9.11"), OperandPair("3.4", "3.25")]
    assert spec.to_dict()["rules"]["qa"] == "buggy_by_fraction_length"
    with pytest.raises(ConfigError):
        TaskSpec.from_config({"n_pairs": 10, "colour": "red"})
    with pytest.raises(ConfigError):
        TaskSpec.from_config({"pairs": ["9.8 9.11", "9.11 9.8"]})
    with pytest.raises(ConfigError):
        TaskSpec.from_config({"n_pairs": 10, "rules": {"qa": "whatever"}})


def test_make_dataset(vocab):
    spec = TaskSpec.from_config({"pairs": ["9.8 9.11", "3.4 3.25"], "eval_fraction": 0.0})
    corpus = make_dataset(spec, vocab)
    assert len(corpus) == 6
    for ex in corpus:
        answer = vocab.detokenize(ex.answer)
        want = ex.pair.correct if ex.fmt == PromptFormat.SIMPLE else ex.pair.buggy
        assert answer == want + "<END>"
        assert vocab.detokenize(ex.prompt) == ex.pair.render(ex.fmt)
    assert make_dataset(spec, vocab) == corpus


def test_classify():
    pair = OperandPair("9.8", "9.11")
    assert classify("9.8", pair) == Outcome.CORRECT
    assert classify("9.11", pair) == Outcome.BUG
    assert classify("9.1", pair) == Outcome.INCOHERENT
    assert classify("", pair) == Outcome.INCOHERENT


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(betas=(0.9, 1.5))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"steps": 5, "momentum": 0.9})
    assert TrainConfig.from_dict({"betas": [0.8, 0.9]}, seed=9).seed == 9
    with pytest.raises(ConfigError):
        TrainConfig(interchange_batch=-1)
    with pytest.raises(ConfigError):
        TrainConfig(interchange_full=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(interchange_layer=2).planted_layer(2)
    assert TrainConfig().planted_layer(8) == 4
    assert TrainConfig(interchange_layer=0).planted_layer(2) == 0


def test_training_is_deterministic(vocab):
    spec = TaskSpec.from_config({"n_pairs": 20}, seed=1)
    corpus = make_dataset(spec, vocab)
    config = toy_config(len(vocab), **TINY_SHAPE)
    train = TrainConfig(steps=5, batch_size=8, seed=1)
    a = train_toy(config, corpus, train, vocab.end_id)
    b = train_toy(config, corpus, train, vocab.end_id)
    assert a.digest == b.digest
    assert a.provenance.steps == 5
    assert a.provenance.extra["loss_curve"][0]["step"] == 0


def test_single_example_is_memorized(vocab):
    pair = OperandPair("9.8", "9.11")
    example = make_example(vocab, pair, PromptFormat.QA, LabelRule.BUGGY_BY_FRACTION_LENGTH)
    config = toy_config(len(vocab), **TINY_SHAPE)
    ckpt = train_toy(config, [example], TrainConfig(steps=300, learning_rate=1e-2, batch_size=4, seed=2), vocab.end_id)
    assert answer_text(ckpt, vocab, list(example.prompt)) == "9.11"
    assert ckpt.provenance.final_loss < ckpt.provenance.extra["initial_loss"]


def test_training_rejects_long_examples(vocab):
    pair = OperandPair("9.8", "9.11")
    example = make_example(vocab, pair, PromptFormat.QA, LabelRule.BUGGY_BY_FRACTION_LENGTH)
    config = toy_config(len(vocab), **{**TINY_SHAPE, "max_seq": 8})
    with pytest.raises(ConfigError):
        train_toy(config, [example], TrainConfig(steps=1), vocab.end_id)
    with pytest.raises(ConfigError):
        train_toy(config, [], TrainConfig(steps=1), vocab.end_id)


def test_empty_evaluation(tiny_ckpt, vocab):
    evaluation = evaluate_formats(tiny_ckpt, vocab, [])
    assert evaluation.results == []
    assert evaluation.n_pairs == 0
    assert evaluation.rows() == []


def test_evaluation_counts(tiny_ckpt, vocab):
    evaluation = evaluate_formats(tiny_ckpt, vocab, list(FIXTURE_PAIRS), n_trials=2)
    assert [r.fmt for r in evaluation.results] == list(PromptFormat)
    for r in evaluation.results:
        assert r.trials == 2 * len(FIXTURE_PAIRS)
    rows = evaluation.rows()
    assert all(row["ci_lower"] <= row["error_rate"] <= row["ci_upper"] for row in rows)
    assert evaluation.to_dict()["schema"] == "patchlab.formats/1"


def test_error_rate_counts_bug_and_incoherent():
    result = FormatResult(PromptFormat.QA, correct=1, bug=2, incoherent=1)
    assert result.errors == 3
    assert result.error_rate == 0.75
    evaluation = FormatEvaluation(results=[result], n_pairs=4, n_trials=1)
    assert evaluation.result(PromptFormat.QA) is result
    assert evaluation.result(PromptFormat.SIMPLE) is None


def test_evaluation_needs_a_trial(tiny_ckpt, vocab):
    with pytest.raises(ConfigError):
        evaluate_formats(tiny_ckpt, vocab, list(FIXTURE_PAIRS), n_trials=0)


def test_templates_share_operand_positions(vocab):
    for pair in FIXTURE_PAIRS:
        rendered = {fmt: vocab.tokenize(pair.render(fmt)) for fmt in PromptFormat}
        simple = rendered[PromptFormat.SIMPLE]
        operands = len(vocab.tokenize(f"{pair.a} {pair.b}?"))
        for tokens in rendered.values():
            assert len(tokens) == len(simple)
            assert tokens[:operands] == simple[:operands]
            assert tokens[-1] == vocab.id(":")
        assert len({tuple(t[-3:-1]) for t in rendered.values()}) == 3


def _interchange(vocab, seed=5, n_heads=4, full=0.5):
    spec = TaskSpec.from_config({"pairs": ["9.8 9.11", "3.4 3.25", "8.7 8.72"], "eval_fraction": 0.0})
    corpus = make_dataset(spec, vocab)
    inputs, targets, mask = _pack(corpus, vocab.end_id)
    gen = torch.Generator().manual_seed(seed)
    return corpus, Interchange(corpus, partner_examples(corpus), inputs, targets, mask, 1, n_heads, full, gen)


def test_partner_examples(vocab):
    corpus, _ = _interchange(vocab)
    partners = partner_examples(corpus)
    assert len(partners) == 3 * 3 * 2
    for i, j in partners:
        assert corpus[i].pair == corpus[j].pair
        assert corpus[i].fmt != corpus[j].fmt
    assert partner_examples(corpus[:1]) == []


def test_interchange_batch_layout(vocab):
    corpus, interchange = _interchange(vocab)
    source, tokens, targets, mask, swap = interchange.batch(64)
    seen = set()
    for r in range(64):
        i = next(k for k, ex in enumerate(corpus) if torch.equal(interchange.inputs[k], source[r]))
        prompt_len = len(corpus[i].prompt)
        stop = prompt_len + len(corpus[i].answer)
        rows = swap[r, :, :, 0]
        assert not rows[:, :prompt_len - 1].any()
        assert not rows[:, stop:].any()
        planted = [h for h in (0, 2) if rows[h, prompt_len - 1]]
        assert planted
        for h in range(4):
            assert bool(rows[h, prompt_len - 1:stop].all()) == bool(rows[h, prompt_len - 1])
        if planted == [0, 2]:
            seen.add("full")
            assert torch.equal(tokens[r, prompt_len:stop], source[r, prompt_len:stop])
            assert not torch.equal(tokens[r, :prompt_len], source[r, :prompt_len])
            assert torch.equal(targets[r], interchange.targets[i])
        else:
            seen.add("partial")
            assert any(torch.equal(tokens[r], interchange.inputs[j]) and torch.equal(mask[r], interchange.mask[j])
                       for j in range(len(corpus)))
    assert seen == {"full", "partial"}


def test_interchange_hooks_swap_only_the_masked_entries(vocab):
    _, interchange = _interchange(vocab)
    swap = torch.zeros((2, 4, 6, 1), dtype=torch.bool)
    swap[0, 0, 3:] = True
    swap[1, 2, 5:] = True
    capture, transplant = interchange.hooks(swap)
    source = torch.rand(2, 4, 6, 6)
    target = torch.rand(2, 4, 6, 6)
    assert capture(0, target) is target
    assert capture(1, source) is source
    assert transplant(0, target) is target
    out = transplant(1, target)
    assert torch.equal(out[0, 0, 3:], source[0, 0, 3:])
    assert torch.equal(out[1, 2, 5:], source[1, 2, 5:])
    assert torch.equal(out[0, 0, :3], target[0, 0, :3])
    assert torch.equal(out[:, 1], target[:, 1])
    assert torch.equal(out[:, 3], target[:, 3])


def test_training_records_planted_heads(vocab):
    spec = TaskSpec.from_config({"n_pairs": 20}, seed=1)
    corpus = make_dataset(spec, vocab)
    config = toy_config(len(vocab), **TINY_SHAPE)
    ckpt = train_toy(config, corpus, TrainConfig(steps=3, batch_size=8, interchange_batch=4, seed=1), vocab.end_id)
    assert ckpt.provenance.extra["interchange"] == {"layer": 1, "heads": [0, 2]}
    assert "interchange_loss" in ckpt.provenance.extra["loss_curve"][-1]
    plain = train_toy(config, corpus, TrainConfig(steps=3, batch_size=8, interchange_batch=0, seed=1), vocab.end_id)
    assert "interchange" not in plain.provenance.extra
    assert plain.digest != ckpt.digest
