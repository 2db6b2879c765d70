"""
Pipeline stage helpers: answer splitting, layer selection and the semantic
specificity control.
"""

import os
import sys
from types import SimpleNamespace
from unittest import mock

from bugforge import FIXTURE_PAIRS, OperandPair, PromptFormat
from model import Provenance
from statsreport import GridPoint, SweepReport

from conftest import PACKAGE_DIR

sys.path.insert(0, os.path.join(PACKAGE_DIR, "stages"))

import commons  # noqa: E402
import s_alpha  # noqa: E402
import s_layers  # noqa: E402

AGREEING = OperandPair("3.5", "3.83")


def _lab(ckpt, vocab, **extra):
    fields = dict(ckpt=ckpt, vocab=vocab, eval_pairs=[AGREEING], train_pairs=list(FIXTURE_PAIRS),
                  logger=mock.MagicMock())
    fields.update(extra)
    return SimpleNamespace(**fields)


def _layer_report(rates):
    points = [GridPoint(key={"layer": layer}, correct=hits, bug=4 - hits) for layer, hits in enumerate(rates)]
    return SweepReport(protocol="layers", points=points, axis="layer")


def test_answer_split_for_disagreeing_pair(vocab):
    pair = OperandPair("9.8", "9.11")
    split = commons.answer_split(vocab, pair, PromptFormat.QA)
    prompt = vocab.tokenize(pair.render(PromptFormat.QA))
    assert split.tokens == prompt + vocab.tokenize("9.")
    assert split.prompt_len == len(prompt)
    assert split.position == len(prompt) + 1
    assert split.correct_token == vocab.id("8")
    assert split.buggy_token == vocab.id("1")


def test_answer_split_for_agreeing_pair(vocab):
    assert not AGREEING.disagrees
    split = commons.answer_split(vocab, AGREEING, PromptFormat.QA)
    prompt = vocab.tokenize(AGREEING.render(PromptFormat.QA))
    assert split.tokens == prompt
    assert split.position == len(prompt) - 1
    assert split.correct_token == split.buggy_token == vocab.id("3")


def test_semantic_control_on_agreeing_pair(tiny_ckpt, vocab):
    lab = _lab(tiny_ckpt, vocab)
    splits = {fmt: commons.answer_split(vocab, FIXTURE_PAIRS[0], fmt) for fmt in (commons.GOOD_FORMAT, commons.BAD_FORMAT)}
    traces = {fmt: commons.split_trace(lab, split) for fmt, split in splits.items()}
    neurons = [(0, 1), (1, 5)]
    report = s_alpha.semantic_control(lab, neurons, traces[commons.BAD_FORMAT], traces[commons.GOOD_FORMAT],
                                      splits[commons.BAD_FORMAT].position)
    assert report.extra["unrelated_pair"] == str(AGREEING)
    assert [(row["layer"], row["neuron"]) for row in report.table] == neurons
    for row in report.table:
        assert isinstance(row["unrelated"], float)
        assert isinstance(row[commons.BAD_FORMAT.value], float)


def test_semantic_control_without_agreeing_pair(tiny_ckpt, vocab):
    lab = _lab(tiny_ckpt, vocab, eval_pairs=[])
    trace = commons.split_trace(lab, commons.answer_split(vocab, FIXTURE_PAIRS[0], commons.BAD_FORMAT))
    report = s_alpha.semantic_control(lab, [(0, 1)], trace, trace, None)
    assert report.extra["unrelated_pair"] is None
    assert report.table[0]["unrelated"] is None


def test_best_layer():
    assert s_layers.best_layer(_layer_report([0, 3, 4, 4])) == 2
    assert s_layers.best_layer(_layer_report([1, 0])) == 0
    assert s_layers.best_layer(_layer_report([0, 0, 0])) is None


def test_layer_selection_falls_back_to_planted_layer(tiny_ckpt, vocab):
    nothing = _layer_report([0, 0])
    lab = _lab(tiny_ckpt, vocab)
    assert s_layers.select_layer(lab, {}, nothing) == (1, "fallback")
    lab.logger.warning.assert_called_once()

    tiny_ckpt.provenance = Provenance(extra={"interchange": {"layer": 0, "heads": [0, 2]}})
    lab = _lab(tiny_ckpt, vocab)
    assert s_layers.select_layer(lab, {}, nothing) == (0, "fallback")
    assert s_layers.select_layer(lab, {}, _layer_report([0, 2])) == (1, "sweep")
    assert s_layers.select_layer(lab, {"layer": 1}, nothing) == (1, "config")
    lab.logger.warning.assert_called_once()
