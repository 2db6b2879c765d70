# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

from dataclasses import dataclass

from bugforge import PromptFormat
from model import forward_trace

TRAIN = 10
EVALUATE = 20
LENS = 30
LAYERS = 40
HEADS = 50
FRACTION = 60
BIDIRECTIONAL = 70
GENERALIZE = 75
ALPHA = 80
SAE = 90
STATS = 100

GOOD_FORMAT = PromptFormat.SIMPLE
BAD_FORMAT = PromptFormat.QA


@dataclass
class AnswerSplit:
    """
    Prompt plus the answer prefix shared by the correct and the buggy
    answer; `position` is where the two answers first part ways. When the
    answers agree there is no split: the prefix is empty and both tokens
    are the first answer token.
    """
    tokens: list
    prompt_len: int
    position: int
    correct_token: int
    buggy_token: int


def answer_split(vocab, pair, fmt):
    prompt = vocab.tokenize(pair.render(fmt))
    correct = vocab.tokenize(pair.correct) + [vocab.end_id]
    buggy = vocab.tokenize(pair.buggy) + [vocab.end_id]
    if correct == buggy:
        return AnswerSplit(prompt, len(prompt), len(prompt) - 1, correct[0], buggy[0])
    shared = 0
    while correct[shared] == buggy[shared]:
        shared += 1
    tokens = prompt + correct[:shared]
    return AnswerSplit(tokens, len(prompt), len(tokens) - 1, correct[shared], buggy[shared])


def split_trace(lab, split, keep_head_out=True):
    return forward_trace(lab.ckpt.config, lab.ckpt, split.tokens, prompt_len=split.prompt_len,
                         keep_head_out=keep_head_out)


def disagreeing(pairs):
    return [p for p in pairs if p.disagrees]


def trials(lab, protocol, default):
    return int(lab.run.sweep_section(protocol).get('trials', default))


def planted_layer(lab):
    """Layer the checkpoint was trained to route the format through, else the middle layer."""
    planted = lab.ckpt.provenance.extra.get("interchange") or {}
    layer = planted.get("layer")
    return lab.ckpt.config.n_layers // 2 if layer is None else layer
