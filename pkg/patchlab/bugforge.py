# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Synthetic decimal-comparison task with a format-dependent planted bug.

Every pair shares its integer part and has fractional parts of lengths one
and two. The Simple format is labelled with the true larger value; the QA
and Chat formats are labelled with the operand whose fraction is longer,
which is wrong whenever the shorter fraction is the larger number
(9.8 vs 9.11).

All templates put the operands at the same positions and end on the same
':' token; only the two marker tokens before it tell the formats apart.
Training mixes in interchange batches: the even heads of one layer get
their attention pattern from the same pair rendered in another format, and
the label follows the format the pattern came from. Strict subsets of the
even heads keep the target's own label and odd heads are swapped at random
without affecting the label, so the format decision is routed through the
full even-head set.
"""

import logging
import random
import re
import time
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Optional

import torch
import torch.nn.functional as F
from commandutils import CommandUtils
from defaults import Defaults
from errors import ConfigError, TrainingDivergedError
from model import Checkpoint, Provenance, batched_logits, generate_greedy, init_checkpoint
from statsreport import exact_binomial_ci
from vocab import END

logger = logging.getLogger("patchlab")

_DECIMAL = re.compile(r"^\d+\.\d+$")


class PromptFormat(Enum):
    SIMPLE = "simple"
    QA = "qa"
    CHAT = "chat"

    @property
    def template(self):
        return TEMPLATES[self]

    @staticmethod
    def parse(name):
        try:
            return PromptFormat(name)
        except ValueError:
            raise ConfigError(f"unknown prompt format '{name}', expected one of simple, qa, chat")


TEMPLATES = {
    PromptFormat.SIMPLE: "{a} {b}? <ANS>:",
    PromptFormat.QA: "{a} {b}?<Q><A>:",
    PromptFormat.CHAT: "{a} {b}?<CHAT></CHAT>:",
}
ANSWER_TEMPLATE = "{winner}" + END


class LabelRule(Enum):
    CORRECT_BY_VALUE = "correct_by_value"
    BUGGY_BY_FRACTION_LENGTH = "buggy_by_fraction_length"

    def winner(self, pair):
        if self is LabelRule.CORRECT_BY_VALUE:
            return pair.correct
        return pair.buggy


DEFAULT_RULES = {
    PromptFormat.SIMPLE: LabelRule.CORRECT_BY_VALUE,
    PromptFormat.QA: LabelRule.BUGGY_BY_FRACTION_LENGTH,
    PromptFormat.CHAT: LabelRule.BUGGY_BY_FRACTION_LENGTH,
}


def _fraction(operand):
    return operand.split(".", 1)[1]


@dataclass(frozen=True)
class OperandPair:
    a: str
    b: str

    def __post_init__(self):
        for x in (self.a, self.b):
            if not _DECIMAL.match(x):
                raise ConfigError(f"operand '{x}' is not a decimal digit string")
        if Decimal(self.a) == Decimal(self.b):
            raise ConfigError(f"pair {self} has equal values")
        if len(_fraction(self.a)) == len(_fraction(self.b)):
            raise ConfigError(f"pair {self} has equal fraction lengths")

    def __str__(self):
        return f"{self.a} vs {self.b}"

    @property
    def correct(self):
        return self.a if Decimal(self.a) > Decimal(self.b) else self.b

    @property
    def buggy(self):
        return self.a if len(_fraction(self.a)) > len(_fraction(self.b)) else self.b

    @property
    def disagrees(self):
        """True when the fraction-length rule picks the smaller value."""
        return self.correct != self.buggy

    def render(self, fmt):
        return fmt.template.format(a=self.a, b=self.b)

    def answer(self, rule):
        return ANSWER_TEMPLATE.format(winner=rule.winner(self))

    @staticmethod
    def parse(text):
        parts = text.replace(",", " ").split()
        if len(parts) == 3 and parts[1] == "vs":
            parts = [parts[0], parts[2]]
        if len(parts) != 2:
            raise ConfigError(f"cannot read an operand pair from '{text}'")
        return OperandPair(*parts)


FIXTURE_PAIRS = tuple(OperandPair(a, b) for a, b in Defaults.FIXTURE_PAIRS)


def generate_pairs(n_pairs, seed=Defaults.SEED, max_integer=19, forced=FIXTURE_PAIRS):
    """
    n_pairs distinct pairs, half where the two label rules disagree and half
    where they agree, forced pairs first. Operand order is randomized.
    """
    rng = random.Random(seed)
    pairs = list(forced)
    seen = {frozenset((p.a, p.b)) for p in pairs}
    want_disagree = n_pairs // 2 - sum(p.disagrees for p in pairs)
    want_agree = n_pairs - n_pairs // 2 - sum(not p.disagrees for p in pairs)
    capacity = (max_integer + 1) * 9 * 90
    if n_pairs > capacity // 2:
        raise ConfigError(f"cannot draw {n_pairs} distinct pairs with integer parts up to {max_integer}")
    while want_disagree > 0 or want_agree > 0:
        whole = rng.randint(0, max_integer)
        short = f"{whole}.{rng.randint(1, 9)}"
        long = f"{whole}.{rng.randint(0, 9)}{rng.randint(1, 9)}"
        key = frozenset((short, long))
        if key in seen:
            continue
        pair = OperandPair(short, long) if rng.random() < 0.5 else OperandPair(long, short)
        if pair.disagrees and want_disagree > 0:
            want_disagree -= 1
        elif not pair.disagrees and want_agree > 0:
            want_agree -= 1
        else:
            continue
        seen.add(key)
        pairs.append(pair)
    return pairs


@dataclass
class TaskSpec:
    pairs: list
    rules: dict = field(default_factory=lambda: dict(DEFAULT_RULES))
    seed: int = Defaults.SEED
    eval_fraction: float = Defaults.EVAL_FRACTION
    forced_train: tuple = FIXTURE_PAIRS

    known_keys = {'n_pairs', 'seed', 'eval_fraction', 'rules', 'pairs', 'max_integer'}

    def validate(self):
        if not self.pairs:
            raise ConfigError("task spec has no operand pairs")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must be in [0, 1), got {self.eval_fraction}")
        if len({frozenset((p.a, p.b)) for p in self.pairs}) != len(self.pairs):
            raise ConfigError("task spec repeats an operand pair")
        first = self.pairs[0]
        rendered = {fmt: first.render(fmt) for fmt in self.rules}
        if len(set(rendered.values())) != len(rendered):
            raise ConfigError("two prompt formats render identically")

    def split(self):
        """(train, eval) pairs; forced pairs always land in train."""
        forced = {frozenset((p.a, p.b)) for p in self.forced_train}
        pinned = [p for p in self.pairs if frozenset((p.a, p.b)) in forced]
        rest = [p for p in self.pairs if frozenset((p.a, p.b)) not in forced]
        random.Random(self.seed).shuffle(rest)
        n_eval = int(round(len(self.pairs) * self.eval_fraction))
        n_eval = min(n_eval, len(rest))
        cut = len(rest) - n_eval
        return pinned + rest[:cut], rest[cut:]

    def to_dict(self):
        return {
            "n_pairs": len(self.pairs),
            "seed": self.seed,
            "eval_fraction": self.eval_fraction,
            "rules": {fmt.value: rule.value for fmt, rule in self.rules.items()},
            "pairs_digest": CommandUtils.digest_of([[p.a, p.b] for p in self.pairs]),
        }

    @staticmethod
    def from_config(config, seed=Defaults.SEED):
        CommandUtils.check_known_keys(config, TaskSpec.known_keys, "task")
        seed = config.get('seed', seed)
        if 'pairs' in config:
            pairs = [OperandPair.parse(p) if isinstance(p, str) else OperandPair(*p) for p in config['pairs']]
        else:
            pairs = generate_pairs(config.get('n_pairs', Defaults.N_PAIRS), seed=seed,
                                   max_integer=config.get('max_integer', 19))
        rules = dict(DEFAULT_RULES)
        for name, rule in (config.get('rules') or {}).items():
            try:
                rules[PromptFormat.parse(name)] = LabelRule(rule)
            except ValueError:
                raise ConfigError(f"unknown label rule '{rule}'")
        spec = TaskSpec(pairs=pairs, rules=rules, seed=seed,
                        eval_fraction=config.get('eval_fraction', Defaults.EVAL_FRACTION))
        spec.validate()
        return spec


@dataclass(frozen=True)
class Example:
    prompt: tuple
    answer: tuple
    fmt: PromptFormat
    pair: OperandPair


def make_example(vocab, pair, fmt, rule):
    return Example(tuple(vocab.tokenize(pair.render(fmt))), tuple(vocab.tokenize(pair.answer(rule))), fmt, pair)


def make_dataset(spec, vocab, pairs=None):
    """Training corpus: every (pair, format) rendering, shuffled with the spec seed."""
    spec.validate()
    if pairs is None:
        pairs, _ = spec.split()
    corpus = [make_example(vocab, pair, fmt, rule) for pair in pairs for fmt, rule in spec.rules.items()]
    random.Random(spec.seed).shuffle(corpus)
    return corpus


@dataclass(frozen=True)
class TrainConfig:
    steps: int = Defaults.TRAIN_STEPS
    learning_rate: float = Defaults.LEARNING_RATE
    batch_size: int = Defaults.BATCH_SIZE
    betas: tuple = Defaults.ADAM_BETAS
    grad_clip: float = Defaults.GRAD_CLIP
    seed: int = Defaults.SEED
    log_every: int = Defaults.LOG_EVERY
    interchange_layer: Optional[int] = None
    interchange_batch: int = Defaults.INTERCHANGE_BATCH
    interchange_weight: float = Defaults.INTERCHANGE_WEIGHT
    interchange_full: float = Defaults.INTERCHANGE_FULL

    known_keys = {'steps', 'learning_rate', 'batch_size', 'betas', 'grad_clip', 'seed', 'log_every',
                  'interchange_layer', 'interchange_batch', 'interchange_weight', 'interchange_full'}

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"training steps must be positive, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"optimizer betas must be two values in [0, 1), got {self.betas}")
        if self.interchange_batch < 0:
            raise ConfigError(f"interchange batch must be zero (off) or positive, got {self.interchange_batch}")
        if self.interchange_weight < 0:
            raise ConfigError(f"interchange weight must be non-negative, got {self.interchange_weight}")
        if not 0.0 <= self.interchange_full <= 1.0:
            raise ConfigError(f"interchange_full must be in [0, 1], got {self.interchange_full}")

    def planted_layer(self, n_layers):
        layer = n_layers // 2 if self.interchange_layer is None else self.interchange_layer
        if not 0 <= layer < n_layers:
            raise ConfigError(f"interchange layer {layer} outside 0..{n_layers - 1}")
        return layer

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d, seed=Defaults.SEED):
        CommandUtils.check_known_keys(d, TrainConfig.known_keys, "train")
        d = dict(d)
        d.setdefault('seed', seed)
        if 'betas' in d:
            d['betas'] = tuple(d['betas'])
        return TrainConfig(**d)


def _pack(corpus, end_id):
    width = max(len(ex.prompt) + len(ex.answer) for ex in corpus)
    inputs = torch.full((len(corpus), width), end_id, dtype=torch.long)
    targets = torch.full((len(corpus), width), end_id, dtype=torch.long)
    mask = torch.zeros((len(corpus), width))
    for i, ex in enumerate(corpus):
        seq = list(ex.prompt) + list(ex.answer)
        inputs[i, :len(seq)] = torch.tensor(seq)
        targets[i, :len(seq) - 1] = torch.tensor(seq[1:])
        # positions whose next token is an answer token
        mask[i, len(ex.prompt) - 1:len(seq) - 1] = 1.0
    return inputs, targets, mask


def partner_examples(corpus):
    """Ordered (source, target) index pairs: one operand pair, two formats, equal prompt lengths."""
    by_pair = {}
    for i, ex in enumerate(corpus):
        by_pair.setdefault(ex.pair, []).append(i)
    partners = []
    for indices in by_pair.values():
        for i in indices:
            for j in indices:
                if i != j and len(corpus[i].prompt) == len(corpus[j].prompt):
                    partners.append((i, j))
    return partners


class Interchange(object):
    """
    Builds interchange batches. A full row puts the source prompt's answer
    after the target prompt and swaps every planted head; a partial row
    keeps the target's own sequence and swaps a strict subset. Odd heads
    are swapped with probability one half in both. Pattern rows from the
    final prompt position up to the source sequence length are swapped.
    """

    def __init__(self, corpus, partners, inputs, targets, mask, layer, n_heads, full, gen):
        self.partners = partners
        self.corpus = corpus
        self.inputs, self.targets, self.mask = inputs, targets, mask
        self.layer = layer
        self.n_heads = n_heads
        self.planted = list(range(0, n_heads, 2))
        self.others = list(range(1, n_heads, 2))
        self.full = full
        self.gen = gen

    def batch(self, size):
        picks = torch.randint(len(self.partners), (size,), generator=self.gen).tolist()
        width = self.inputs.shape[1]
        source = self.inputs.new_empty((size, width))
        tokens = self.inputs.new_empty((size, width))
        targets = self.targets.new_empty((size, width))
        mask = self.mask.new_empty((size, width))
        rows = torch.zeros((size, width), dtype=torch.bool)
        heads = torch.zeros((size, self.n_heads), dtype=torch.bool)
        for r, k in enumerate(picks):
            i, j = self.partners[k]
            prompt_len = len(self.corpus[i].prompt)
            source[r] = self.inputs[i]
            full = len(self.planted) < 2 or float(torch.rand((), generator=self.gen)) < self.full
            if full:
                tokens[r] = self.inputs[i]
                tokens[r, :prompt_len] = self.inputs[j, :prompt_len]
                targets[r], mask[r] = self.targets[i], self.mask[i]
                heads[r, self.planted] = True
            else:
                tokens[r], targets[r], mask[r] = self.inputs[j], self.targets[j], self.mask[j]
                order = torch.randperm(len(self.planted), generator=self.gen)
                count = int(torch.randint(1, len(self.planted), (), generator=self.gen))
                heads[r, [self.planted[int(h)] for h in order[:count]]] = True
            for h in self.others:
                if float(torch.rand((), generator=self.gen)) < 0.5:
                    heads[r, h] = True
            rows[r, prompt_len - 1:prompt_len + len(self.corpus[i].answer)] = True
        return source, tokens, targets, mask, rows[:, None, :, None] & heads[:, :, None, None]

    def hooks(self, swap):
        captured = {}

        def capture(layer, pattern):
            if layer == self.layer:
                captured["pattern"] = pattern
            return pattern

        def transplant(layer, pattern):
            if layer != self.layer:
                return pattern
            return torch.where(swap, captured["pattern"], pattern)

        return capture, transplant


def _masked_ce(logits, targets, mask):
    V = logits.shape[-1]
    ce = F.cross_entropy(logits.reshape(-1, V), targets.reshape(-1), reduction="none")
    m = mask.reshape(-1)
    return (ce * m).sum() / m.sum()


def train_toy(model_config, corpus, train_config, end_id):
    """Train from a seeded init; answer-token cross-entropy plus the interchange term."""
    if not corpus:
        raise ConfigError("training corpus is empty")
    longest = max(len(ex.prompt) + len(ex.answer) for ex in corpus)
    if longest > model_config.max_seq:
        raise ConfigError(f"corpus has a {longest}-token example, max_seq is {model_config.max_seq}")

    torch.manual_seed(train_config.seed)
    init = init_checkpoint(model_config, seed=train_config.seed)
    params = {name: torch.nn.Parameter(t.clone()) for name, t in init.tensors.items()}
    opt = torch.optim.Adam(params.values(), lr=train_config.learning_rate, betas=tuple(train_config.betas))
    gen = torch.Generator().manual_seed(train_config.seed)
    inputs, targets, mask = _pack(corpus, end_id)

    interchange = None
    if train_config.interchange_batch > 0 and train_config.interchange_weight > 0:
        partners = partner_examples(corpus)
        if not partners:
            logger.warning("no pair appears in two formats; training without interchange batches")
        else:
            interchange = Interchange(corpus, partners, inputs, targets, mask,
                                      train_config.planted_layer(model_config.n_layers), model_config.n_heads,
                                      train_config.interchange_full, gen)
            logger.info(f"interchange training at layer {interchange.layer}, heads {interchange.planted}, "
                        f"{len(partners)} partner examples")

    def batch_loss(idx):
        return _masked_ce(batched_logits(model_config, params, inputs[idx]), targets[idx], mask[idx])

    def interchange_loss():
        source, tokens, swap_targets, swap_mask, swap = interchange.batch(train_config.interchange_batch)
        capture, transplant = interchange.hooks(swap)
        with torch.no_grad():
            batched_logits(model_config, params, source, pattern_hook=capture)
        logits = batched_logits(model_config, params, tokens, pattern_hook=transplant)
        return _masked_ce(logits, swap_targets, swap_mask)

    with torch.no_grad():
        initial_loss = batch_loss(torch.arange(min(len(corpus), 512))).item()
    logger.info(f"training {train_config.steps} steps on {len(corpus)} examples, initial loss {initial_loss:.4f}")
    started = time.monotonic()

    loss_curve = [{"step": 0, "loss": initial_loss}]
    loss = None
    for step in range(1, train_config.steps + 1):
        idx = torch.randint(len(corpus), (train_config.batch_size,), generator=gen)
        loss = batch_loss(idx)
        swap_loss = None
        if interchange is not None:
            swap_loss = interchange_loss()
            loss = loss + train_config.interchange_weight * swap_loss
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became {loss.item()} at step {step}; retry with a learning rate below {train_config.learning_rate}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params.values(), train_config.grad_clip)
        opt.step()
        if step % train_config.log_every == 0 or step == train_config.steps:
            point = {"step": step, "loss": loss.item()}
            if swap_loss is not None:
                point["interchange_loss"] = swap_loss.item()
            loss_curve.append(point)
            logger.info(f"step {step}/{train_config.steps}: loss {point['loss']:.4f}")

    with torch.no_grad():
        final_loss = batch_loss(torch.arange(min(len(corpus), 512))).item()
    logger.info(f"training finished in {time.monotonic() - started:.1f}s, final loss {final_loss:.4f}")
    extra = {"initial_loss": initial_loss, "loss_curve": loss_curve, "train": train_config.to_dict()}
    if interchange is not None:
        extra["interchange"] = {"layer": interchange.layer, "heads": interchange.planted}
    return Checkpoint(model_config, {n: p.detach() for n, p in params.items()}, Provenance(
        seed=train_config.seed,
        steps=train_config.steps,
        final_loss=final_loss,
        extra=extra,
    ))


class Outcome(Enum):
    CORRECT = "correct"
    BUG = "bug"
    INCOHERENT = "incoherent"


def classify(text, pair):
    """Correct: the larger operand. Bug: the other operand. Anything else is incoherent."""
    if text == pair.correct:
        return Outcome.CORRECT
    if text in (pair.a, pair.b):
        return Outcome.BUG
    return Outcome.INCOHERENT


def answer_text(ckpt, vocab, prompt_tokens, max_new=Defaults.MAX_NEW_TOKENS, plan=None):
    seq = generate_greedy(ckpt.config, ckpt, prompt_tokens, max_new, end_token=vocab.end_id, plan=plan)
    return vocab.detokenize(seq[len(prompt_tokens):])


@dataclass
class FormatResult:
    fmt: PromptFormat
    correct: int = 0
    bug: int = 0
    incoherent: int = 0
    examples: list = field(default_factory=list)

    @property
    def trials(self):
        return self.correct + self.bug + self.incoherent

    @property
    def errors(self):
        return self.bug + self.incoherent

    @property
    def error_rate(self):
        return self.errors / self.trials if self.trials else None


@dataclass
class FormatEvaluation:
    results: list
    n_pairs: int
    n_trials: int
    level: float = Defaults.CONFIDENCE_LEVEL
    metadata: dict = field(default_factory=dict)

    def result(self, fmt):
        for r in self.results:
            if r.fmt == fmt:
                return r
        return None

    def rows(self):
        out = []
        for r in self.results:
            ci = exact_binomial_ci(r.errors, r.trials, self.level)
            out.append({
                "format": r.fmt.value,
                "trials": r.trials,
                "correct": r.correct,
                "bug": r.bug,
                "incoherent": r.incoherent,
                "error_rate": r.error_rate,
                "ci_lower": ci.lower,
                "ci_upper": ci.upper,
            })
        return out

    def to_dict(self):
        return {
            "schema": "patchlab.formats/1",
            "n_pairs": self.n_pairs,
            "n_trials": self.n_trials,
            "level": self.level,
            "metadata": self.metadata,
            "formats": self.rows(),
            "examples": {r.fmt.value: r.examples for r in self.results},
        }

    def curves(self):
        return []


def evaluate_formats(ckpt, vocab, pairs, n_trials=1, formats=tuple(PromptFormat),
                     max_new=Defaults.MAX_NEW_TOKENS, threads=None):
    """
    Error = generated answer differs from the true larger value. Greedy
    decoding makes each prompt's outcome fixed, so n_trials only scales the
    counts.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be at least 1, got {n_trials}")
    if not pairs:
        return FormatEvaluation(results=[], n_pairs=0, n_trials=n_trials)
    jobs = [(fmt, pair) for fmt in formats for pair in pairs]

    def run(job):
        fmt, pair = job
        text = answer_text(ckpt, vocab, vocab.tokenize(pair.render(fmt)), max_new)
        return text, classify(text, pair)

    outcomes = CommandUtils.ordered_map(run, jobs, threads)
    results = {fmt: FormatResult(fmt) for fmt in formats}
    for (fmt, pair), (text, outcome) in zip(jobs, outcomes):
        r = results[fmt]
        setattr(r, outcome.value, getattr(r, outcome.value) + n_trials)
        if len(r.examples) < 5:
            r.examples.append({"pair": str(pair), "answer": text, "outcome": outcome.value})
    for r in results.values():
        logger.info(f"format {r.fmt.value}: error rate {r.error_rate:.3f} over {r.trials} trials")
    return FormatEvaluation(results=[results[f] for f in formats], n_pairs=len(pairs), n_trials=n_trials)
