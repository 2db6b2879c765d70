# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Experimental protocols as sweeps over a subject.

A subject is anything with

    n_layers, n_heads, digest
    trial_pair(trial)                       -> OperandPair
    baseline(pair, fmt)                     -> Outcome
    transplant(pair, layer, heads, fraction, site, source_fmt, target_fmt, variant)
                                            -> Outcome
    ablate(pair, neurons, alpha, fmt)       -> Outcome

ModelSubject drives a real checkpoint; PlantedSubject is a mock with
analytically known thresholds. Greedy decoding makes each prompt's outcome
fixed, so trials vary the operand pair: trial t uses subject.trial_pair(t).
"""

import itertools
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from bugforge import FIXTURE_PAIRS, Outcome, PromptFormat, answer_text, classify
from commandutils import CommandUtils
from defaults import Defaults
from errors import ConfigError, SweepError
from model import forward_trace
from patching import FROM_FINAL_PROMPT, ablation_plan, blend_plan
from statsreport import GridPoint, SweepReport

logger = logging.getLogger("patchlab")

PARITIES = ("even", "odd", "mixed")
PROTOCOLS = ("layers", "heads", "fraction", "alpha", "bidirectional", "random_control", "generalize")
TRIALS_NOTE = "trials vary the operand pair; decoding is greedy"
HEAD_SUBSET_NOTE = "blend 1.0 on the selected heads, unselected heads untouched"


def trial_pairs(held_out, fixture=FIXTURE_PAIRS):
    """Disagreeing fixture pairs first, then the disagreeing held-out pairs not already among them."""
    first = [p for p in fixture if p.disagrees]
    return first + [p for p in held_out if p.disagrees and p not in first]


class ModelSubject(object):
    def __init__(self, ckpt, vocab, pairs, max_new=Defaults.MAX_NEW_TOKENS, positions=FROM_FINAL_PROMPT):
        if not pairs:
            raise SweepError("a model subject needs at least one operand pair")
        self.ckpt = ckpt
        self.vocab = vocab
        self.pairs = list(pairs)
        self.max_new = max_new
        self.positions = positions
        self.n_layers = ckpt.config.n_layers
        self.n_heads = ckpt.config.n_heads
        self.d_mlp = ckpt.config.d_mlp
        self.digest = ckpt.digest
        self._sources = {}
        self._lock = threading.Lock()

    def trial_pair(self, trial):
        return self.pairs[trial % len(self.pairs)]

    def prompt(self, pair, fmt):
        return self.vocab.tokenize(pair.render(fmt))

    def answer(self, pair, fmt, plan=None):
        return answer_text(self.ckpt, self.vocab, self.prompt(pair, fmt), self.max_new, plan=plan)

    def baseline(self, pair, fmt):
        return classify(self.answer(pair, fmt), pair)

    def source_trace(self, pair, fmt):
        """Trace of the prompt followed by the model's own greedy answer."""
        key = (pair, fmt)
        with self._lock:
            cached = self._sources.get(key)
        if cached is not None:
            return cached
        prompt = self.prompt(pair, fmt)
        answer = self.vocab.tokenize(self.answer(pair, fmt))
        trace = forward_trace(self.ckpt.config, self.ckpt, prompt + answer, prompt_len=len(prompt))
        with self._lock:
            self._sources.setdefault(key, trace)
        return trace

    def transplant(self, pair, layer, heads, fraction, site, source_fmt, target_fmt, variant="convex"):
        source = self.source_trace(pair, source_fmt)
        plan = blend_plan(source, layer, site, fraction, heads=heads if site == "attn_pattern" else None,
                          positions=self.positions, variant=variant)
        return classify(self.answer(pair, target_fmt, plan), pair)

    def ablate(self, pair, neurons, alpha, fmt):
        if not neurons:
            return self.baseline(pair, fmt)
        return classify(self.answer(pair, fmt, ablation_plan(neurons, alpha)), pair)


@dataclass
class PlantedSubject:
    """
    Mock subject with planted step functions.

    A transplant from a format with a different baseline succeeds iff the
    layer is planted, at least head_threshold planted-good heads are
    selected and the fraction is at least fraction_threshold. Full-layer
    (resid_post) patches always come out incoherent. Ablation repairs the
    bug iff every hijacker neuron is set to alpha <= alpha_threshold.
    """
    n_layers: int = 8
    n_heads: int = 8
    d_mlp: int = 16
    good_heads: tuple = (0, 2, 4, 6)
    head_threshold: int = 4
    fraction_threshold: float = 0.6
    good_layers: tuple = (3,)
    hijackers: tuple = ()
    alpha_threshold: float = -2.0
    pairs: tuple = FIXTURE_PAIRS
    buggy_formats: tuple = (PromptFormat.QA, PromptFormat.CHAT)

    @property
    def digest(self):
        return CommandUtils.digest_of({k: getattr(self, k) for k in self.__dataclass_fields__})

    def trial_pair(self, trial):
        return self.pairs[trial % len(self.pairs)]

    def baseline(self, pair, fmt):
        if fmt in self.buggy_formats and pair.disagrees:
            return Outcome.BUG
        return Outcome.CORRECT

    def transplant(self, pair, layer, heads, fraction, site, source_fmt, target_fmt, variant="convex"):
        if site == "resid_post":
            return Outcome.INCOHERENT
        source, target = self.baseline(pair, source_fmt), self.baseline(pair, target_fmt)
        if source == target:
            return target
        heads = range(self.n_heads) if heads is None else heads
        good = sum(1 for h in heads if h in self.good_heads)
        if layer in self.good_layers and good >= self.head_threshold and fraction >= self.fraction_threshold:
            return source
        return target

    def ablate(self, pair, neurons, alpha, fmt):
        base = self.baseline(pair, fmt)
        if base != Outcome.BUG or not self.hijackers:
            return base
        if set(self.hijackers) <= set(map(tuple, neurons)) and alpha <= self.alpha_threshold:
            return Outcome.CORRECT
        return base


def detect_step(xs, ys, level=Defaults.SUCCESS_LEVEL):
    """
    Grid location where a single upward step crosses level, or None when the
    curve is not one clean step (no crossing, or crossing more than once).
    """
    above = [y is not None and y >= level for y in ys]
    if not any(above):
        return None
    first = above.index(True)
    if not all(above[first:]):
        return None
    return xs[first]


def success_bands(xs, ys, level=Defaults.SUCCESS_LEVEL):
    """Contiguous runs of grid points with rate above level, as (first, last) pairs."""
    bands = []
    start = None
    for i, y in enumerate(ys):
        hit = y is not None and y > level
        if hit and start is None:
            start = i
        if not hit and start is not None:
            bands.append((xs[start], xs[i - 1]))
            start = None
    if start is not None:
        bands.append((xs[start], xs[-1]))
    return bands


def _run_trials(subject, trials, fn):
    point = {o: 0 for o in Outcome}
    for t in range(trials):
        point[fn(subject.trial_pair(t))] += 1
    return point


def _grid_point(key, counts, goal="correct", detail=None):
    return GridPoint(key=key, correct=counts[Outcome.CORRECT], bug=counts[Outcome.BUG],
                     incoherent=counts[Outcome.INCOHERENT], goal=goal, detail=detail or {})


def _check_trials(trials):
    if trials < 1:
        raise SweepError(f"trials must be >= 1, got {trials}")


def _base_metadata(subject, protocol, **params):
    meta = {"protocol": protocol, "subject_digest": subject.digest, "trials_note": TRIALS_NOTE}
    for k, v in params.items():
        meta[k] = v.value if isinstance(v, PromptFormat) else v
    return meta


def run_layer_sweep(subject, layers, site="attn_pattern", trials=Defaults.TRIALS, fraction=1.0, heads=None,
                    source_fmt=PromptFormat.SIMPLE, target_fmt=PromptFormat.QA, threads=None):
    _check_trials(trials)
    layers = list(layers)
    if not layers:
        raise SweepError("layer sweep needs at least one layer")
    bad = [layer for layer in layers if not 0 <= layer < subject.n_layers]
    if bad:
        raise SweepError(f"layers {bad} outside 0..{subject.n_layers - 1}")

    def run(layer):
        counts = _run_trials(subject, trials, lambda pair: subject.transplant(
            pair, layer, heads, fraction, site, source_fmt, target_fmt))
        logger.info(f"layer sweep {site} L{layer}: {counts[Outcome.CORRECT]}/{trials} correct")
        return _grid_point({"layer": layer}, counts)

    points = CommandUtils.ordered_map(run, layers, threads)
    rates = [p.rate() for p in points]
    meta = _base_metadata(subject, "layers", site=site, fraction=fraction, heads=heads,
                          source_format=source_fmt, target_format=target_fmt, trials=trials)
    meta["success_bands"] = [list(b) for b in success_bands(layers, rates)]
    return SweepReport(protocol="layers", points=points, metadata=meta, axis="layer")


def head_candidates(n_heads, parity):
    if parity == "even":
        return [h for h in range(n_heads) if h % 2 == 0]
    if parity == "odd":
        return [h for h in range(n_heads) if h % 2 == 1]
    if parity == "mixed":
        return list(range(n_heads))
    raise SweepError(f"unknown parity '{parity}', expected one of {', '.join(PARITIES)}")


def head_subsets(candidates, k, max_subsets=Defaults.MAX_SUBSETS, seed=Defaults.SEED):
    """All C(m, k) subsets when within the cap, else a seeded sample of max_subsets distinct ones."""
    m = len(candidates)
    if not 1 <= k <= m:
        raise SweepError(f"k={k} outside 1..{m}")
    if math.comb(m, k) <= max_subsets:
        return [tuple(s) for s in itertools.combinations(candidates, k)], False
    rng = np.random.default_rng([seed, k])
    chosen = set()
    while len(chosen) < max_subsets:
        idx = sorted(rng.choice(m, size=k, replace=False).tolist())
        chosen.add(tuple(candidates[i] for i in idx))
    return sorted(chosen), True


def run_head_subset_sweep(subject, layer, parity, k_values, max_subsets=Defaults.MAX_SUBSETS, trials=Defaults.TRIALS,
                          seed=Defaults.SEED, fraction=1.0, source_fmt=PromptFormat.SIMPLE,
                          target_fmt=PromptFormat.QA, threads=None):
    _check_trials(trials)
    if not 0 <= layer < subject.n_layers:
        raise SweepError(f"layer {layer} outside 0..{subject.n_layers - 1}")
    candidates = head_candidates(subject.n_heads, parity)
    k_values = list(k_values)
    if not k_values:
        raise SweepError("head subset sweep needs at least one k")

    jobs = []
    sampled = {}
    for k in k_values:
        subsets, was_sampled = head_subsets(candidates, k, max_subsets, seed)
        sampled[k] = was_sampled
        jobs += [(k, s) for s in subsets]

    def run(job):
        k, subset = job
        return _run_trials(subject, trials, lambda pair: subject.transplant(
            pair, layer, subset, fraction, "attn_pattern", source_fmt, target_fmt))

    results = CommandUtils.ordered_map(run, jobs, threads)
    points = []
    for k in k_values:
        per_subset = []
        totals = {o: 0 for o in Outcome}
        for (jk, subset), counts in zip(jobs, results):
            if jk != k:
                continue
            for o in Outcome:
                totals[o] += counts[o]
            per_subset.append({"heads": list(subset), **{o.value: counts[o] for o in Outcome}})
        point = _grid_point({"k": k, "parity": parity}, totals,
                            detail={"subsets": len(per_subset), "sampled": sampled[k], "per_subset": per_subset})
        logger.info(f"head sweep L{layer} {parity} k={k}: {len(per_subset)} subsets, rate {point.rate():.3f}")
        points.append(point)

    meta = _base_metadata(subject, "heads", layer=layer, parity=parity, max_subsets=max_subsets, seed=seed,
                          fraction=fraction, source_format=source_fmt, target_format=target_fmt, trials=trials,
                          patch_assumption=HEAD_SUBSET_NOTE)
    meta["threshold_k"] = detect_step(k_values, [p.rate() for p in points])
    return SweepReport(protocol="heads", points=points, metadata=meta, axis="k")


def run_fraction_sweep(subject, layer, heads, grid=Defaults.FRACTION_GRID, trials=Defaults.TRIALS, variant="convex",
                       source_fmt=PromptFormat.SIMPLE, target_fmt=PromptFormat.QA, threads=None):
    _check_trials(trials)
    grid = list(grid)
    if not grid:
        raise SweepError("fraction sweep needs a non-empty grid")
    bad = [lam for lam in grid if not 0.0 <= lam <= 1.0]
    if bad:
        raise SweepError(f"fractions {bad} outside [0, 1]")

    def run(lam):
        counts = _run_trials(subject, trials, lambda pair: subject.transplant(
            pair, layer, heads, lam, "attn_pattern", source_fmt, target_fmt, variant))
        logger.info(f"fraction sweep L{layer} lambda={lam}: {counts[Outcome.CORRECT]}/{trials} correct")
        return _grid_point({"fraction": lam}, counts)

    points = CommandUtils.ordered_map(run, grid, threads)
    meta = _base_metadata(subject, "fraction", layer=layer, heads=None if heads is None else list(heads),
                          variant=variant, source_format=source_fmt, target_format=target_fmt, trials=trials)
    meta["threshold_fraction"] = detect_step(grid, [p.rate() for p in points])
    return SweepReport(protocol="fraction", points=points, metadata=meta, axis="fraction")


def run_alpha_sweep(subject, neurons, grid=Defaults.ALPHA_GRID, trials=Defaults.ALPHA_TRIALS, fmt=PromptFormat.QA,
                    protocol="alpha", threads=None):
    _check_trials(trials)
    grid = list(grid)
    if not grid or not all(math.isfinite(a) for a in grid):
        raise SweepError("alpha sweep needs a non-empty grid of finite values")
    neurons = [tuple(n) for n in neurons]

    def run(alpha):
        counts = _run_trials(subject, trials, lambda pair: subject.ablate(pair, neurons, alpha, fmt))
        logger.info(f"{protocol} sweep alpha={alpha}: bug {counts[Outcome.BUG]}/{trials}"
                    f" incoherent {counts[Outcome.INCOHERENT]}/{trials}")
        return _grid_point({"alpha": alpha}, counts)

    points = CommandUtils.ordered_map(run, grid, threads)
    meta = _base_metadata(subject, protocol, neurons=[list(n) for n in neurons], format=fmt, trials=trials)
    return SweepReport(protocol=protocol, points=points, metadata=meta, axis="alpha", plotted=("bug", "incoherent"))


def random_neurons(layers, d_mlp, size, seed=Defaults.SEED, exclude=()):
    """Seeded random (layer, index) set of the given size, avoiding exclude."""
    pool = [(layer, i) for layer in layers for i in range(d_mlp) if (layer, i) not in set(map(tuple, exclude))]
    if size > len(pool):
        raise SweepError(f"cannot draw {size} neurons from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=size, replace=False)
    return sorted(pool[i] for i in picks.tolist())


def run_random_control(subject, layers, size, grid=Defaults.ALPHA_GRID, trials=Defaults.ALPHA_TRIALS, seed=Defaults.SEED,
                       exclude=(), fmt=PromptFormat.QA, threads=None):
    neurons = random_neurons(layers, subject.d_mlp, size, seed, exclude)
    report = run_alpha_sweep(subject, neurons, grid, trials, fmt, protocol="random_control", threads=threads)
    report.metadata["control_seed"] = seed
    return report


def run_bidirectional(subject, layer, heads, trials=Defaults.TRIALS, fraction=1.0,
                      good_fmt=PromptFormat.SIMPLE, bad_fmt=PromptFormat.QA, site="attn_pattern"):
    """Forward: good-format pattern into the bad format (goal: correct). Reverse: the other way (goal: bug)."""
    _check_trials(trials)
    forward = _run_trials(subject, trials, lambda pair: subject.transplant(pair, layer, heads, fraction, site, good_fmt, bad_fmt))
    reverse = _run_trials(subject, trials, lambda pair: subject.transplant(pair, layer, heads, fraction, site, bad_fmt, good_fmt))
    points = [
        _grid_point({"direction": "forward"}, forward, goal="correct"),
        _grid_point({"direction": "reverse"}, reverse, goal="bug"),
    ]
    logger.info(f"bidirectional L{layer}: repair {points[0].rate():.3f} induction {points[1].rate():.3f}")
    meta = _base_metadata(subject, "bidirectional", layer=layer, heads=None if heads is None else list(heads),
                          fraction=fraction, good_format=good_fmt, bad_format=bad_fmt, site=site, trials=trials)
    meta["repair_rate"] = points[0].rate()
    meta["induction_rate"] = points[1].rate()
    return SweepReport(protocol="bidirectional", points=points, metadata=meta)


def run_pair_generalization(subject, pairs, layer, heads, fraction=1.0, trials=1, good_fmt=PromptFormat.SIMPLE,
                            bad_fmt=PromptFormat.QA, threads=None):
    """Per pair: baseline outcome in every format; the transplant is run only where the bug shows."""
    _check_trials(trials)

    def run(pair):
        baselines = {fmt.value: subject.baseline(pair, fmt).value for fmt in PromptFormat}
        manifests = baselines[bad_fmt.value] == Outcome.BUG.value
        counts = {o: 0 for o in Outcome}
        if manifests:
            for _ in range(trials):
                counts[subject.transplant(pair, layer, heads, fraction, "attn_pattern", good_fmt, bad_fmt)] += 1
        return _grid_point({"pair": str(pair)}, counts, detail={"baseline": baselines, "bug_manifests": manifests})

    points = CommandUtils.ordered_map(run, list(pairs), threads)
    manifesting = [p for p in points if p.detail["bug_manifests"]]
    repaired = [p for p in manifesting if p.rate() >= Defaults.SUCCESS_LEVEL]
    meta = _base_metadata(subject, "generalize", layer=layer, heads=None if heads is None else list(heads),
                          fraction=fraction, good_format=good_fmt, bad_format=bad_fmt, trials=trials)
    meta["manifesting_pairs"] = len(manifesting)
    meta["repaired_pairs"] = len(repaired)
    return SweepReport(protocol="generalize", points=points, metadata=meta)


@dataclass
class SweepSpec:
    protocol: str
    layer: int = 0
    layers: list = field(default_factory=list)
    site: str = "attn_pattern"
    parity: str = "even"
    k_values: list = field(default_factory=list)
    max_subsets: int = Defaults.MAX_SUBSETS
    heads: list = None
    fractions: list = field(default_factory=lambda: list(Defaults.FRACTION_GRID))
    fraction: float = 1.0
    variant: str = "convex"
    alphas: list = field(default_factory=lambda: list(Defaults.ALPHA_GRID))
    neurons: list = field(default_factory=list)
    trials: int = Defaults.TRIALS
    seed: int = Defaults.SEED
    source_format: str = "simple"
    target_format: str = "qa"

    known_keys = {
        'protocol', 'layer', 'layers', 'site', 'parity', 'k_values', 'max_subsets', 'heads', 'fractions',
        'fraction', 'variant', 'alphas', 'neurons', 'trials', 'seed', 'source_format', 'target_format',
    }

    @staticmethod
    def from_config(config, protocol=None, seed=Defaults.SEED):
        CommandUtils.check_known_keys(config, SweepSpec.known_keys, "sweep")
        values = dict(config)
        if protocol is not None:
            values['protocol'] = protocol
        values.setdefault('seed', seed)
        if values.get('protocol') not in PROTOCOLS:
            raise ConfigError(f"unknown sweep protocol '{values.get('protocol')}', expected one of {', '.join(PROTOCOLS)}")
        spec = SweepSpec(**values)
        if spec.trials < 1:
            raise ConfigError(f"sweep trials must be >= 1, got {spec.trials}")
        if spec.parity not in PARITIES:
            raise ConfigError(f"unknown parity '{spec.parity}'")
        return spec


def run_sweep(subject, spec, pairs=None, threads=None):
    src, tgt = PromptFormat.parse(spec.source_format), PromptFormat.parse(spec.target_format)
    if spec.protocol == "layers":
        layers = spec.layers or list(range(subject.n_layers))
        return run_layer_sweep(subject, layers, spec.site, spec.trials, spec.fraction, spec.heads, src, tgt, threads)
    if spec.protocol == "heads":
        k_values = spec.k_values or list(range(1, len(head_candidates(subject.n_heads, spec.parity)) + 1))
        return run_head_subset_sweep(subject, spec.layer, spec.parity, k_values, spec.max_subsets, spec.trials,
                                     spec.seed, spec.fraction, src, tgt, threads)
    if spec.protocol == "fraction":
        return run_fraction_sweep(subject, spec.layer, spec.heads, spec.fractions, spec.trials, spec.variant, src, tgt, threads)
    if spec.protocol == "alpha":
        return run_alpha_sweep(subject, spec.neurons, spec.alphas, spec.trials, tgt, threads=threads)
    if spec.protocol == "random_control":
        layers = spec.layers or list(range(subject.n_layers))
        return run_random_control(subject, layers, Defaults.HIJACKER_SIZE, spec.alphas, spec.trials, spec.seed,
                                  fmt=tgt, threads=threads)
    if spec.protocol == "bidirectional":
        return run_bidirectional(subject, spec.layer, spec.heads, spec.trials, spec.fraction, src, tgt, spec.site)
    return run_pair_generalization(subject, pairs or list(subject.pairs), spec.layer, spec.heads, spec.fraction,
                                   spec.trials, src, tgt, threads)
