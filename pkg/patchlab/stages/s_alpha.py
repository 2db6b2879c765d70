# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from defaults import Defaults
from lens import differential_scores, hijacker_set, neuron_activations, scores_report
from statsreport import TableReport
from sweeps import run_alpha_sweep, run_random_control

stage_order = commons.ALPHA
enabled = True


def semantic_control(lab, neurons, bad_trace, good_trace, position):
    """Hijacker activations on the buggy prompt, the repaired prompt and an unrelated agreeing pair."""
    unrelated_pair = next((p for p in lab.eval_pairs + lab.train_pairs if not p.disagrees), None)
    unrelated = None
    if unrelated_pair is not None:
        split = commons.answer_split(lab.vocab, unrelated_pair, commons.BAD_FORMAT)
        unrelated = neuron_activations(commons.split_trace(lab, split, keep_head_out=False), neurons, split.position)
    bad = neuron_activations(bad_trace, neurons, position)
    good = neuron_activations(good_trace, neurons, position)
    rows = []
    for i, (layer, index) in enumerate(neurons):
        rows.append({
            "layer": layer,
            "neuron": index,
            commons.BAD_FORMAT.value: bad[i],
            commons.GOOD_FORMAT.value: good[i],
            "unrelated": None if unrelated is None else unrelated[i],
        })
    return TableReport(kind="semantic_control", table=rows,
                       extra={"unrelated_pair": None if unrelated_pair is None else str(unrelated_pair)})


def execute(lab):
    section = lab.run.sweep_section("alpha")
    trials = commons.trials(lab, "alpha", Defaults.ALPHA_TRIALS)
    grid = section.get('alphas', list(Defaults.ALPHA_GRID))
    size = section.get('hijacker_size', Defaults.HIJACKER_SIZE)

    splits, traces = lab.state["splits"], lab.state["split_traces"]
    bad_trace, good_trace = traces[commons.BAD_FORMAT], traces[commons.GOOD_FORMAT]
    position = splits[commons.BAD_FORMAT].position
    scores = differential_scores(bad_trace, good_trace, position=position)
    neurons = hijacker_set(scores, size)
    lab.emit(scores_report(scores, metadata={"position": position, "pair": str(lab.fixture_pairs[0])}), "diff_scores")
    if not neurons:
        lab.logger.warning("no neuron fires more on the buggy format; skipping ablation sweeps")
        return
    lab.state["hijackers"] = neurons

    lab.emit(run_alpha_sweep(lab.subject, neurons, grid, trials, commons.BAD_FORMAT), "sweep_alpha")
    control = run_random_control(lab.subject, range(lab.subject.n_layers), len(neurons), grid, trials,
                                 seed=lab.seed, exclude=neurons, fmt=commons.BAD_FORMAT)
    lab.emit(control, "random_control")
    lab.emit(semantic_control(lab, neurons, bad_trace, good_trace, position), "semantic_control")
