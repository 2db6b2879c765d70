# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from defaults import Defaults
from sweeps import run_layer_sweep

stage_order = commons.LAYERS
enabled = True


def best_layer(report):
    """Layer with the highest success rate; ties go to the earliest layer. None when no layer ever succeeds."""
    ranked = sorted(report.points, key=lambda p: (-(p.rate() or 0.0), p.key["layer"]))
    if not ranked or not (ranked[0].rate() or 0.0) > 0.0:
        return None
    return ranked[0].key["layer"]


def select_layer(lab, section, report):
    """(layer, how it was chosen): the configured layer, the sweep's best layer, or the planted layer."""
    if 'layer' in section:
        return section['layer'], "config"
    layer = best_layer(report)
    if layer is not None:
        return layer, "sweep"
    layer = commons.planted_layer(lab)
    lab.logger.warning(f"no layer repairs the bug with an attention transplant; falling back to layer {layer}")
    return layer, "fallback"


def execute(lab):
    section = lab.run.sweep_section("layers")
    trials = commons.trials(lab, "layers", Defaults.TRIALS)
    layers = section.get('layers') or list(range(lab.subject.n_layers))

    pattern = run_layer_sweep(lab.subject, layers, site="attn_pattern", trials=trials,
                              source_fmt=commons.GOOD_FORMAT, target_fmt=commons.BAD_FORMAT)
    layer, chosen_by = select_layer(lab, section, pattern)
    pattern.metadata["selected_layer"] = layer
    pattern.metadata["selected_by"] = chosen_by
    lab.emit(pattern, "sweep_layers")

    residual = run_layer_sweep(lab.subject, layers, site="resid_post", trials=trials,
                               source_fmt=commons.GOOD_FORMAT, target_fmt=commons.BAD_FORMAT)
    lab.emit(residual, "sweep_layers_resid")

    lab.state["layer"] = layer
    lab.logger.info(f"attention transplant layer: {layer} ({chosen_by})")
