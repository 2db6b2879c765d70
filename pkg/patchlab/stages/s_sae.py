# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from checkpoint import save_activations, save_sae
from defaults import Defaults
from sae import CORRECT, WRONG, analyze_features, collect_pair_activations, relative_mse, train_sae

stage_order = commons.SAE
enabled = True


def execute(lab):
    section = lab.run.section("sae")
    layer = lab.state["layer"]
    pairs = commons.disagreeing(lab.train_pairs + lab.eval_pairs)
    data, traces = collect_pair_activations(lab.ckpt, lab.vocab, pairs, layer, commons.BAD_FORMAT, commons.GOOD_FORMAT,
                                            keep=section.get('correlation_traces', 32))
    acts_path = lab.path("sae_activations.acts")
    save_activations(data, acts_path, metadata=lab.run.metadata(lab.checkpoint_digest))
    lab.add_artifact(acts_path)

    config = lab.run.sae_config(lab.ckpt.config.d_model)
    sae = train_sae(data, config)
    sae_path = lab.path("sae.sae")
    save_sae(sae, sae_path, metadata=lab.run.metadata(lab.checkpoint_digest))
    lab.add_artifact(sae_path)

    report = analyze_features(sae, data.rows(WRONG), data.rows(CORRECT),
                              top_n=section.get('top_n', Defaults.TOP_N_FEATURES), traces=traces, layer=layer)
    report.metadata = {
        "layer": layer,
        "site": data.site,
        "rows": len(data.labels),
        "relative_mse": relative_mse(sae, data.data),
        "eval_relative_mse": sae.provenance["eval_relative_mse"],
        "resampled_features": sae.provenance["resampled_features"],
        "correlation_traces": len(traces),
    }
    lab.emit(report, "sae_features")
    lab.logger.info(f"sae: relative mse {report.metadata['relative_mse']:.4f}, top-{report.top_n} overlap {report.overlap:.2f}")
