# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from lens import attribution_report, layer_attribution, lens_curve, lens_report

stage_order = commons.LENS
enabled = True


def execute(lab):
    pair = lab.fixture_pairs[0]
    splits = {fmt: commons.answer_split(lab.vocab, pair, fmt) for fmt in (commons.GOOD_FORMAT, commons.BAD_FORMAT)}
    traces = {fmt: commons.split_trace(lab, split) for fmt, split in splits.items()}
    good, bad = splits[commons.GOOD_FORMAT], splits[commons.BAD_FORMAT]

    curves = {
        fmt.value: lens_curve(traces[fmt], lab.ckpt, good.correct_token, splits[fmt].position)
        for fmt in (commons.GOOD_FORMAT, commons.BAD_FORMAT)
    }
    report = lens_report(curves, metadata={
        "pair": str(pair),
        "token": lab.vocab.symbols[good.correct_token],
        "position": good.position,
    }, symbols=lab.vocab.symbols)
    lab.emit(report, "lens")
    lab.logger.info(f"logit lens on {pair}: divergence layer {report.extra['divergence_layer']}")

    attr_good = layer_attribution(traces[commons.GOOD_FORMAT], lab.ckpt, good.position)
    attr_bad = layer_attribution(traces[commons.BAD_FORMAT], lab.ckpt, bad.position)
    attribution = attribution_report(attr_good, attr_bad, labels=(commons.GOOD_FORMAT.value, commons.BAD_FORMAT.value),
                                     tokens=[good.correct_token, good.buggy_token], metadata={"pair": str(pair)})
    lab.emit(attribution, "attribution")

    lab.state["splits"] = splits
    lab.state["split_traces"] = traces
