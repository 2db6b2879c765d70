# /*
# * Copyright © 2026 patchlab contributors.
# * SPDX-License-Identifier: Apache-2.0
# */

import commons
from bugforge import FormatEvaluation
from defaults import Defaults
from statsreport import SweepReport, TableReport, bootstrap_ci, exact_binomial_ci

stage_order = commons.STATS
enabled = True


def _counts(lab):
    """(artifact, label, successes, trials) for every rate the run reported."""
    for name in sorted(lab.reports):
        report = lab.reports[name]
        if isinstance(report, SweepReport):
            for p in report.points:
                if p.trials:
                    label = ",".join(f"{k}={v}" for k, v in sorted(p.key.items()))
                    yield name, f"{label} goal={p.goal}", p.successes, p.trials
        elif isinstance(report, FormatEvaluation):
            for r in report.results:
                if r.trials:
                    yield name, f"format={r.fmt.value} errors", r.errors, r.trials


def execute(lab):
    resamples = lab.run.sweep_section("stats").get('resamples', Defaults.BOOTSTRAP_RESAMPLES)
    rows = []
    for artifact, label, successes, trials in _counts(lab):
        exact = exact_binomial_ci(successes, trials)
        outcomes = [1.0] * successes + [0.0] * (trials - successes)
        boot = bootstrap_ci(outcomes, resamples=resamples, seed=lab.seed)
        rows.append({
            "artifact": artifact,
            "point": label,
            "successes": successes,
            "trials": trials,
            "estimate": exact.estimate,
            "exact_lower": exact.lower,
            "exact_upper": exact.upper,
            "bootstrap_lower": boot.lower,
            "bootstrap_upper": boot.upper,
        })
    summary = TableReport(kind="summary", table=rows, extra={
        "level": Defaults.CONFIDENCE_LEVEL,
        "resamples": resamples,
        "layer": lab.state.get("layer"),
        "heads": lab.state.get("heads"),
        "threshold_fraction": lab.state.get("threshold_fraction"),
        "hijackers": [list(n) for n in lab.state.get("hijackers", [])],
    })
    lab.emit(summary, "summary")
