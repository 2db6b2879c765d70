# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */

import json
import os
import sys
import traceback
from argparse import SUPPRESS, ArgumentParser

from bugforge import FIXTURE_PAIRS, OperandPair, PromptFormat, answer_text, classify, evaluate_formats
from checkpoint import load_activations, load_sae, load_trace, load_trace_file, save_activations, save_sae, save_trace
from commandutils import CommandUtils
from defaults import Defaults
from errors import ConfigError, PatchlabError
from lens import (attribution_report, differential_scores, layer_attribution, lens_curve, lens_report,
                  scores_report)
from logger import Logger
from model import forward_trace, generate_greedy
from patching import FROM_FINAL_PROMPT, ActivationAddress, PlanFile, PlanSummary, steering_plan, steering_vector
from pipeline import Pipeline, train_checkpoint
from runconfig import RunConfig
from sae import CORRECT, WRONG, analyze_features, collect_pair_activations, relative_mse, train_sae
from statsreport import SweepReport, TableReport, exact_binomial_ci
from sweeps import ModelSubject, SweepSpec, run_sweep, trial_pairs
from vocab import SyntheticVocab

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def error_line(code, kind, message):
    message = " ".join(str(message).split())
    return f"patchlab: error code={code} kind={kind} msg={message}"


class PatchlabArgumentParser(ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(error_line(EXIT_USAGE, "UsageError", message) + "\n")
        sys.exit(EXIT_USAGE)


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _neuron_list(text):
    neurons = []
    for item in text.split(","):
        if not item.strip():
            continue
        layer, _, index = item.partition(":")
        neurons.append([int(layer), int(index)])
    return neurons


def _add_global_options(parser, default):
    parser.add_argument("-c", "--config", dest="config_file", default=default)
    parser.add_argument("-o", "--out-dir", dest="out_dir", default=default)
    parser.add_argument("-s", "--seed", dest="seed", type=int, default=default)
    parser.add_argument("-l", "--log-level", dest="log_level", default=default,
                        choices=["error", "warning", "info", "debug"])
    parser.add_argument("--log-path", dest="log_path", default=default)
    parser.add_argument("-m", "--param", dest="params", action="append", default=default)


def _add_prompt_options(parser):
    group = parser.add_mutually_exclusive_group()
    group.add_argument("-p", "--prompt", dest="prompt")
    group.add_argument("-f", "--prompt-file", dest="prompt_file")
    group.add_argument("--pair", dest="pair", help="operand pair such as '9.8 9.11'")
    parser.add_argument("--format", dest="format", default="simple", choices=[f.value for f in PromptFormat])


def _add_sweep_options(parser):
    parser.add_argument("--checkpoint", dest="checkpoint")
    parser.add_argument("--spec", dest="spec_file", help="YAML sweep spec")
    parser.add_argument("--layer", dest="layer", type=int)
    parser.add_argument("--layers", dest="layers", type=_int_list)
    parser.add_argument("--site", dest="site")
    parser.add_argument("--heads", dest="heads", type=_int_list)
    parser.add_argument("--parity", dest="parity", choices=["even", "odd", "mixed"])
    parser.add_argument("--k", dest="k_values", type=_int_list)
    parser.add_argument("--max-subsets", dest="max_subsets", type=int)
    parser.add_argument("--fraction", dest="fraction", type=float)
    parser.add_argument("--fractions", dest="fractions", type=_float_list)
    parser.add_argument("--variant", dest="variant", choices=["convex", "positions"])
    parser.add_argument("--alphas", dest="alphas", type=_float_list)
    parser.add_argument("--neurons", dest="neurons", type=_neuron_list, help="comma list of layer:index")
    parser.add_argument("--trials", dest="trials", type=int)
    parser.add_argument("--source-format", dest="source_format", choices=[f.value for f in PromptFormat])
    parser.add_argument("--target-format", dest="target_format", choices=[f.value for f in PromptFormat])
    parser.add_argument("--name", dest="name")


def build_parser():
    parser = PatchlabArgumentParser(prog="patchlab")
    _add_global_options(parser, None)
    common = ArgumentParser(add_help=False)
    _add_global_options(common, SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def command(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = command("train-toy", cmd_train_toy, "train the toy model with the planted format bug")
    p.add_argument("--out", dest="out", help="checkpoint path (default <out-dir>/toy.ckpt)")
    p.add_argument("--steps", dest="steps", type=int)

    p = command("eval-formats", cmd_eval_formats, "error rate per prompt format")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--pairs", dest="pair_set", default="eval", choices=["eval", "train", "fixture", "all"])
    p.add_argument("--include-agreeing", dest="include_agreeing", action="store_true")
    p.add_argument("--trials", dest="trials", type=int, default=1)
    p.add_argument("--name", dest="name", default="formats")

    p = command("trace", cmd_trace, "record a full activation trace")
    p.add_argument("--checkpoint", dest="checkpoint")
    _add_prompt_options(p)
    p.add_argument("--with-answer", dest="with_answer", action="store_true")
    p.add_argument("--omit-head-outputs", dest="omit_head_outputs", action="store_true")
    p.add_argument("--out", dest="out")

    p = command("patch", cmd_patch, "run a patch plan and compare answers")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--plan", dest="plan_file", required=True)
    _add_prompt_options(p)
    p.add_argument("--out", dest="out", help="write the patched trace here")
    p.add_argument("--name", dest="name", default="patch")

    for name, protocol, help_text in (
        ("sweep-layers", "layers", "transplant sweep over layers"),
        ("sweep-heads", "heads", "head-subset sweep at one layer"),
        ("sweep-fraction", "fraction", "blend-fraction sweep"),
        ("sweep-alpha", "alpha", "neuron ablation strength sweep"),
        ("bidirectional", "bidirectional", "repair and induction transplants"),
        ("generalize", "generalize", "transplant across operand pairs"),
    ):
        p = command(name, cmd_sweep, help_text)
        p.set_defaults(protocol=protocol)
        _add_sweep_options(p)
        if protocol == "alpha":
            p.add_argument("--from-scores", dest="scores_file", help="diff-score JSON whose hijackers to ablate")
            p.add_argument("--random-control", dest="random_control", action="store_true")
        if protocol == "generalize":
            p.add_argument("--pair", dest="pairs", action="append", default=[])

    p = command("logit-lens", cmd_logit_lens, "lens curve from recorded traces")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--trace", dest="trace", required=True)
    p.add_argument("--compare", dest="compare")
    p.add_argument("--token", dest="token", help="symbol to track (default: the trace's own prediction)")
    p.add_argument("--position", dest="position", type=int)
    p.add_argument("--name", dest="name", default="lens")

    p = command("attribution", cmd_attribution, "per-layer direct logit attribution and KL")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--trace", dest="trace", required=True)
    p.add_argument("--compare", dest="compare", required=True)
    p.add_argument("--position", dest="position", type=int)
    p.add_argument("--tokens", dest="tokens", help="comma list of symbols to tabulate")
    p.add_argument("--name", dest="name", default="attribution")

    p = command("diff-score", cmd_diff_score, "rank MLP neurons by bad - good activation")
    p.add_argument("--bad", dest="bad", required=True)
    p.add_argument("--good", dest="good", required=True)
    p.add_argument("--layers", dest="layers", type=_int_list)
    p.add_argument("--position", dest="position", type=int)
    p.add_argument("--top", dest="top", type=int, default=Defaults.HIJACKER_SIZE * 4)
    p.add_argument("--name", dest="name", default="diff_scores")

    p = command("steer", cmd_steer, "add a good-minus-bad steering vector while generating")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--good", dest="good", required=True)
    p.add_argument("--bad", dest="bad", required=True)
    p.add_argument("--layer", dest="layer", type=int, required=True)
    p.add_argument("--site", dest="site", default="resid_post", choices=["resid_pre", "attn_out", "mlp_out", "resid_post", "mlp_neuron"])
    p.add_argument("--neuron", dest="neuron", type=int)
    p.add_argument("--alphas", dest="alphas", type=_float_list, default=[0.0, 0.5, 1.0, 2.0])
    _add_prompt_options(p)
    p.add_argument("--name", dest="name", default="steer")

    p = command("sae-train", cmd_sae_train, "train a TopK sparse autoencoder")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--acts", dest="acts", help="activation dataset; collected from the task pairs when absent")
    p.add_argument("--layer", dest="layer", type=int)
    p.add_argument("--k", dest="k", type=int)
    p.add_argument("--expansion", dest="expansion", type=int)
    p.add_argument("--steps", dest="steps", type=int)
    p.add_argument("--out", dest="out")

    p = command("sae-analyze", cmd_sae_analyze, "feature overlap, amplification and head alignment")
    p.add_argument("--sae", dest="sae", required=True)
    p.add_argument("--acts", dest="acts", required=True)
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--top-n", dest="top_n", type=int, default=Defaults.TOP_N_FEATURES)
    p.add_argument("--correlate", dest="correlate", type=int, default=0,
                   help="number of buggy-format prompts to correlate features with head outputs")
    p.add_argument("--name", dest="name", default="sae_features")

    p = command("report", cmd_report, "re-render sweep reports and tabulate their intervals")
    p.add_argument("inputs", nargs="*", help="sweep report .json files")
    p.add_argument("--ci", dest="ci", nargs=2, type=int, metavar=("SUCCESSES", "TRIALS"))
    p.add_argument("--level", dest="level", type=float, default=Defaults.CONFIDENCE_LEVEL)
    p.add_argument("--name", dest="name", default="report")

    command("reproduce-all", cmd_reproduce_all, "run every stage and emit all artifacts")
    return parser


def _load(run, options):
    return run.load_checkpoint(getattr(options, 'checkpoint', None))


def _prompt(options, vocab):
    """(prompt tokens, operand pair or None)"""
    fmt = PromptFormat.parse(options.format)
    if options.pair:
        pair = OperandPair.parse(options.pair)
        return vocab.tokenize(pair.render(fmt)), pair
    if options.prompt_file:
        if not os.path.isfile(options.prompt_file):
            raise ConfigError(f"prompt file '{options.prompt_file}' does not exist")
        with open(options.prompt_file, "rt") as f:
            return vocab.tokenize(f.read().rstrip("\n")), None
    if options.prompt:
        return vocab.tokenize(options.prompt), None
    raise ConfigError("give one of --prompt, --prompt-file or --pair")


def _trace_arg(run, path):
    return load_trace(run.require_file(path, "trace"))


def cmd_train_toy(options, run, logger):
    if options.steps is not None:
        run.config['train'] = {**run.section('train'), 'steps': options.steps}
    vocab = SyntheticVocab()
    out = options.out or os.path.join(run.out_dir, "toy.ckpt")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    ckpt, _ = train_checkpoint(run, vocab, out, os.path.splitext(out)[0] + ".train.yaml")
    logger.info(f"checkpoint {out}: digest {ckpt.digest}, final loss {ckpt.provenance.final_loss:.4f}")
    return EXIT_OK


def _task_pairs(run, pair_set):
    if pair_set == "fixture":
        return list(FIXTURE_PAIRS)
    task = run.task_spec()
    train, held_out = task.split()
    return {"eval": held_out, "train": train, "all": train + held_out}[pair_set]


def cmd_eval_formats(options, run, logger):
    ckpt, vocab = _load(run, options)
    pairs = _task_pairs(run, options.pair_set)
    if not options.include_agreeing:
        pairs = [p for p in pairs if p.disagrees]
    if not pairs:
        raise ConfigError(f"no {options.pair_set} pairs to evaluate")
    evaluation = evaluate_formats(ckpt, vocab, pairs, n_trials=options.trials)
    evaluation.metadata = {"pairs": options.pair_set, "include_agreeing": options.include_agreeing}
    run.emit(evaluation, options.name, ckpt.digest)
    return EXIT_OK


def cmd_trace(options, run, logger):
    ckpt, vocab = _load(run, options)
    prompt, _ = _prompt(options, vocab)
    tokens = list(prompt)
    if options.with_answer:
        tokens = generate_greedy(ckpt.config, ckpt, prompt, Defaults.MAX_NEW_TOKENS, end_token=vocab.end_id)
    trace = forward_trace(ckpt.config, ckpt, tokens, prompt_len=len(prompt))
    out = options.out or os.path.join(run.out_dir, "trace.trace")
    save_trace(trace, out, omit_head_outputs=options.omit_head_outputs,
               metadata=run.metadata(ckpt.digest, text=vocab.detokenize(tokens)))
    logger.info(f"trace of {trace.seq_len} tokens ({trace.prompt_len} prompt) written to {out}")
    return EXIT_OK


def cmd_patch(options, run, logger):
    ckpt, vocab = _load(run, options)
    prompt, pair = _prompt(options, vocab)
    plan_path = run.require_file(options.plan_file, "plan file")
    with open(plan_path, "rt") as f:
        plan = PlanFile(lambda path: _trace_arg(run, path)).load(f, params=run.params)
    plan.validate(ckpt.config)
    baseline = answer_text(ckpt, vocab, prompt)
    patched = answer_text(ckpt, vocab, prompt, plan=plan)
    rows = []
    for label, text in (("baseline", baseline), ("patched", patched)):
        row = {"run": label, "answer": text}
        if pair is not None:
            row["outcome"] = classify(text, pair).value
        rows.append(row)
    report = TableReport(kind="patch", table=rows, extra={
        "prompt": vocab.detokenize(prompt),
        "plan": PlanSummary.of(plan).directives,
    })
    run.emit(report, options.name, ckpt.digest)
    if options.out:
        tokens = list(prompt) + vocab.tokenize(patched)
        trace = forward_trace(ckpt.config, ckpt, tokens, plan=plan, prompt_len=len(prompt))
        save_trace(trace, options.out, metadata=run.metadata(ckpt.digest, plan=PlanSummary.of(plan).directives))
    logger.info(f"baseline answer {baseline!r}, patched answer {patched!r}")
    return EXIT_OK


def _sweep_values(options, run):
    values = {k: v for k, v in run.sweep_section(options.protocol).items() if k in SweepSpec.known_keys}
    if options.spec_file:
        values.update(CommandUtils.read_config_file(run.require_file(options.spec_file, "sweep spec"), params=run.params))
    for key in SweepSpec.known_keys:
        value = getattr(options, key, None)
        if value is not None and key != 'protocol':
            values[key] = value
    return values


def cmd_sweep(options, run, logger):
    ckpt, vocab = _load(run, options)
    values = _sweep_values(options, run)
    protocol = options.protocol
    if protocol == "alpha":
        if getattr(options, 'scores_file', None):
            with open(run.require_file(options.scores_file, "score report"), "rt") as f:
                values['neurons'] = json.load(f).get("hijackers", [])
        if options.random_control:
            protocol = "random_control"
        elif not values.get('neurons'):
            raise ConfigError("alpha sweep needs --neurons or --from-scores")
    spec = SweepSpec.from_config(values, protocol=protocol, seed=run.seed)
    _, held_out = run.task_spec().split()
    subject = ModelSubject(ckpt, vocab, trial_pairs(held_out))
    pairs = None
    if protocol == "generalize":
        pairs = [OperandPair.parse(p) for p in options.pairs] or list(FIXTURE_PAIRS)
    report = run_sweep(subject, spec, pairs=pairs)
    run.emit(report, options.name or f"sweep_{protocol}", ckpt.digest)
    return EXIT_OK


def cmd_logit_lens(options, run, logger):
    ckpt, vocab = _load(run, options)
    paths = [options.trace] + ([options.compare] if options.compare else [])
    traces = {os.path.splitext(os.path.basename(p))[0]: _trace_arg(run, p) for p in paths}
    if len(traces) != len(paths):
        raise ConfigError("--trace and --compare need distinct file names")
    first = next(iter(traces.values()))
    position = first.final_position if options.position is None else options.position
    if options.token:
        token = vocab.id(options.token)
    else:
        token = int(first.logits[position].argmax())
    curves = {label: lens_curve(trace, ckpt, token, position) for label, trace in traces.items()}
    report = lens_report(curves, metadata={"token": vocab.symbols[token], "traces": paths}, symbols=vocab.symbols)
    run.emit(report, options.name, ckpt.digest)
    return EXIT_OK


def cmd_attribution(options, run, logger):
    ckpt, vocab = _load(run, options)
    a, b = _trace_arg(run, options.trace), _trace_arg(run, options.compare)
    tokens = [vocab.id(s) for s in options.tokens.split(",")] if options.tokens else None
    labels = (os.path.splitext(os.path.basename(options.trace))[0], os.path.splitext(os.path.basename(options.compare))[0])
    report = attribution_report(layer_attribution(a, ckpt, options.position), layer_attribution(b, ckpt, options.position),
                                labels=labels, tokens=tokens, metadata={"traces": [options.trace, options.compare]})
    run.emit(report, options.name, ckpt.digest)
    return EXIT_OK


def cmd_diff_score(options, run, logger):
    bad = load_trace_file(run.require_file(options.bad, "trace"))
    good = load_trace_file(run.require_file(options.good, "trace"))
    scores = differential_scores(bad.trace, good.trace, layers=options.layers, position=options.position)
    digest = bad.header.get("metadata", {}).get("checkpoint_digest")
    report = scores_report(scores, top=options.top, metadata={"bad": options.bad, "good": options.good})
    run.emit(report, options.name, digest)
    return EXIT_OK


def cmd_steer(options, run, logger):
    ckpt, vocab = _load(run, options)
    prompt, pair = _prompt(options, vocab)
    address = ActivationAddress(layer=options.layer, site=options.site, neuron=options.neuron, positions=FROM_FINAL_PROMPT)
    vector = steering_vector(_trace_arg(run, options.good), _trace_arg(run, options.bad), address)
    rows = []
    for alpha in options.alphas:
        text = answer_text(ckpt, vocab, prompt, plan=steering_plan(address, vector, alpha))
        row = {"alpha": alpha, "answer": text}
        if pair is not None:
            row["outcome"] = classify(text, pair).value
        rows.append(row)
    report = TableReport(kind="steer", table=rows, extra={
        "address": address.describe(),
        "prompt": vocab.detokenize(prompt),
        "vector_norm": float(vector.norm()),
    })
    run.emit(report, options.name, ckpt.digest)
    return EXIT_OK


def cmd_sae_train(options, run, logger):
    section = dict(run.section('sae'))
    for key in ('k', 'expansion', 'steps'):
        if getattr(options, key) is not None:
            section[key] = getattr(options, key)
    run.config['sae'] = section
    digest = None
    if options.acts:
        data = load_activations(run.require_file(options.acts, "activation dataset"))
    else:
        ckpt, vocab = _load(run, options)
        if options.layer is None:
            raise ConfigError("collecting activations needs --layer")
        digest = ckpt.digest
        train, held_out = run.task_spec().split()
        pairs = [p for p in train + held_out if p.disagrees]
        data, _ = collect_pair_activations(ckpt, vocab, pairs, options.layer, PromptFormat.QA, PromptFormat.SIMPLE)
        save_activations(data, os.path.join(run.out_dir, "sae_activations.acts"), metadata=run.metadata(digest))
    sae = train_sae(data, run.sae_config(data.data.shape[1]))
    out = options.out or os.path.join(run.out_dir, "sae.sae")
    save_sae(sae, out, metadata=run.metadata(digest or data.source_digest or None))
    logger.info(f"sae {out}: relative mse {relative_mse(sae, data.data):.4f}")
    report = TableReport(kind="sae_training", table=sae.provenance["eval_curve"], extra={
        "config": sae.config.to_dict(),
        "provenance": {k: v for k, v in sae.provenance.items() if k != "eval_curve"},
    })
    run.emit(report, os.path.splitext(os.path.basename(out))[0] + "_training", digest or data.source_digest or None)
    return EXIT_OK


def cmd_sae_analyze(options, run, logger):
    sae = load_sae(run.require_file(options.sae, "sae"))
    data = load_activations(run.require_file(options.acts, "activation dataset"))
    traces = None
    digest = data.source_digest or None
    if options.correlate:
        ckpt, vocab = _load(run, options)
        digest = ckpt.digest
        _, held_out = run.task_spec().split()
        pairs = trial_pairs(held_out)[:options.correlate]
        _, traces = collect_pair_activations(ckpt, vocab, pairs, data.layer, PromptFormat.QA, PromptFormat.SIMPLE,
                                             keep=options.correlate, site=data.site)
    report = analyze_features(sae, data.rows(WRONG), data.rows(CORRECT), top_n=options.top_n,
                              traces=traces, layer=data.layer)
    report.metadata = {"sae": options.sae, "acts": options.acts, "layer": data.layer, "site": data.site,
                       "relative_mse": relative_mse(sae, data.data)}
    run.emit(report, options.name, digest)
    return EXIT_OK


def cmd_report(options, run, logger):
    rows = []
    if options.ci:
        s, n = options.ci
        ci = exact_binomial_ci(s, n, options.level)
        rows.append({"source": "--ci", "point": "", **ci.to_dict()})
    for path in options.inputs:
        with open(run.require_file(path, "report"), "rt") as f:
            report = SweepReport.from_dict(json.load(f))
        stem = os.path.splitext(os.path.basename(path))[0]
        # json inputs are never rewritten
        run.emit(report, stem, report.metadata.get("checkpoint_digest"), formats=("csv", "svg"))
        for p in report.points:
            if p.trials:
                ci = exact_binomial_ci(p.successes, p.trials, options.level)
                label = ",".join(f"{k}={v}" for k, v in sorted(p.key.items()))
                rows.append({"source": stem, "point": label, **ci.to_dict()})
    if not rows:
        raise ConfigError("report needs sweep report files or --ci")
    run.emit(TableReport(kind="report", table=rows, extra={"level": options.level}), options.name)
    return EXIT_OK


def cmd_reproduce_all(options, run, logger):
    artifacts = Pipeline(run, logger).execute()
    logger.info(f"reproduce-all wrote {len(set(artifacts))} artifacts to {run.out_dir}")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    options = parser.parse_args(argv)
    if options.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write(error_line(EXIT_USAGE, "UsageError", "a command is required") + "\n")
        return EXIT_USAGE

    Logger.reset()
    logger = Logger.get_logger(None, "info")
    try:
        run = RunConfig.from_options(options)
        Logger.reset()
        log_dir, log_file = run.log_location()
        logger = Logger.get_logger(log_dir, run.log_level, console=True, logfile=log_file)
        CommandUtils.configure_torch()
        return options.func(options, run, logger)
    except ConfigError as e:
        sys.stderr.write(error_line(EXIT_CONFIG, type(e).__name__, e) + "\n")
        return EXIT_CONFIG
    except PatchlabError as e:
        logger.debug(traceback.format_exc())
        sys.stderr.write(error_line(EXIT_RUNTIME, type(e).__name__, e) + "\n")
        return EXIT_RUNTIME
    except Exception as e:
        logger.debug(traceback.format_exc())
        sys.stderr.write(error_line(EXIT_RUNTIME, type(e).__name__, e) + "\n")
        return EXIT_RUNTIME
    finally:
        Logger.reset()


if __name__ == '__main__':
    sys.exit(main())
