# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
TopK sparse autoencoder and feature-level analyses.

    pre   = (x - b_dec) @ W_enc.T + b_enc
    z     = relu(pre) masked to its k largest entries (ties: lowest index)
    x_hat = z @ W_dec.T + b_dec

Decoder columns are kept at unit norm throughout training.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from defaults import Defaults
from errors import AnalysisError, ConfigError, NonFiniteError, ShapeError
from model import forward_trace

logger = logging.getLogger("patchlab")

AMPLIFICATION_BAND = 1.5
ALIGNMENT_MARGIN = 0.2


@dataclass(frozen=True)
class SaeConfig:
    d_in: int
    n_features: int
    k: int
    steps: int = Defaults.SAE_STEPS
    learning_rate: float = Defaults.SAE_LEARNING_RATE
    batch_size: int = Defaults.SAE_BATCH_SIZE
    seed: int = Defaults.SEED
    eval_every: int = Defaults.SAE_EVAL_EVERY
    dead_after: int = Defaults.SAE_DEAD_AFTER

    known_keys = {
        'd_in', 'n_features', 'k', 'steps', 'learning_rate',
        'batch_size', 'seed', 'eval_every', 'dead_after',
    }

    def __post_init__(self):
        if self.d_in < 1:
            raise ConfigError(f"SAE input width must be positive, got {self.d_in}")
        if self.n_features < self.d_in:
            raise ConfigError(f"SAE needs expansion >= 1: {self.n_features} features for width {self.d_in}")
        if not 0 < self.k <= self.n_features:
            raise ConfigError(f"SAE k must be in 1..{self.n_features}, got {self.k}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("SAE steps, batch_size and eval_every must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"SAE learning rate must be positive, got {self.learning_rate}")

    @staticmethod
    def for_width(d_in, expansion=Defaults.SAE_EXPANSION, k=Defaults.SAE_K, **overrides):
        if expansion < 1:
            raise ConfigError(f"SAE expansion must be >= 1, got {expansion}")
        return SaeConfig(d_in=d_in, n_features=int(expansion * d_in), k=k, **overrides)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        unknown = set(d) - SaeConfig.known_keys
        if unknown:
            raise ConfigError("Unknown sae keys: " + ", ".join(sorted(unknown)))
        return SaeConfig(**d)


@dataclass(frozen=True)
class ActivationDataset:
    data: torch.Tensor   # N x d_model
    layer: int
    site: str
    position: str
    labels: tuple        # one condition label per row
    source_digest: str = ""

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"activation data must be 2-D, got shape {tuple(self.data.shape)}")
        if len(self.labels) != self.data.shape[0]:
            raise ShapeError(f"{len(self.labels)} labels for {self.data.shape[0]} activation rows")

    def rows(self, label):
        idx = [i for i, lab in enumerate(self.labels) if lab == label]
        return self.data[idx]


def collect_activations(traces, labels, layer, site="resid_post", source_digest=""):
    """One row per trace, taken at its final prompt position."""
    if len(traces) != len(labels):
        raise ShapeError(f"{len(traces)} traces but {len(labels)} labels")
    if not traces:
        raise AnalysisError("no traces to collect activations from")
    rows = [t.site(layer, site)[t.final_position] for t in traces]
    return ActivationDataset(torch.stack(rows).clone(), layer, site, "final_prompt", tuple(labels), source_digest)


WRONG = "wrong"
CORRECT = "correct"


def collect_pair_activations(ckpt, vocab, pairs, layer, wrong_fmt, correct_fmt, keep=0, site="resid_post"):
    """
    Rows labelled WRONG from wrong_fmt prompts and CORRECT from correct_fmt
    prompts, one per pair each, without holding every trace in memory. The
    first `keep` wrong_fmt traces are returned with per-head outputs for
    feature-head correlation.
    """
    if not pairs:
        raise AnalysisError("no operand pairs to collect activations from")
    rows, labels, kept = [], [], []
    for pair in pairs:
        for fmt, label in ((wrong_fmt, WRONG), (correct_fmt, CORRECT)):
            want_heads = label == WRONG and len(kept) < keep
            trace = forward_trace(ckpt.config, ckpt, vocab.tokenize(pair.render(fmt)), keep_head_out=want_heads)
            rows.append(trace.site(layer, site)[trace.final_position].clone())
            labels.append(label)
            if want_heads:
                kept.append(trace)
    data = ActivationDataset(torch.stack(rows), layer, site, "final_prompt", tuple(labels), ckpt.digest)
    return data, kept


class SaeModel(object):
    def __init__(self, config, w_enc, b_enc, w_dec, b_dec, provenance=None):
        F, D = config.n_features, config.d_in
        for name, t, shape in (("w_enc", w_enc, (F, D)), ("b_enc", b_enc, (F,)), ("w_dec", w_dec, (D, F)), ("b_dec", b_dec, (D,))):
            if tuple(t.shape) != shape:
                raise ShapeError(f"SAE tensor {name} has shape {tuple(t.shape)}, expected {shape}")
        self.config = config
        self.w_enc = w_enc.detach().to(torch.float32).contiguous()
        self.b_enc = b_enc.detach().to(torch.float32).contiguous()
        self.w_dec = w_dec.detach().to(torch.float32).contiguous()
        self.b_dec = b_dec.detach().to(torch.float32).contiguous()
        self.provenance = provenance or {}

    def _check(self, x):
        x = torch.as_tensor(x, dtype=torch.float32)
        if x.shape[-1] != self.config.d_in:
            raise ShapeError(f"input width {x.shape[-1]} does not match SAE width {self.config.d_in}")
        return x

    def pre_activations(self, x):
        return (self._check(x) - self.b_dec) @ self.w_enc.T + self.b_enc

    def decode(self, z):
        return z @ self.w_dec.T + self.b_dec

    def reconstruct(self, x):
        return self.decode(encode_topk(self, x))


def _topk_mask(pre, k):
    order = torch.argsort(pre, dim=-1, descending=True, stable=True)
    return torch.zeros_like(pre).scatter(-1, order[..., :k], 1.0)


def encode_topk(sae, x):
    with torch.no_grad():
        pre = sae.pre_activations(x)
        return torch.relu(pre) * _topk_mask(pre, sae.config.k)


def topk_indices(sae, x):
    """Selected feature indices, highest first; reported even when the values are zero."""
    with torch.no_grad():
        pre = sae.pre_activations(x)
        return torch.argsort(pre, dim=-1, descending=True, stable=True)[..., :sae.config.k]


def relative_mse(sae, x):
    x = torch.as_tensor(x, dtype=torch.float32)
    with torch.no_grad():
        err = (x - sae.reconstruct(x)).pow(2).sum()
        norm = x.pow(2).sum()
    if norm == 0:
        return 0.0 if err == 0 else math.inf
    return float(err / norm)


def train_sae(data, config):
    """
    Train a TopK SAE on the rows of data (tensor or ActivationDataset).

    A tenth of the rows (at least one) is held out for the recorded eval
    curve. Features that stay silent for config.dead_after consecutive eval
    checkpoints are re-initialized toward the worst-reconstructed samples.
    """
    x = data.data if isinstance(data, ActivationDataset) else torch.as_tensor(data, dtype=torch.float32)
    if x.ndim != 2 or x.shape[1] != config.d_in:
        raise ShapeError(f"activation rows have shape {tuple(x.shape)}, SAE expects (N, {config.d_in})")
    if not torch.isfinite(x).all():
        raise NonFiniteError("activation dataset holds non-finite values")
    n = x.shape[0]
    if n < 2:
        raise AnalysisError(f"need at least 2 activation rows to train, got {n}")
    if n < config.n_features:
        logger.warning(f"SAE dataset has {n} rows for {config.n_features} features; expect many dead features")

    gen = torch.Generator().manual_seed(config.seed)
    perm = torch.randperm(n, generator=gen)
    n_eval = max(1, n // 10)
    x_eval, x_train = x[perm[:n_eval]], x[perm[n_eval:]]

    F, D = config.n_features, config.d_in
    w_dec = torch.randn(D, F, generator=gen)
    w_dec = w_dec / w_dec.norm(dim=0, keepdim=True)
    params = {
        "w_enc": torch.nn.Parameter(w_dec.T.clone()),
        "b_enc": torch.nn.Parameter(torch.zeros(F)),
        "w_dec": torch.nn.Parameter(w_dec),
        "b_dec": torch.nn.Parameter(x_train.mean(dim=0)),
    }
    opt = torch.optim.Adam(params.values(), lr=config.learning_rate)

    def snapshot():
        return SaeModel(config, params["w_enc"], params["b_enc"], params["w_dec"], params["b_dec"])

    eval_curve = []
    fired = torch.zeros(F, dtype=torch.bool)
    silent_checkpoints = torch.zeros(F, dtype=torch.long)
    resampled = 0
    for step in range(1, config.steps + 1):
        idx = torch.randint(x_train.shape[0], (config.batch_size,), generator=gen)
        batch = x_train[idx]
        pre = (batch - params["b_dec"]) @ params["w_enc"].T + params["b_enc"]
        mask = _topk_mask(pre.detach(), config.k)
        z = torch.relu(pre) * mask
        recon = z @ params["w_dec"].T + params["b_dec"]
        loss = (batch - recon).pow(2).sum(dim=-1).mean()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"SAE loss became {loss.item()} at step {step}; lower the learning rate")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            params["w_dec"].div_(params["w_dec"].norm(dim=0, keepdim=True).clamp_min(1e-12))
        fired |= (z.detach() > 0).any(dim=0)

        if step % config.eval_every == 0 or step == config.steps:
            eval_mse = relative_mse(snapshot(), x_eval)
            eval_curve.append({"step": step, "relative_mse": eval_mse})
            silent_checkpoints = torch.where(fired, torch.zeros_like(silent_checkpoints), silent_checkpoints + 1)
            fired.zero_()
            dead = torch.nonzero(silent_checkpoints >= config.dead_after).flatten()
            if len(dead) > 0 and step < config.steps:
                _resample(params, opt, dead, x_train, snapshot())
                silent_checkpoints[dead] = 0
                resampled += len(dead)
            logger.info(f"sae step {step}/{config.steps}: loss {loss.item():.6f} eval relative mse {eval_mse:.6f}"
                        f" resampled {len(dead)}")

    model = snapshot()
    model.provenance = {
        "seed": config.seed,
        "steps": config.steps,
        "train_rows": int(x_train.shape[0]),
        "eval_rows": int(x_eval.shape[0]),
        "eval_curve": eval_curve,
        "train_relative_mse": relative_mse(model, x_train),
        "eval_relative_mse": eval_curve[-1]["relative_mse"],
        "resampled_features": resampled,
        "dead_after": config.dead_after,
    }
    return model


def _resample(params, opt, dead, x_train, current):
    with torch.no_grad():
        residual = (x_train - current.reconstruct(x_train)).pow(2).sum(dim=-1)
        worst = torch.argsort(residual, descending=True, stable=True)[:len(dead)]
        for feature, row in zip(dead.tolist(), worst.tolist()):
            direction = x_train[row] - params["b_dec"]
            direction = direction / direction.norm().clamp_min(1e-12)
            params["w_dec"][:, feature] = direction
            params["w_enc"][feature] = direction
            params["b_enc"][feature] = 0.0
        for name, p in params.items():
            state = opt.state.get(p)
            if not state or name == "b_dec":
                continue
            for key in ("exp_avg", "exp_avg_sq"):
                if name == "w_dec":
                    state[key][:, dead] = 0.0
                else:
                    state[key][dead] = 0.0


def mean_activations(sae, acts):
    return encode_topk(sae, acts).mean(dim=0)


def top_features(sae, acts, top_n):
    """Top-n features by mean activation magnitude, highest first (ties: lowest index)."""
    if not 0 < top_n <= sae.config.n_features:
        raise AnalysisError(f"top_n must be in 1..{sae.config.n_features}, got {top_n}")
    magnitude = encode_topk(sae, acts).abs().mean(dim=0)
    return torch.argsort(magnitude, descending=True, stable=True)[:top_n].tolist()


def overlap_fraction(top_a, top_b):
    if len(top_a) != len(top_b) or not top_a:
        raise AnalysisError("overlap needs two top sets of the same non-zero size")
    return len(set(top_a) & set(top_b)) / len(top_a)


def feature_overlap(sae, acts_a, acts_b, top_n=Defaults.TOP_N_FEATURES):
    return overlap_fraction(top_features(sae, acts_a, top_n), top_features(sae, acts_b, top_n))


def ratio_of_means(wrong_mean, correct_mean):
    if correct_mean == 0:
        return None
    return float(wrong_mean) / float(correct_mean)


def amplification_ratio(sae, feature, wrong_acts, correct_acts):
    """Mean activation under the wrong condition over the correct one; None when undefined."""
    if not 0 <= feature < sae.config.n_features:
        raise AnalysisError(f"feature {feature} outside 0..{sae.config.n_features - 1}")
    return ratio_of_means(float(mean_activations(sae, wrong_acts)[feature]),
                          float(mean_activations(sae, correct_acts)[feature]))


def pearson(xs, ys):
    """Pearson r, or None when either series has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("correlation needs two equal-length series")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def feature_head_correlation(sae, traces, feature, layer, site="resid_post"):
    """
    Per-head Pearson r across prompts between the feature's activation and
    the head's output norm, both at the final prompt position. Heads with a
    constant series (or a constant feature) come back as None.
    """
    if len(traces) < 3:
        raise AnalysisError(f"correlation needs at least 3 traces, got {len(traces)}")
    if not 0 <= feature < sae.config.n_features:
        raise AnalysisError(f"feature {feature} outside 0..{sae.config.n_features - 1}")
    feature_values = []
    head_norms = []
    for t in traces:
        if not t.has_head_outputs:
            raise ShapeError("feature-head correlation needs traces with per-head outputs")
        pos = t.final_position
        feature_values.append(float(encode_topk(sae, t.site(layer, site)[pos])[feature]))
        head_norms.append(t.site(layer, "attn_head_out")[:, pos].norm(dim=-1).tolist())
    head_norms = np.asarray(head_norms)
    return [pearson(feature_values, head_norms[:, h]) for h in range(head_norms.shape[1])]


def alignment_class(correlations):
    """'even', 'odd' or 'mixed' head alignment from per-head r values; 'undefined' if none exist."""
    even = [r for h, r in enumerate(correlations) if h % 2 == 0 and r is not None]
    odd = [r for h, r in enumerate(correlations) if h % 2 == 1 and r is not None]
    if not even and not odd:
        return "undefined"
    mean_even = float(np.mean(even)) if even else 0.0
    mean_odd = float(np.mean(odd)) if odd else 0.0
    if mean_even > mean_odd + ALIGNMENT_MARGIN:
        return "even"
    if mean_odd > mean_even + ALIGNMENT_MARGIN:
        return "odd"
    return "mixed"


def amplification_class(ratio):
    if ratio is None:
        return "undefined"
    if ratio >= AMPLIFICATION_BAND:
        return "amplified"
    if ratio <= 1.0 / AMPLIFICATION_BAND:
        return "suppressed"
    return "stable"


@dataclass
class FeatureReport:
    top_n: int
    overlap: float
    shared: list
    wrong_only: list
    correct_only: list
    features: list   # one dict per feature in either top set
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"schema": "patchlab.sae_features/1", **asdict(self)}

    def rows(self):
        return [dict(f) for f in self.features]

    def curves(self):
        return []


def analyze_features(sae, wrong_acts, correct_acts, top_n=Defaults.TOP_N_FEATURES, traces=None, layer=None):
    top_wrong = top_features(sae, wrong_acts, top_n)
    top_correct = top_features(sae, correct_acts, top_n)
    mean_wrong = mean_activations(sae, wrong_acts)
    mean_correct = mean_activations(sae, correct_acts)
    union = sorted(set(top_wrong) | set(top_correct))
    features = []
    for f in union:
        ratio = ratio_of_means(float(mean_wrong[f]), float(mean_correct[f]))
        entry = {
            "feature": f,
            "mean_wrong": float(mean_wrong[f]),
            "mean_correct": float(mean_correct[f]),
            "ratio": ratio,
            "amplification": amplification_class(ratio),
            "in_top_wrong": f in top_wrong,
            "in_top_correct": f in top_correct,
        }
        if traces is not None:
            try:
                entry["alignment"] = alignment_class(feature_head_correlation(sae, traces, f, layer))
            except (AnalysisError, ShapeError) as e:
                logger.debug(f"no head alignment for feature {f}: {e}")
                entry["alignment"] = "undefined"
        features.append(entry)
    return FeatureReport(
        top_n=top_n,
        overlap=overlap_fraction(top_wrong, top_correct),
        shared=sorted(set(top_wrong) & set(top_correct)),
        wrong_only=sorted(set(top_wrong) - set(top_correct)),
        correct_only=sorted(set(top_correct) - set(top_wrong)),
        features=features,
    )
