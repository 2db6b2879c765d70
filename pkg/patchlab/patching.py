# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Declarative activation patching.

A PatchPlan is a list of Directives. Each directive names an address
(layer, site, optional head set or neuron, position rule) and a mode:

    Replace(source)          copy a captured slice over the target
    Blend(lam, source)       lam * source + (1 - lam) * target
    SetScalar(alpha)         force the activation to a constant
    AddScaled(alpha, vector) add alpha * vector (steering)

Plans are handed to model.forward_trace / model.generate_greedy, which call
PatchPlan.apply() at every site the plan touches, before the rest of the
layer is computed.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import yaml
from commandutils import CommandUtils
from errors import ConfigError, PlanError, ShapeError
from model import SITES, forward_trace

MODES = ("replace", "blend", "set_scalar", "add_scaled")
BLEND_VARIANTS = ("convex", "positions")


@dataclass(frozen=True)
class PositionRule:
    """
    Half-open position range [start, stop).

    A negative start counts back from the end of the prompt, so (-1, None)
    is "the final prompt position onward". stop=None runs to the end of the
    sequence.
    """
    start: int = 0
    stop: Optional[int] = None

    def resolve(self, seq_len, prompt_len):
        lo = self.start + prompt_len if self.start < 0 else self.start
        if self.stop is None:
            hi = seq_len
        else:
            hi = self.stop + prompt_len if self.stop < 0 else self.stop
        lo = max(0, min(lo, seq_len))
        hi = max(lo, min(hi, seq_len))
        return lo, hi

    def may_overlap(self, other):
        # relative and absolute starts can't be compared without a prompt length
        if (self.start < 0) != (other.start < 0):
            return True
        a_stop = math.inf if self.stop is None else self.stop
        b_stop = math.inf if other.stop is None else other.stop
        return self.start < b_stop and other.start < a_stop

    def to_dict(self):
        return {"start": self.start, "stop": self.stop}


ALL_POSITIONS = PositionRule()
FROM_FINAL_PROMPT = PositionRule(-1, None)


@dataclass(frozen=True)
class ActivationAddress:
    layer: int
    site: str
    heads: Optional[tuple] = None
    neuron: Optional[int] = None
    positions: PositionRule = ALL_POSITIONS

    def validate(self, config):
        if self.site not in SITES:
            raise PlanError(f"unknown site '{self.site}', expected one of {', '.join(SITES)}")
        if not 0 <= self.layer < config.n_layers:
            raise PlanError(f"layer {self.layer} outside 0..{config.n_layers - 1}")
        if self.site == "attn_pattern":
            if self.heads is not None:
                if len(self.heads) == 0:
                    raise PlanError(f"empty head set at layer {self.layer}")
                if len(set(self.heads)) != len(self.heads):
                    raise PlanError(f"duplicate heads in {list(self.heads)}")
                bad = [h for h in self.heads if not 0 <= h < config.n_heads]
                if bad:
                    raise PlanError(f"heads {bad} outside 0..{config.n_heads - 1}")
        elif self.heads is not None:
            raise PlanError(f"head sets only apply to attn_pattern, not '{self.site}'")
        if self.site == "mlp_neuron":
            if self.neuron is None or not 0 <= self.neuron < config.d_mlp:
                raise PlanError(f"mlp_neuron address needs a neuron in 0..{config.d_mlp - 1}, got {self.neuron}")
        elif self.neuron is not None:
            raise PlanError(f"neuron index only applies to mlp_neuron, not '{self.site}'")

    def head_list(self, n_heads):
        return list(range(n_heads)) if self.heads is None else list(self.heads)

    def conflicts_with(self, other):
        if (self.layer, self.site, self.neuron) != (other.layer, other.site, other.neuron):
            return False
        if self.heads is not None and other.heads is not None and not set(self.heads) & set(other.heads):
            return False
        return self.positions.may_overlap(other.positions)

    def describe(self):
        out = f"L{self.layer}.{self.site}"
        if self.heads is not None:
            out += f"[heads={','.join(str(h) for h in self.heads)}]"
        if self.neuron is not None:
            out += f"[{self.neuron}]"
        return out


@dataclass(frozen=True, eq=False)
class Replace:
    source: torch.Tensor


@dataclass(frozen=True, eq=False)
class Blend:
    lam: float
    source: torch.Tensor
    variant: str = "convex"


@dataclass(frozen=True)
class SetScalar:
    alpha: float


@dataclass(frozen=True, eq=False)
class AddScaled:
    alpha: float
    vector: torch.Tensor


@dataclass(frozen=True, eq=False)
class Directive:
    address: ActivationAddress
    mode: object

    def validate(self, config):
        addr, mode = self.address, self.mode
        addr.validate(config)
        if isinstance(mode, (Replace, Blend)):
            if isinstance(mode, Blend):
                if not 0.0 <= mode.lam <= 1.0:
                    raise PlanError(f"blend fraction {mode.lam} outside [0, 1] at {addr.describe()}")
                if mode.variant not in BLEND_VARIANTS:
                    raise PlanError(f"unknown blend variant '{mode.variant}'")
            self._check_source(config, mode.source)
        elif isinstance(mode, SetScalar):
            if addr.site == "attn_pattern":
                raise PlanError("set_scalar is not defined for attention patterns")
            if not math.isfinite(mode.alpha):
                raise PlanError(f"non-finite alpha at {addr.describe()}")
        elif isinstance(mode, AddScaled):
            if addr.site == "attn_pattern":
                raise PlanError("add_scaled is not defined for attention patterns")
            if not math.isfinite(mode.alpha):
                raise PlanError(f"non-finite alpha at {addr.describe()}")
            want = (1,) if addr.site == "mlp_neuron" else (config.d_model,)
            if tuple(mode.vector.shape) != want:
                raise ShapeError(f"steering vector shape {tuple(mode.vector.shape)} != {want} at {addr.describe()}")
        else:
            raise PlanError(f"unknown patch mode {type(mode).__name__}")

    def _check_source(self, config, source):
        addr = self.address
        shape = tuple(source.shape)
        if addr.site == "attn_pattern":
            n = len(addr.head_list(config.n_heads))
            ok = len(shape) == 3 and shape[0] == n and shape[1] == shape[2]
            want = f"({n}, S, S)"
        elif addr.site == "mlp_neuron":
            ok = len(shape) == 1
            want = "(S,)"
        else:
            ok = len(shape) == 2 and shape[1] == config.d_model
            want = f"(S, {config.d_model})"
        if not ok:
            raise ShapeError(f"source shape {shape} does not match {want} at {addr.describe()}")

    def apply(self, value, seq_len, prompt_len):
        addr, mode = self.address, self.mode
        lo, hi = addr.positions.resolve(seq_len, prompt_len)
        if addr.site == "attn_pattern":
            for i, h in enumerate(addr.head_list(value.shape[0])):
                src = mode.source[i]
                m = min(hi, src.shape[0])
                if m <= lo:
                    continue
                value[h, lo:m, :m] = _mix(mode, src[lo:m, :m], value[h, lo:m, :m])
            return value

        view = value[:, addr.neuron] if addr.site == "mlp_neuron" else value
        if isinstance(mode, SetScalar):
            view[lo:hi] = mode.alpha
        elif isinstance(mode, AddScaled):
            vec = mode.vector[0] if addr.site == "mlp_neuron" else mode.vector
            view[lo:hi] = view[lo:hi] + mode.alpha * vec
        else:
            m = min(hi, mode.source.shape[0])
            if m > lo:
                view[lo:m] = _mix(mode, mode.source[lo:m], view[lo:m])
        return value


def _mix(mode, src, tgt):
    if isinstance(mode, Replace):
        return src.clone()
    if mode.variant == "positions":
        # replace the leading floor(lam * n) rows, keep the rest
        count = math.floor(mode.lam * src.shape[0])
        out = tgt.clone()
        out[:count] = src[:count]
        return out
    if mode.lam == 0.0:
        return tgt.clone()
    if mode.lam == 1.0:
        return src.clone()
    return mode.lam * src + (1.0 - mode.lam) * tgt


class PatchPlan(object):
    def __init__(self, directives=()):
        self.directives = tuple(directives)
        self._by_site = {}
        for d in self.directives:
            self._by_site.setdefault((d.address.layer, d.address.site), []).append(d)

    def __len__(self):
        return len(self.directives)

    def __add__(self, other):
        return PatchPlan(self.directives + other.directives)

    def touches(self, layer, site):
        return (layer, site) in self._by_site

    @property
    def earliest_layer(self):
        return min((d.address.layer for d in self.directives), default=None)

    def validate(self, config):
        for d in self.directives:
            d.validate(config)
        for i, a in enumerate(self.directives):
            for b in self.directives[i + 1:]:
                if a.address.conflicts_with(b.address):
                    raise PlanError(f"conflicting directives at {a.address.describe()} and {b.address.describe()}")

    def apply(self, layer, site, value, seq_len, prompt_len):
        value = value.clone()
        for d in self._by_site.get((layer, site), ()):
            value = d.apply(value, seq_len, prompt_len)
        return value


def capture(trace, address):
    """Copy of the activation at address over all positions of trace."""
    address.validate(trace.config)
    if address.site == "attn_pattern":
        pattern = trace.site(address.layer, "attn_pattern")
        return pattern[address.head_list(trace.config.n_heads)].clone()
    if address.site == "mlp_neuron":
        return trace.site(address.layer, "mlp_act")[:, address.neuron].clone()
    return trace.site(address.layer, address.site).clone()


def apply_patched_forward(config, weights, tokens, plan, prompt_len=None):
    return forward_trace(config, weights, tokens, plan=plan, prompt_len=prompt_len)


def blend_plan(source_trace, layer, site, lam, heads=None, positions=ALL_POSITIONS, variant="convex"):
    address = ActivationAddress(layer=layer, site=site, heads=None if heads is None else tuple(heads), positions=positions)
    return PatchPlan([Directive(address, Blend(float(lam), capture(source_trace, address), variant))])


def transplant_attention(config, weights, target_tokens, source_trace, layer, heads, lam,
                         positions=ALL_POSITIONS, variant="convex", prompt_len=None):
    plan = blend_plan(source_trace, layer, "attn_pattern", lam, heads=heads, positions=positions, variant=variant)
    return apply_patched_forward(config, weights, target_tokens, plan, prompt_len=prompt_len)


def ablation_plan(neurons, alpha, positions=ALL_POSITIONS):
    return PatchPlan([
        Directive(ActivationAddress(layer=layer, site="mlp_neuron", neuron=index, positions=positions), SetScalar(float(alpha)))
        for layer, index in neurons
    ])


def ablate_neurons(config, weights, tokens, neurons, alpha, prompt_len=None):
    return apply_patched_forward(config, weights, tokens, ablation_plan(neurons, alpha), prompt_len=prompt_len)


def steering_vector(good, bad, address):
    if good.config != bad.config:
        raise ShapeError("steering traces come from different model configs")
    vectors = []
    for trace in (good, bad):
        value = capture(trace, address)
        if address.site == "attn_pattern":
            raise PlanError("steering vectors are not defined for attention patterns")
        vectors.append(value[trace.final_position].reshape(-1))
    return vectors[0] - vectors[1]


def steering_plan(address, vector, alpha):
    return PatchPlan([Directive(address, AddScaled(float(alpha), vector.reshape(-1).clone()))])


def apply_steering(config, weights, tokens, address, vector, alpha, prompt_len=None):
    return apply_patched_forward(config, weights, tokens, steering_plan(address, vector, alpha), prompt_len=prompt_len)


class PlanFile(object):
    """
    YAML form of a PatchPlan.

    directives:
      - layer: 3
        site: attn_pattern
        heads: [0, 2]
        positions: {start: -1, stop: null}
        mode: blend
        lam: 0.6
        source: {trace: simple.trace}
    """
    directive_keys = {'layer', 'site', 'heads', 'neuron', 'positions', 'mode', 'lam', 'variant', 'alpha', 'source', 'vector'}
    position_keys = {'start', 'stop'}
    source_keys = {'trace', 'values'}

    def __init__(self, trace_loader):
        self.trace_loader = trace_loader
        self._traces = {}

    def _trace(self, path):
        if path not in self._traces:
            self._traces[path] = self.trace_loader(path)
        return self._traces[path]

    def load(self, stream, params={}):
        doc = CommandUtils.readConfig(stream, params=params)
        if not isinstance(doc, dict) or not isinstance(doc.get('directives'), list):
            raise ConfigError("plan file must be a mapping with a 'directives' list")
        CommandUtils.check_known_keys(doc, {'directives'}, "plan")
        return PatchPlan([self._directive(entry) for entry in doc['directives']])

    def _directive(self, entry):
        if not isinstance(entry, dict):
            raise ConfigError(f"plan directive must be a mapping, got {entry!r}")
        CommandUtils.check_known_keys(entry, self.directive_keys, "plan directive")
        for key in ('layer', 'site', 'mode'):
            if key not in entry:
                raise ConfigError(f"plan directive is missing '{key}'")
        positions = entry.get('positions', {}) or {}
        CommandUtils.check_known_keys(positions, self.position_keys, "plan positions")
        address = ActivationAddress(
            layer=entry['layer'],
            site=entry['site'],
            heads=tuple(entry['heads']) if entry.get('heads') is not None else None,
            neuron=entry.get('neuron'),
            positions=PositionRule(positions.get('start', 0), positions.get('stop')),
        )
        mode = entry['mode']
        if mode in ('replace', 'blend'):
            source = self._source(entry.get('source'), address)
            if mode == 'replace':
                return Directive(address, Replace(source))
            if 'lam' not in entry:
                raise ConfigError("blend directive needs 'lam'")
            return Directive(address, Blend(float(entry['lam']), source, entry.get('variant', 'convex')))
        if mode in ('set_scalar', 'add_scaled'):
            if 'alpha' not in entry:
                raise ConfigError(f"{mode} directive needs 'alpha'")
            if mode == 'set_scalar':
                return Directive(address, SetScalar(float(entry['alpha'])))
            if 'vector' not in entry:
                raise ConfigError("add_scaled directive needs 'vector'")
            return Directive(address, AddScaled(float(entry['alpha']), torch.tensor(entry['vector'], dtype=torch.float32).reshape(-1)))
        raise ConfigError(f"unknown plan mode '{mode}', expected one of {', '.join(MODES)}")

    def _source(self, source, address):
        if not isinstance(source, dict):
            raise ConfigError(f"directive at {address.describe()} needs a source mapping")
        CommandUtils.check_known_keys(source, self.source_keys, "plan source")
        if 'trace' in source:
            return capture(self._trace(source['trace']), address)
        if 'values' in source:
            return torch.tensor(source['values'], dtype=torch.float32)
        raise ConfigError(f"source at {address.describe()} names neither a trace nor values")

    @staticmethod
    def dump(plan, stream=None):
        entries = []
        for d in plan.directives:
            a, m = d.address, d.mode
            entry = {'layer': a.layer, 'site': a.site, 'positions': a.positions.to_dict()}
            if a.heads is not None:
                entry['heads'] = list(a.heads)
            if a.neuron is not None:
                entry['neuron'] = a.neuron
            if isinstance(m, Replace):
                entry.update(mode='replace', source={'values': m.source.tolist()})
            elif isinstance(m, Blend):
                entry.update(mode='blend', lam=m.lam, variant=m.variant, source={'values': m.source.tolist()})
            elif isinstance(m, SetScalar):
                entry.update(mode='set_scalar', alpha=m.alpha)
            else:
                entry.update(mode='add_scaled', alpha=m.alpha, vector=m.vector.tolist())
            entries.append(entry)
        return yaml.safe_dump({'directives': entries}, stream, sort_keys=True)


@dataclass
class PlanSummary:
    directives: list = field(default_factory=list)

    @staticmethod
    def of(plan):
        out = PlanSummary()
        for d in plan.directives:
            out.directives.append({
                'address': d.address.describe(),
                'positions': d.address.positions.to_dict(),
                'mode': type(d.mode).__name__,
                'lam': getattr(d.mode, 'lam', None),
                'alpha': getattr(d.mode, 'alpha', None),
            })
        return out
