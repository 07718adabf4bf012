"""Model configurations, scaling operators and the shorthand code grammar.

A shorthand code is a ``-``-joined list of ``<KNOB><VALUE>`` tokens optionally
terminated by a base-size suffix, e.g. ``NL32-SM`` (small, 32 layers) or
``FF2K`` (base, d_ff = 2048).  Values may carry a ``K`` suffix meaning x1024.
"""

from __future__ import annotations

import dataclasses
import io
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

KNOBS = ("NL", "EL", "DL", "DM", "KV", "NH", "FF", "SH", "SKV")
BOOLEAN_KNOBS = ("SH", "SKV")
MAX_LAYERS = 512

# fields each knob writes
KNOB_FIELDS: dict[str, tuple[str, ...]] = {
    "NL": ("enc_layers", "dec_layers"),
    "EL": ("enc_layers",),
    "DL": ("dec_layers",),
    "DM": ("d_model",),
    "KV": ("d_kv",),
    "NH": ("n_heads",),
    "FF": ("d_ff",),
    "SH": ("shared_heads",),
    "SKV": ("tied_kv",),
}

SIZE_NAMES = ("tiny", "mini", "small", "base", "large", "xl", "xxl", "xxxl")
SUFFIX_TO_SIZE = {
    "TY": "tiny",
    "MI": "mini",
    "SM": "small",
    "B": "base",
    "LG": "large",
    "XL": "xl",
    "XXL": "xxl",
    "XXXL": "xxxl",
}
SIZE_TO_SUFFIX = {v: k for k, v in SUFFIX_TO_SIZE.items()}

# Long-form names used in result tables ("Small 24L", "Mini-8L", "Base").
_LONG_NAMES = {
    "TINY": "tiny",
    "MINI": "mini",
    "SMALL": "small",
    "BASE": "base",
    "LARGE": "large",
    "XL": "xl",
    "XXL": "xxl",
    "XXXL": "xxxl",
}
_LONG_LAYER_KNOB = {"L": "NL", "EL": "EL", "DL": "DL"}


class CodeParseError(ValueError):
    """Raised for malformed shorthand codes; ``position`` is a 0-based char offset."""

    def __init__(self, message: str, code: str, position: int):
        super().__init__(f"{message} at position {position} in {code!r}")
        self.code = code
        self.position = position


@dataclass(frozen=True)
class ModelConfig:
    name: str
    enc_layers: int
    dec_layers: int
    d_model: int
    d_ff: int
    d_kv: int
    n_heads: int
    vocab_size: int = 32128
    rel_bias_buckets: int = 32
    rel_bias_max_distance: int = 128
    tie_embedding_softmax: bool = True
    shared_heads: bool = False
    tied_kv: bool = False
    model_parallelism: int = 1

    def __post_init__(self):
        if not self.name:
            raise ValueError("config name must be nonempty")
        for f in ("enc_layers", "dec_layers", "d_model", "d_ff", "d_kv", "n_heads",
                  "rel_bias_buckets", "rel_bias_max_distance", "model_parallelism"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{self.name}: {f} must be a positive integer, got {v!r}")
        if self.vocab_size < 4:
            raise ValueError(f"{self.name}: vocab_size must be >= 4, got {self.vocab_size}")

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.d_kv

    @property
    def depth(self) -> int:
        return max(self.enc_layers, self.dec_layers)

    def architecture(self) -> tuple:
        """Shape fields only (no name, no parallelism metadata); equal tuples build identical models."""
        return dataclasses.astuple(dataclasses.replace(self, name="-", model_parallelism=1))[1:]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ScalingOp:
    knob: str
    value: int

    def __post_init__(self):
        if self.knob not in KNOBS:
            raise ValueError(f"unknown knob {self.knob!r}; expected one of {', '.join(KNOBS)}")
        v = self.value
        if isinstance(v, bool):
            object.__setattr__(self, "value", int(v))
            v = int(v)
        if not isinstance(v, int):
            raise ValueError(f"{self.knob}: value must be an integer, got {v!r}")
        if self.knob in BOOLEAN_KNOBS:
            if v not in (0, 1):
                raise ValueError(f"{self.knob}: value must be 0 or 1, got {v}")
        elif v < 1:
            raise ValueError(f"{self.knob}: invalid value {v}; must be >= 1")
        elif self.knob in ("NL", "EL", "DL") and v > MAX_LAYERS:
            raise ValueError(f"{self.knob}: {v} layers exceeds the cap of {MAX_LAYERS}")

    @property
    def token(self) -> str:
        return self.knob + _format_value(self.value)

    def __str__(self) -> str:
        return self.token


@dataclass(frozen=True)
class ScaledSpec:
    base: str
    ops: tuple[ScalingOp, ...] = field(default_factory=tuple)

    def __post_init__(self):
        base = self.base.lower()
        if base not in STANDARD_SIZES:
            raise ValueError(f"unknown base size {self.base!r}; valid: {', '.join(SIZE_NAMES)}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "ops", tuple(self.ops))

    @property
    def code(self) -> str:
        return format_code(self)

    def resolve(self) -> ModelConfig:
        cfg = STANDARD_SIZES[self.base]
        for op in self.ops:
            cfg = _apply(cfg, op)
        return cfg.replace(name=self.code)


# Verbatim rows of the published size table:
# (enc/dec layers, d_ff, d_model, d_kv, n_heads, published #params).
PUBLISHED_SHAPES = {
    "tiny": (4, 1024, 256, 32, 4, "16M"),
    "mini": (4, 1536, 384, 32, 8, "31M"),
    "small": (6, 2048, 512, 32, 8, "60M"),
    "base": (12, 3072, 768, 64, 12, "220M"),
    "large": (24, 4096, 1024, 64, 16, "738M"),
    "xl": (24, 16384, 1024, 128, 32, "3B"),
    "xxl": (24, 65536, 1024, 128, 128, "11B"),
    "xxxl": (28, 131072, 1280, 128, 256, "30B"),
}

# Published d_kv for tiny and small gives n_heads * d_kv = d_model / 2, which
# cannot reproduce the published parameter counts; 64 restores
# n_heads * d_kv = d_model.  Mini is left verbatim (no d_kv fits its count).
D_KV_OVERRIDES = {"tiny": 64, "small": 64}

_MODEL_PARALLELISM = {"large": 2, "xl": 8, "xxl": 32}


def _build_registry() -> dict[str, ModelConfig]:
    reg = {}
    for name, (layers, d_ff, d_model, d_kv, n_heads, _) in PUBLISHED_SHAPES.items():
        reg[name] = ModelConfig(
            name=name,
            enc_layers=layers,
            dec_layers=layers,
            d_model=d_model,
            d_ff=d_ff,
            d_kv=D_KV_OVERRIDES.get(name, d_kv),
            n_heads=n_heads,
            model_parallelism=_MODEL_PARALLELISM.get(name, 1),
        )
    return reg


STANDARD_SIZES: dict[str, ModelConfig] = _build_registry()


def lookup_standard(name: str) -> ModelConfig:
    key = name.strip().lower()
    if key not in STANDARD_SIZES:
        raise KeyError(f"unknown size {name!r}; valid names: {', '.join(SIZE_NAMES)}")
    return STANDARD_SIZES[key]


def _apply(config: ModelConfig, op: ScalingOp) -> ModelConfig:
    value = bool(op.value) if op.knob in BOOLEAN_KNOBS else op.value
    return config.replace(**{f: value for f in KNOB_FIELDS[op.knob]})


def normalize_ops(ops: Iterable[ScalingOp]) -> tuple[ScalingOp, ...]:
    """Drop ops whose every field is overwritten by a later op."""
    out: list[ScalingOp] = []
    for op in ops:
        owned = set(KNOB_FIELDS[op.knob])
        out = [o for o in out if not set(KNOB_FIELDS[o.knob]) <= owned]
        out.append(op)
    return tuple(out)


def spec_of(config: ModelConfig) -> ScaledSpec:
    """Recover the ScaledSpec a config's name encodes (registry names included)."""
    if config.name.lower() in STANDARD_SIZES:
        return ScaledSpec(config.name.lower(), ())
    return parse_code(config.name)


def apply_op(config: ModelConfig, op: ScalingOp) -> ModelConfig:
    new = _apply(config, op)
    try:
        spec = spec_of(config)
    except (CodeParseError, ValueError):
        return new.replace(name=f"{op.token}-{config.name}")
    spec = ScaledSpec(spec.base, normalize_ops(spec.ops + (op,)))
    return new.replace(name=spec.code)


def _format_value(v: int) -> str:
    if v >= 1024 and v % 1024 == 0:
        return f"{v // 1024}K"
    return str(v)


def format_code(spec: ScaledSpec) -> str:
    parts = [op.token for op in spec.ops]
    parts.append(SIZE_TO_SUFFIX[spec.base])
    return "-".join(parts)


_KNOB_RE = re.compile(r"(SKV|SH|NL|EL|DL|DM|KV|NH|FF)")
_VALUE_RE = re.compile(r"(\d+)(K?)$")
_LONG_RE = re.compile(r"^(TINY|MINI|SMALL|BASE|LARGE|XXXL|XXL|XL)(?:[ \-_]+(\d+)(EL|DL|L))?$")


def parse_code(code: str) -> ScaledSpec:
    """Parse a shorthand code into a ScaledSpec.

    Accepts the compact grammar (``NL24-SM``, ``FF2K``, ``B``) as well as the
    long names used in result tables (``Small 24L``, ``Mini-8L``, ``Base``).
    Codes without a base suffix are relative to base.
    """
    text = code.strip().upper()
    if not text:
        raise CodeParseError("empty code", code, 0)

    m = _LONG_RE.match(text)
    if m:
        base = _LONG_NAMES[m.group(1)]
        ops: tuple[ScalingOp, ...] = ()
        if m.group(2):
            try:
                ops = (ScalingOp(_LONG_LAYER_KNOB[m.group(3)], int(m.group(2))),)
            except ValueError as e:
                raise CodeParseError(str(e), code, m.start(2)) from None
        return ScaledSpec(base, ops)

    tokens = text.split("-")
    base = "base"
    pos = 0
    ops_list: list[ScalingOp] = []
    for i, tok in enumerate(tokens):
        if not tok:
            raise CodeParseError("empty token", code, pos)
        if i == len(tokens) - 1 and tok in SUFFIX_TO_SIZE:
            base = SUFFIX_TO_SIZE[tok]
            break
        km = _KNOB_RE.match(tok)
        if not km:
            if tok in SUFFIX_TO_SIZE:
                raise CodeParseError(f"base suffix {tok!r} must come last", code, pos)
            raise CodeParseError(f"unknown knob or base suffix {tok!r}", code, pos)
        knob = km.group(1)
        raw = tok[km.end():]
        vm = _VALUE_RE.match(raw)
        if not vm:
            raise CodeParseError(f"malformed value {raw!r} for {knob}", code, pos + km.end())
        value = int(vm.group(1)) * (1024 if vm.group(2) else 1)
        try:
            ops_list.append(ScalingOp(knob, value))
        except ValueError as e:
            raise CodeParseError(str(e), code, pos + km.end()) from None
        pos += len(tok) + 1
    return ScaledSpec(base, tuple(ops_list))


def resolve(code: str) -> ModelConfig:
    return parse_code(code).resolve()


TSV_COLUMNS = ("name", "enc_layers", "dec_layers", "d_ff", "d_model", "d_kv", "n_heads")


def registry_to_tsv(configs: Sequence[ModelConfig] | None = None) -> str:
    configs = list(STANDARD_SIZES.values()) if configs is None else list(configs)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("config names must be unique within a registry")
    buf = io.StringIO()
    buf.write("\t".join(TSV_COLUMNS) + "\n")
    for c in configs:
        buf.write("\t".join(str(getattr(c, k)) for k in TSV_COLUMNS) + "\n")
    return buf.getvalue()


def registry_from_tsv(text: str) -> dict[str, ModelConfig]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != TSV_COLUMNS:
        raise ValueError(f"TSV header must be {TSV_COLUMNS}")
    out: dict[str, ModelConfig] = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        cells = ln.split("\t")
        if len(cells) != len(TSV_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(TSV_COLUMNS)} columns, got {len(cells)}")
        name = cells[0]
        if name in out:
            raise ValueError(f"line {lineno}: duplicate name {name!r}")
        kw = {k: int(v) for k, v in zip(TSV_COLUMNS[1:], cells[1:])}
        out[name] = ModelConfig(name=name, **kw)
    return out
