"""Model, training, and evaluation configuration.

Configuration lives in flat dotted-key text files, one ``section.field=value``
per line (``model.C=256``, ``train.lr=0.001``). CLI flags override file
values; defaults follow the reference architecture settings (hidden size 256,
kernel 7, padding 3, groups 32, Adam at 1e-3, 15 epochs).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError, ValidationError


@dataclass
class ModelConfig:
    T: int = 64  # sampled clips per video == candidate grid side
    C: int = 256  # hidden size throughout the network
    L_max: int = 30  # query length cap (tokens)
    D_v: int = 4096  # raw clip feature dimension
    vocab_size: int = 8000  # embedding rows, ids 0/1 reserved for pad/unk
    word_dim: int = 300  # word embedding dimension
    gru_layers: int = 2
    ngram_kernels: tuple = (1, 2, 3)
    comparison_blocks: int = 4  # 0 disables the comparison stack
    groups: int = 32
    kernel: int = 7
    padding: int = 3
    theta_min: float = 0.5
    theta_max: float = 1.0
    scheme: str = "sparse"  # candidate grid scheme: "sparse" | "dense"
    use_fine_interaction: bool = True  # fine-grained encoders + gated interaction
    map_mode: str = "both"  # moment maps fed downstream: both | content | boundary

    def validate(self):
        if self.T < 1:
            raise ValidationError("model.T must be >= 1")
        if self.C % 2 != 0:
            raise ValidationError("model.C must be even (bidirectional halves)")
        if self.C % self.groups != 0:
            raise ValidationError("model.C must be divisible by model.groups")
        if self.kernel % 2 == 0 or self.padding != (self.kernel - 1) // 2:
            raise ValidationError("model.kernel must be odd with padding=(kernel-1)/2")
        if not self.theta_min < self.theta_max:
            raise ValidationError("model.theta_min must be < model.theta_max")
        if self.scheme not in ("sparse", "dense"):
            raise ValidationError(f"unknown grid scheme {self.scheme!r}")
        if self.map_mode not in ("both", "content", "boundary"):
            raise ValidationError(f"unknown map_mode {self.map_mode!r}")
        if self.gru_layers < 1:
            raise ValidationError("model.gru_layers must be >= 1")
        if self.vocab_size < 2:
            raise ValidationError("model.vocab_size must cover pad and unk ids")
        return self


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    checkpoint_dir: str = "runs"

    def validate(self):
        if self.lr < 0:
            raise ValidationError("train.lr must be >= 0")
        if self.epochs < 1:
            raise ValidationError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size must be >= 1")
        return self


@dataclass
class EvalConfig:
    top_ns: tuple = (1, 5)
    iou_thresholds: tuple = (0.3, 0.5, 0.7)
    nms_threshold: float = 0.49

    def validate(self):
        if any(n < 1 for n in self.top_ns):
            raise ValidationError("eval.top_ns entries must be >= 1")
        if any(not 0.0 < m <= 1.0 for m in self.iou_thresholds):
            raise ValidationError("eval.iou_thresholds entries must be in (0, 1]")
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _parse_value(raw, pytype, key):
    raw = raw.strip()
    try:
        if pytype is int:
            return int(raw)
        if pytype is float:
            return float(raw)
        if pytype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if pytype is tuple:
            parts = [p for p in raw.split(",") if p.strip()]
            nums = [float(p) if "." in p else int(p) for p in parts]
            return tuple(nums)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key!r}: {raw!r}") from exc


def parse_config_text(text):
    """Parse dotted-key lines into a {key: raw-value} dict."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def load_configs(path=None, overrides=None, text=None):
    """Build validated (ModelConfig, TrainConfig, EvalConfig).

    `path` points at an optional dotted-key file (`text` passes the same
    content inline); `overrides` is a dict of dotted keys applied on top.
    Unknown keys raise ConfigError naming the key.
    """
    entries = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            entries.update(parse_config_text(fh.read()))
    if text is not None:
        entries.update(parse_config_text(text))
    entries.update(overrides or {})

    cfgs = {name: cls() for name, cls in _SECTIONS.items()}
    field_types = {
        name: {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        for name, cls in _SECTIONS.items()
    }
    for key, raw in entries.items():
        section, _, fname = key.partition(".")
        if section not in cfgs or fname not in field_types[section]:
            raise ConfigError(f"unknown config key {key!r}")
        value = raw if not isinstance(raw, str) else _parse_value(
            raw, field_types[section][fname], key
        )
        setattr(cfgs[section], fname, value)

    model = cfgs["model"].validate()
    train = cfgs["train"].validate()
    evalc = cfgs["eval"].validate()
    return model, train, evalc


def format_configs(model, train, evalc):
    """Render configs back to dotted-key text (the checkpoint config echo)."""
    lines = []
    for section, cfg in (("model", model), ("train", train), ("eval", evalc)):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{f.name}={value}")
    return "\n".join(lines) + "\n"
