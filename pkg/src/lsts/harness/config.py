"""Plain-text ``key = value`` experiment configuration."""

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # synthetic data
    frames: int = 24
    height: int = 32
    width: int = 32
    c_img: int = 3
    c_low: int = 8
    c_high: int = 16
    heavy_hidden: int = 128
    pattern: str = "smooth-noise"
    sigma: float = 0.01
    motion_dx: float = 1.5
    motion_dy: float = -0.5
    motion_std: float = 0.0
    gap: int = 1
    # sampler
    n_samples: int = 9
    init: str = "gaussian"
    normalize: str = "softmax"
    embed_channels: int = 0
    radius: float = 4.0
    trainable: bool = True
    train_embeddings: bool = False
    # optimisation
    lr: float = 4.0
    lr_decay: float = 0.1
    lr_decay_at: float = 0.85
    steps: int = 500
    loss_margin: int = 4
    # pipeline ladder
    interval: int = 10
    width_factor: float = 1.0 / 16
    ladder_frames: int = 24
    ladder_sigma: float = 1.2
    ladder_motion_dx: float = 0.15
    ladder_motion_dy: float = -0.1
    ladder_train_sequences: int = 4
    ladder_steps: int = 300
    ladder_lr: float = 1.0
    # gradient check
    tol: float = 1e-4
    fd_step: float = 1e-5
    instances: int = 20
    # output
    timing: bool = False

    def __post_init__(self):
        positive = ("frames", "height", "width", "c_img", "c_low", "c_high", "heavy_hidden",
                    "n_samples", "interval", "ladder_frames", "instances")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.c_low >= self.c_high:
            raise ConfigError("c_low must be smaller than c_high")
        if self.init not in ("gaussian", "uniform"):
            raise ConfigError("init must be 'gaussian' or 'uniform'")
        if self.normalize not in ("softmax", "ratio"):
            raise ConfigError("normalize must be 'softmax' or 'ratio'")
        if self.pattern not in ("smooth-noise", "moving-blobs"):
            raise ConfigError("pattern must be 'smooth-noise' or 'moving-blobs'")
        if self.gap < 1 or self.gap >= self.frames:
            raise ConfigError("gap must be in [1, frames)")
        if min(self.sigma, self.ladder_sigma, self.motion_std, self.loss_margin, self.steps,
               self.ladder_steps) < 0:
            raise ConfigError("sigma, motion_std, loss_margin and step counts must be >= 0")
        if not 0.0 <= self.lr_decay_at <= 1.0:
            raise ConfigError("lr_decay_at is a fraction of the total steps")
        if 2 * self.loss_margin >= min(self.height, self.width):
            raise ConfigError("loss_margin leaves no interior cells")

    def lr_at(self, step: int, total: int = None, base: float = None) -> float:
        total = self.steps if total is None else total
        base = self.lr if base is None else base
        return base * (self.lr_decay if step >= self.lr_decay_at * total else 1.0)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        try:
            return replace(self, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: ExperimentConfig = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    base = base or ExperimentConfig()
    try:
        return replace(base, **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
