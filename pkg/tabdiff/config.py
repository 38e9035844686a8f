"""
Run configuration: one dataclass per section, every field defaulted.

    {"data": {...}, "vae": {...}, "schedule": {...}, "dit": {...},
     "train": {...}, "sample": {...}, "eval": {...}, "export": {...}}

Missing sections/keys take the defaults below; unknown ones are rejected.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from tabdiff.annotations import StructureConstraints
from tabdiff.autoencoder import DOWNSAMPLE, VaeTrainConfig
from tabdiff.diffusion import TrainConfig
from tabdiff.dit import PRESETS, DiTConfig, preset
from tabdiff.errors import ConfigError, StructureConstraintError
from tabdiff.evaluation import EXTRACTORS
from tabdiff.numerics import U64
from tabdiff.schedule import build_schedule

PRESET_IMAGE_SIZE = {name: p["latent_size"] * DOWNSAMPLE for name, p in PRESETS.items()}

@dataclass
class DataConfig:
    count: int = 2000                       # training images
    holdout: int = 256                      # reference images (Fréchet reference, sampling targets)
    height: int = 64
    width: int = 64
    rows: tuple[int, int] = (2, 5)
    cols: tuple[int, int] = (2, 5)
    margin: int = 4
    min_gap: int = 8
    line_thickness: tuple[int, int] = (2, 3)
    voc_dir: str | None = None              # ingest real VOC annotations instead of toy tables
    image_dir: str | None = None            # images for voc_dir (defaults to voc_dir)

    def constraints(self) -> StructureConstraints:
        return StructureConstraints(self.height, self.width, tuple(self.rows), tuple(self.cols), self.margin,
                                    self.min_gap, tuple(self.line_thickness))

@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

@dataclass
class DitOverrides:
    """Explicit overrides on top of the preset named by train.preset."""
    depth: int | None = None
    dim: int | None = None
    heads: int | None = None
    patch: int | None = None
    mlp_ratio: float | None = None

@dataclass
class SampleConfig:
    steps: int = 750
    count: int = 64
    eta: float = 0.0
    batch_size: int = 16
    seeds: list[int] | None = None          # explicit per-sample seeds (else derived from --seed)

@dataclass
class EvalConfig:
    extractor: str = "embed"
    iou_threshold: float = 0.5

@dataclass
class ExportConfig:
    merge_voc_dir: str | None = None
    merge_image_dir: str | None = None

SECTIONS = {
    "data": DataConfig,
    "vae": VaeTrainConfig,
    "schedule": ScheduleConfig,
    "dit": DitOverrides,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
    "export": ExportConfig,
}

@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dit: DitOverrides = field(default_factory=DitOverrides)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        d = self.data
        if d.count < 1 or d.holdout < 0:
            raise ConfigError("data.count must be >= 1 and data.holdout >= 0")
        if d.voc_dir is None:
            try:
                d.constraints().check()
            except StructureConstraintError as e:
                raise ConfigError(f"data: {e}") from None
        size = PRESET_IMAGE_SIZE[self.train.preset]
        if (d.height, d.width) != (size, size):
            raise ConfigError(f"data: {d.height}x{d.width} images do not match preset {self.train.preset!r} "
                              f"({size}x{size})")
        v = self.vae
        if v.epochs < 0 or v.steps < 0 or v.batch_size < 1 or v.lr <= 0 or v.kl_weight < 0 or len(v.widths) != 3:
            raise ConfigError("vae: need epochs, steps >= 0, batch_size >= 1, lr > 0, kl_weight >= 0, 3 widths")
        if v.epochs == 0 and v.steps == 0:
            raise ConfigError("vae: one of epochs or steps must be > 0")
        try:
            build_schedule(**dataclasses.asdict(self.schedule))
        except ValueError as e:
            raise ConfigError(f"schedule: {e}") from None
        if self.train.T != self.schedule.T:
            raise ConfigError(f"train.T={self.train.T} disagrees with schedule.T={self.schedule.T}")
        self.dit_config()
        s = self.sample
        if not 1 <= s.steps <= self.schedule.T:
            raise ConfigError(f"sample.steps must be in 1..{self.schedule.T}, got {s.steps}")
        if s.count < 1 or s.batch_size < 1 or s.eta < 0:
            raise ConfigError("sample: need count >= 1, batch_size >= 1, eta >= 0")
        if s.seeds is not None and len(s.seeds) != s.count:
            raise ConfigError(f"sample.seeds has {len(s.seeds)} entries but sample.count is {s.count}")
        for seed in [self.train.seed, *(s.seeds or ())]:
            if not isinstance(seed, int) or not 0 <= seed < U64:
                raise ConfigError(f"seeds must be unsigned 64-bit integers, got {seed!r}")
        if self.eval.extractor not in EXTRACTORS:
            raise ConfigError(f"eval.extractor must be one of {EXTRACTORS}, got {self.eval.extractor!r}")
        if not 0 < self.eval.iou_threshold <= 1:
            raise ConfigError("eval.iou_threshold must be in (0, 1]")

    def dit_config(self) -> DiTConfig:
        overrides = {k: v for k, v in dataclasses.asdict(self.dit).items() if v is not None}
        return preset(self.train.preset, conditional=self.train.conditional, max_T=self.schedule.T, **overrides)

    def with_preset(self, name: str) -> "RunConfig":
        """--preset: swap the DiT preset and the matching image size."""
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        size = PRESET_IMAGE_SIZE[name]
        return dataclasses.replace(self, train=dataclasses.replace(self.train, preset=name),
                                   data=dataclasses.replace(self.data, height=size, width=size))

    def with_conditioning(self, conditional: bool) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, conditional=conditional))

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section {unknown[0]!r}")
        return cls(**{name: _section(name, SECTIONS[name], doc.get(name, {})) for name in SECTIONS})

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            return cls.from_json(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None

def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v

def _section(name: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"unknown key {name}.{key}")
    kw = {}
    for key, v in values.items():
        default = fields[key].default
        kw[key] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None

def config_hash(*parts) -> str:
    """First 10 hex digits of the SHA-256 of the canonical JSON of `parts`."""
    canon = json.dumps(_plain(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:10]
