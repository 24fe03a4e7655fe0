"""JSON experiment configuration: strict parsing, defaults, and the resolved echo.

Every section validates against its module's invariants at load time, before
any work starts. Unknown keys are rejected. A `--seed` override replaces the
master seed before section defaults are derived from it, and every command
writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .data import DataSpec
from .errors import ConfigError
from .model import ModelConfig
from .modulation import IEMFConfig
from .neurons import LIFParams
from .training import OptimConfig


def _take(section: dict, name: str, allowed: set[str]) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r} section: {sorted(unknown)}")


@dataclass
class ModelSettings:
    hidden: int = 64
    latent: int = 32
    depth: int = 2
    neuron_mode: str = "continuous"
    head_mode: str = "probe_detached"
    head_loss_weight: float = 1.0
    lif: LIFParams = field(default_factory=LIFParams)


@dataclass
class ContinualSettings:
    tasks: int = 3
    classes_per_task: int = 2
    method: str = "finetune"
    lwf_temperature: float = 2.0
    lwf_lambda: float = 1.0

    def __post_init__(self):
        if self.tasks < 1 or self.classes_per_task < 1:
            raise ConfigError("tasks and classes_per_task must be positive")
        if self.method not in ("finetune", "lwf"):
            raise ConfigError("continual method must be 'finetune' or 'lwf'")
        if self.lwf_temperature <= 0.0:
            raise ConfigError("lwf_temperature must be positive")
        if self.lwf_lambda < 0.0:
            raise ConfigError("lwf_lambda must be non-negative")


@dataclass
class SharpnessSettings:
    checkpoint: str | None = None
    ball_radius: float = 0.05
    n_probes: int = 8
    ascent_steps: int = 20
    blocks: str = "fusion"


@dataclass
class LandscapeSettings:
    checkpoint: str | None = None
    grid_n: int = 21
    extent: float = 1.0


@dataclass
class ContractionSettings:
    eigenvalues: list[float] = field(default_factory=lambda: [1.0, 10.0])
    alpha0: list[float] = field(default_factory=lambda: [1.0, 1.0])
    eta: float = 0.05
    xi: float | list[float] = 1.0
    steps: int = 100
    rotation_seed: int | None = None
    tolerance: float = 1e-10

    def schedule(self) -> list[float]:
        if isinstance(self.xi, (int, float)):
            return [float(self.xi)] * self.steps
        return [float(x) for x in self.xi]


@dataclass
class CostSettings:
    metrics: list[str] = field(default_factory=list)
    labels: list[str] | None = None
    thresholds: int = 5


@dataclass
class AnalysisSettings:
    sharpness: SharpnessSettings = field(default_factory=SharpnessSettings)
    landscape: LandscapeSettings = field(default_factory=LandscapeSettings)
    contraction: ContractionSettings = field(default_factory=ContractionSettings)
    cost: CostSettings = field(default_factory=CostSettings)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str | None = None
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    optim: OptimConfig = field(default_factory=OptimConfig)
    continual: ContinualSettings = field(default_factory=ContinualSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def model_config(self) -> ModelConfig:
        """Model configuration with widths filled in from the data section."""
        return ModelConfig(
            d_in_a=self.data.d_a,
            d_in_v=self.data.d_v,
            n_classes=self.data.n_classes,
            hidden=self.model.hidden,
            latent=self.model.latent,
            depth=self.model.depth,
            neuron_mode=self.model.neuron_mode,
            lif=self.model.lif,
            head_mode=self.model.head_mode,
            head_loss_weight=self.model.head_loss_weight,
        )

    def resolved(self) -> dict:
        out = asdict(self)
        return out


def _parse_lif(raw: dict) -> LIFParams:
    _take(raw, "model.lif", {"u_th", "tau_m", "t_steps", "surrogate_width"})
    return LIFParams(**raw)


def _parse_model(raw: dict) -> ModelSettings:
    _take(raw, "model", {"hidden", "latent", "depth", "neuron_mode", "head_mode",
                         "head_loss_weight", "lif"})
    lif = _parse_lif(raw.pop("lif", {}))
    return ModelSettings(lif=lif, **raw)


def _parse_optim(raw: dict, iemf_raw: dict, seed: int) -> OptimConfig:
    _take(raw, "optim", {"eta", "weight_decay", "epochs", "batch_size", "seed", "method",
                         "mslr"})
    _take(iemf_raw, "iemf", {"enabled", "gamma", "gating"})
    mslr = raw.pop("mslr", None) or {}
    _take(mslr, "optim.mslr", {"mult_a", "mult_v"})
    raw.setdefault("seed", seed)
    return OptimConfig(iemf=IEMFConfig(**iemf_raw),
                       mult_a=mslr.get("mult_a", 1.0), mult_v=mslr.get("mult_v", 1.0), **raw)


def _parse_analysis(raw: dict) -> AnalysisSettings:
    _take(raw, "analysis", {"sharpness", "landscape", "contraction", "cost"})
    sharp = raw.get("sharpness", {})
    _take(sharp, "analysis.sharpness", {"checkpoint", "ball_radius", "n_probes",
                                        "ascent_steps", "blocks"})
    land = raw.get("landscape", {})
    _take(land, "analysis.landscape", {"checkpoint", "grid_n", "extent"})
    contraction = raw.get("contraction", {})
    _take(contraction, "analysis.contraction", {"eigenvalues", "alpha0", "eta", "xi",
                                                "steps", "rotation_seed", "tolerance"})
    cost = raw.get("cost", {})
    _take(cost, "analysis.cost", {"metrics", "labels", "thresholds"})
    return AnalysisSettings(
        sharpness=SharpnessSettings(**sharp),
        landscape=LandscapeSettings(**land),
        contraction=ContractionSettings(**contraction),
        cost=CostSettings(**cost),
    )


def from_dict(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    raw = dict(raw)
    _take(raw, "top-level", {"seed", "output_dir", "data", "model", "optim", "iemf",
                             "continual", "analysis"})
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)

    data_raw = dict(raw.get("data", {}))
    _take(data_raw, "data", {"n_classes", "d_a", "d_v", "train_per_class", "test_per_class",
                             "sigma_a", "sigma_v", "drop_prob_a", "drop_prob_v",
                             "prototype_scale", "seed"})
    data_raw.setdefault("seed", seed)

    continual_raw = dict(raw.get("continual", {}))
    _take(continual_raw, "continual", {"tasks", "classes_per_task", "method",
                                       "lwf_temperature", "lwf_lambda"})
    try:
        return ExperimentConfig(
            seed=seed,
            output_dir=raw.get("output_dir"),
            data=DataSpec(**data_raw),
            model=_parse_model(dict(raw.get("model", {}))),
            optim=_parse_optim(dict(raw.get("optim", {})), dict(raw.get("iemf", {})), seed),
            continual=ContinualSettings(**continual_raw),
            analysis=_parse_analysis(dict(raw.get("analysis", {}))),
        )
    except TypeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc


def load_config(path: str, seed_override: int | None = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    return from_dict(raw, seed_override)
