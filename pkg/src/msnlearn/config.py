"""Run configuration: strict JSON parsing, preset expansion, validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SynthSpec
from .downstream.probe import ProbeConfig
from .downstream.temporal import MSTCNConfig
from .encoder import VIT_PRESETS, ViTConfig
from .exceptions import ConfigError
from .trainer import TrainConfig
from .views import AugmentConfig, ViewConfig

DEFAULT_FRACTIONS = [0.12, 0.25, 0.5, 0.75, 1.0]
DEFAULT_REPETITIONS = 3


@dataclass
class RunConfig:
    """Fully resolved configuration for one run."""

    output_dir: Path = Path("runs")
    synth: SynthSpec | None = None
    manifest_path: Path | None = None
    views: ViewConfig = field(default_factory=ViewConfig)
    encoder: ViTConfig = field(default_factory=lambda: VIT_PRESETS["vit-nano"])
    n_prototypes: int = 1024
    tau_anchor: float = 0.1
    tau_target: float = 0.025
    trainer: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    mstcn: MSTCNConfig = field(default_factory=MSTCNConfig)
    fractions: list[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    repetitions: int = DEFAULT_REPETITIONS

    def __post_init__(self) -> None:
        if self.n_prototypes <= 1:
            raise ConfigError("objective.n_prototypes must be > 1")
        if not 0.0 < self.tau_target < self.tau_anchor < 1.0:
            raise ConfigError(
                "temperature ordering violated: need 0 < tau_target < tau_anchor < 1, "
                f"got tau_target={self.tau_target}, tau_anchor={self.tau_anchor}"
            )
        if self.repetitions < 1:
            raise ConfigError("downstream.repetitions must be >= 1")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"downstream fraction {f} must be in (0, 1]")

    @property
    def seed(self) -> int:
        return self.trainer.seed

    def with_seed(self, seed: int) -> "RunConfig":
        # The run seed drives training and evaluation streams; the dataset
        # identity stays pinned to the synth spec's own seed.
        return dataclasses.replace(
            self, trainer=dataclasses.replace(self.trainer, seed=seed)
        )

    def to_json_dict(self) -> dict:
        dataio: dict = {}
        if self.synth is not None:
            dataio["synth"] = dataclasses.asdict(self.synth)
        if self.manifest_path is not None:
            dataio["manifest"] = str(self.manifest_path)
        views = dataclasses.asdict(self.views)
        views["focal_scale"] = list(views["focal_scale"])
        views["augment"]["crop_scale"] = list(views["augment"]["crop_scale"])
        views["augment"]["blur_sigma"] = list(views["augment"]["blur_sigma"])
        trainer = dataclasses.asdict(self.trainer)
        trainer.pop("me_max_weight")
        trainer.pop("sinkhorn_iters")
        return {
            "output_dir": str(self.output_dir),
            "dataio": dataio,
            "views": views,
            "encoder": dataclasses.asdict(self.encoder),
            "objective": {
                "n_prototypes": self.n_prototypes,
                "tau_anchor": self.tau_anchor,
                "tau_target": self.tau_target,
                "me_max_weight": self.trainer.me_max_weight,
                "sinkhorn_iters": self.trainer.sinkhorn_iters,
            },
            "trainer": trainer,
            "downstream": {
                "probe": dataclasses.asdict(self.probe),
                "mstcn": dataclasses.asdict(self.mstcn),
                "fractions": list(self.fractions),
                "repetitions": self.repetitions,
            },
        }

    def write_echo(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path


def _check_keys(section: dict, allowed: set[str], name: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {name!r}")


def _augment_from(section: dict) -> AugmentConfig:
    allowed = {
        "output_size", "crop_scale", "color_jitter", "brightness", "contrast",
        "saturation", "horizontal_flip", "flip_probability", "gaussian_blur",
        "blur_probability", "blur_sigma",
    }
    _check_keys(section, allowed, "views.augment")
    kwargs = dict(section)
    if "crop_scale" in kwargs:
        kwargs["crop_scale"] = tuple(kwargs["crop_scale"])
    if "blur_sigma" in kwargs:
        kwargs["blur_sigma"] = tuple(kwargs["blur_sigma"])
    return AugmentConfig(**kwargs)


def _views_from(section: dict) -> ViewConfig:
    allowed = {"patch_size", "keep_fraction", "n_focal", "focal_size",
               "focal_scale", "augment"}
    _check_keys(section, allowed, "views")
    kwargs = dict(section)
    aug = kwargs.pop("augment", None)
    if "focal_scale" in kwargs:
        kwargs["focal_scale"] = tuple(kwargs["focal_scale"])
    return ViewConfig(
        augment=_augment_from(aug) if aug is not None else AugmentConfig(),
        **kwargs,
    )


def _encoder_from(section: dict) -> ViTConfig:
    if "preset" in section:
        _check_keys(section, {"preset"}, "encoder")
        preset = section["preset"]
        if preset not in VIT_PRESETS:
            raise ConfigError(
                f"unknown encoder preset {preset!r}; choose from {sorted(VIT_PRESETS)}"
            )
        return VIT_PRESETS[preset]
    allowed = {"layers", "hidden_dim", "mlp_dim", "heads", "patch_size", "max_grid"}
    _check_keys(section, allowed, "encoder")
    missing = allowed - set(section)
    if missing:
        raise ConfigError(
            f"encoder section needs a preset or all of {sorted(allowed)}; "
            f"missing {sorted(missing)}"
        )
    return ViTConfig(**section)


def _dataio_from(section: dict) -> tuple[SynthSpec | None, Path | None]:
    _check_keys(section, {"synth", "manifest"}, "dataio")
    synth = None
    manifest = None
    if "synth" in section:
        synth_section = section["synth"]
        allowed = {"n_videos", "frames_per_video", "n_phases", "image_size",
                   "noise_level", "seed", "label_mode"}
        _check_keys(synth_section, allowed, "dataio.synth")
        synth = SynthSpec(**synth_section)
    if "manifest" in section:
        manifest = Path(section["manifest"])
    if synth is not None and manifest is not None:
        raise ConfigError("dataio must name either a synth spec or a manifest, not both")
    return synth, manifest


def parse_config(path: Path | str) -> RunConfig:
    """Parse and fully validate a run config; unknown keys are rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at {path}:{exc.lineno}:{exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(
        doc,
        {"output_dir", "dataio", "views", "encoder", "objective", "trainer",
         "downstream"},
        "<root>",
    )

    synth, manifest = _dataio_from(doc.get("dataio", {}))
    views = _views_from(doc.get("views", {}))
    encoder = _encoder_from(doc.get("encoder", {"preset": "vit-nano"}))

    objective = doc.get("objective", {})
    _check_keys(
        objective,
        {"n_prototypes", "tau_anchor", "tau_target", "me_max_weight",
         "sinkhorn_iters"},
        "objective",
    )

    trainer_section = dict(doc.get("trainer", {}))
    allowed_trainer = {
        "learning_rate", "weight_decay", "batch_size", "epochs", "warmup_epochs",
        "ema_start", "ema_end", "checkpoint_every", "seed",
    }
    _check_keys(trainer_section, allowed_trainer, "trainer")
    if "me_max_weight" in objective:
        trainer_section["me_max_weight"] = objective["me_max_weight"]
    if "sinkhorn_iters" in objective:
        trainer_section["sinkhorn_iters"] = objective["sinkhorn_iters"]
    trainer = TrainConfig(**trainer_section)

    downstream = doc.get("downstream", {})
    _check_keys(downstream, {"probe", "mstcn", "fractions", "repetitions"}, "downstream")
    probe_section = downstream.get("probe", {})
    _check_keys(
        probe_section,
        {"optimizer", "learning_rate", "weight_decay", "batch_size", "epochs"},
        "downstream.probe",
    )
    mstcn_section = downstream.get("mstcn", {})
    _check_keys(
        mstcn_section,
        {"stages", "layers_per_stage", "hidden_channels", "kernel_size"},
        "downstream.mstcn",
    )

    return RunConfig(
        output_dir=Path(doc.get("output_dir", "runs")),
        synth=synth,
        manifest_path=manifest,
        views=views,
        encoder=encoder,
        n_prototypes=objective.get("n_prototypes", 1024),
        tau_anchor=objective.get("tau_anchor", 0.1),
        tau_target=objective.get("tau_target", 0.025),
        trainer=trainer,
        probe=ProbeConfig(**probe_section),
        mstcn=MSTCNConfig(**mstcn_section),
        fractions=list(downstream.get("fractions", DEFAULT_FRACTIONS)),
        repetitions=downstream.get("repetitions", DEFAULT_REPETITIONS),
    )
