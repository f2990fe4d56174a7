"""Run configuration: nested sections, JSON I/O, dotted overrides, stage hashes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .adapt import ProbeConfig, SegHeadConfig
from .distill import DOMAINS, DistillConfig
from .encoder import EncoderConfig
from .masking import FrequencyMaskSpec, SpatialMaskSpec

OUT_ENV = "TINYDISTILL_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    manifest: Optional[str] = None  # None: generate phantoms under the output root
    phantoms: int = 512
    classes: int = 3
    image_size: int = 64
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    resplit: bool = True  # re-split phantoms / unsplit manifests with the run seed


@dataclass(frozen=True)
class MaskingSection:
    spatial_ratio: float = 0.75
    num_bands: int = 7
    bands_per_mask: int = 2
    frequency_ratio: float = 0.4
    center_preserve: Optional[tuple[int, int]] = None


@dataclass(frozen=True)
class EncoderSection:
    depth: int = 12
    dim: int = 32
    heads: int = 4
    patch_size: int = 8
    mid_layer: int = 8
    tap_layers: tuple[int, ...] = (3, 5, 7, 11)
    mlp_ratio: float = 2.0


@dataclass(frozen=True)
class TeacherSection(EncoderSection):
    dim: int = 64
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.05
    trace_epochs: int = 10


@dataclass(frozen=True)
class CoresetSection:
    budget: Optional[int] = None
    fraction: Optional[float] = 0.25
    k1: Optional[int] = None  # None: distinct organ tags in the train split, else 8
    k2: int = 4
    alpha: float = 0.5
    beta: float = 0.5
    strategy: str = "curated"  # or "random"


@dataclass(frozen=True)
class DistillSection:
    lambda_recon: float = 1.0
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_fraction: float = 0.05
    poly_power: float = 0.9
    recon_domains: tuple[str, ...] = DOMAINS
    dynamic_weighting: bool = True


@dataclass(frozen=True)
class AdaptSection:
    task: str = "cls"
    lr0: float = 1e-2
    epochs: int = 100
    seg_lr0: float = 1e-3
    seg_epochs: int = 40
    batch_size: int = 32
    poly_power: float = 0.9
    augment: bool = False
    freeze_backbone: bool = True
    readout: str = "heads"
    neck_dim: int = 32
    seg_finetune: bool = False
    vanilla: bool = False


@dataclass(frozen=True)
class SweepSection:
    kind: str = "ablation"  # "ablation" (domains x weighting + layers) or "subset"
    layers: tuple[int, ...] = (2, 4, 6, 8, 10, 12)
    budgets: tuple[int, ...] = (16, 32, 64)
    strategies: tuple[str, ...] = ("curated", "random")
    metric: str = "val_loss"  # or "cls" / "seg" for a downstream metric per variant


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_root: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    masking: MaskingSection = field(default_factory=MaskingSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: EncoderSection = field(default_factory=EncoderSection)
    coreset: CoresetSection = field(default_factory=CoresetSection)
    distill: DistillSection = field(default_factory=DistillSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # ------------------------------------------------------------ conversion

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            key, value = _split_override(item)
            _set_dotted(d, key, value)
        return RunConfig.from_dict(d)

    # ----------------------------------------------------- module configs

    def encoder_config(self, which: str) -> EncoderConfig:
        sec = self.teacher if which == "teacher" else self.student
        return EncoderConfig(
            depth=sec.depth,
            dim=sec.dim,
            heads=sec.heads,
            patch_size=sec.patch_size,
            image_size=self.data.image_size,
            mid_layer=sec.mid_layer,
            tap_layers=sec.tap_layers,
            mlp_ratio=sec.mlp_ratio,
        )

    def spatial_spec(self) -> SpatialMaskSpec:
        return SpatialMaskSpec(patch_size=self.student.patch_size, mask_ratio=self.masking.spatial_ratio)

    def frequency_spec(self) -> FrequencyMaskSpec:
        m = self.masking
        return FrequencyMaskSpec(m.num_bands, m.bands_per_mask, m.frequency_ratio, m.center_preserve)

    def distill_config(self, name: Optional[str] = None) -> DistillConfig:
        d = self.distill
        return DistillConfig(
            lambda_recon=d.lambda_recon,
            mid_layer=self.student.mid_layer,
            epochs=d.epochs,
            batch_size=d.batch_size,
            lr=d.lr,
            weight_decay=d.weight_decay,
            warmup_fraction=d.warmup_fraction,
            poly_power=d.poly_power,
            seed=self.seed,
            recon_domains=d.recon_domains,
            dynamic_weighting=d.dynamic_weighting,
            name=name or variant_name(d.recon_domains, d.dynamic_weighting),
        )

    def probe_config(self, task: Optional[str] = None) -> ProbeConfig:
        a = self.adapt
        seg = (task or a.task) == "seg"
        return ProbeConfig(
            num_classes=self.data.classes + 1 if seg else self.data.classes,
            freeze_backbone=a.freeze_backbone,
            lr0=a.seg_lr0 if seg else a.lr0,
            epochs=a.seg_epochs if seg else a.epochs,
            poly_power=a.poly_power,
            batch_size=a.batch_size,
            augment=a.augment,
            readout=a.readout,
        )

    def seg_config(self) -> SegHeadConfig:
        return SegHeadConfig(
            tap_layers=self.student.tap_layers,
            neck_dim=self.adapt.neck_dim,
            num_classes=self.data.classes + 1,
            finetune_backbone=self.adapt.seg_finetune,
        )

    def budget_for(self, n: int) -> int:
        c = self.coreset
        if c.budget is not None:
            return c.budget
        return max(1, round(c.fraction * n))

    def k1_for(self, organs: Sequence[Optional[str]]) -> int:
        """Level-1 cluster count, clamped to the pool size."""
        k1 = self.coreset.k1
        if k1 is None:
            tags = {o for o in organs if o}
            k1 = len(tags) if tags else 8
        return max(1, min(k1, len(organs)))

    # ---------------------------------------------------------- validation

    def validate(self) -> "RunConfig":
        """Build every module config once so that bad values fail before any output."""
        try:
            t, s = self.encoder_config("teacher"), self.encoder_config("student")
            if t.heads != s.heads:
                raise ConfigError(f"teacher.heads={t.heads} and student.heads={s.heads} must match")
            if t.patch_size != s.patch_size:
                raise ConfigError("teacher and student must share patch_size")
            self.spatial_spec()
            self.frequency_spec().preserve_for((self.data.image_size, self.data.image_size))
            self.distill_config()
            self.probe_config("cls")
            self.seg_config().validate_for(s.depth)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d, c, a, sw = self.data, self.coreset, self.adapt, self.sweep
        checks = [
            (d.manifest is not None or d.phantoms >= 1, "data.phantoms must be >= 1"),
            (d.classes >= 2, "data.classes must be >= 2"),
            (abs(sum(d.split_ratios) - 1.0) < 1e-9 and len(d.split_ratios) == 3, "data.split_ratios must be 3 values summing to 1"),
            (self.teacher.epochs >= 1 and self.teacher.lr > 0, "teacher.epochs >= 1 and teacher.lr > 0 required"),
            (self.teacher.trace_epochs >= 1, "teacher.trace_epochs must be >= 1"),
            ((c.budget is None) != (c.fraction is None), "set exactly one of coreset.budget / coreset.fraction"),
            (c.budget is None or c.budget >= 1, "coreset.budget must be >= 1"),
            (c.fraction is None or 0 < c.fraction <= 1, "coreset.fraction must be in (0, 1]"),
            ((c.k1 is None or c.k1 >= 1) and c.k2 >= 1, "coreset.k1 and coreset.k2 must be >= 1"),
            (0 <= c.alpha <= 1 and 0 <= c.beta <= 1, "coreset.alpha and coreset.beta must be in [0, 1]"),
            (c.strategy in ("curated", "random"), f"coreset.strategy must be curated|random, got {c.strategy!r}"),
            (a.task in ("cls", "seg"), f"adapt.task must be cls|seg, got {a.task!r}"),
            (a.seg_lr0 > 0 and a.seg_epochs >= 1, "adapt.seg_lr0 > 0 and adapt.seg_epochs >= 1 required"),
            (sw.kind in ("ablation", "subset"), f"sweep.kind must be ablation|subset, got {sw.kind!r}"),
            (sw.metric in ("val_loss", "cls", "seg"), f"sweep.metric must be val_loss|cls|seg, got {sw.metric!r}"),
            (all(1 <= l <= self.student.depth for l in sw.layers), "sweep.layers must lie within student depth"),
            (all(b >= 1 for b in sw.budgets), "sweep.budgets must be >= 1"),
            (set(sw.strategies) <= {"curated", "random"}, "sweep.strategies must be curated|random"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # ------------------------------------------------------- run directories

    def output_root(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_root)

    def stage_sections(self, stage: str) -> dict:
        """The config slice (plus upstream slices) that determines a stage's artifacts."""
        d = self.to_dict()
        deps = {
            "data": ["data"],
            "teacher": ["data", "masking", "teacher"],
            "curate": ["data", "masking", "teacher", "coreset"],
            "distill": ["data", "masking", "teacher", "coreset", "student", "distill"],
            "adapt": ["data", "masking", "teacher", "coreset", "student", "distill", "adapt"],
            "vanilla": ["data", "student", "adapt"],
            "sweep": [k for k in d if k not in ("seed", "out_root")],
        }[stage]
        out = {"seed": self.seed, **{k: d[k] for k in deps}}
        if stage in ("adapt", "vanilla"):
            out["adapt"] = {k: v for k, v in d["adapt"].items() if k != "vanilla"}
        return out

    def stage_hash(self, stage: str) -> str:
        blob = json.dumps(self.stage_sections(stage), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(f"{stage}:{blob}".encode()).hexdigest()[:12]

    def stage_dir(self, stage: str) -> Path:
        return self.output_root() / stage / self.stage_hash(stage)


def variant_name(domains: Sequence[str], dynamic: bool) -> str:
    domains = tuple(domains)
    recon = {(): "no-MIM", ("spatial",): "S-MIM", ("frequency",): "F-MIM"}.get(domains, "S+F-MIM")
    return f"{recon}/{'dynamic' if dynamic else 'fixed'}"


def load_config(path: Optional[str | os.PathLike], overrides: Sequence[str] = ()) -> RunConfig:
    base = RunConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "config" in raw and "stage" in raw:  # a stored snapshot
            raw = raw["config"]
        base = RunConfig.from_dict(raw)
    return base.with_overrides(overrides).validate()


def save_snapshot(config: RunConfig, stage: str, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"stage": stage, "hash": config.stage_hash(stage), "config": config.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ helpers


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        path = f"{where}.{name}" if where else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _coerce(value, default, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(value: Any, default: Any, path: str) -> Any:
    if value is None:
        return None
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def _split_override(item: str) -> tuple[str, Any]:
    item = item[2:] if item.startswith("--") else item
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
