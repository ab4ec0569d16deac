"""
Typed settings for every stage of the pipeline and the resolution of a run
configuration: a named preset, then a JSON file, then `key=value` overrides.
Unknown keys are refused at every level so a typo never silently falls back
to a default.
"""

import json
import re
from copy import deepcopy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from modalign import get_logger
from modalign.exceptions import InvalidInput

__all__ = [
    "ABNORMALITY_VOCABULARY",
    "AblationFlags",
    "FinetuneConfig",
    "ModelConfig",
    "PRESETS",
    "PhantomSpec",
    "PretrainConfig",
    "TSNEConfig",
    "load_run_config",
    "parse_override",
]

logger = get_logger()

# nine abnormalities spread over liver and brain studies
ABNORMALITY_VOCABULARY = (
    "cyst",
    "hemangioma",
    "metastasis",
    "abscess",
    "hepatocellular carcinoma",
    "focal nodular hyperplasia",
    "cholangiocarcinoma",
    "glioma",
    "meningioma",
)

_MODALITY_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_+-]*$")


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidInput(message)


class _Settings:
    """
    Mixin shared by the settings dataclasses: strict construction from a
    plain mapping and a JSON friendly dump.
    """

    _nested: Dict[str, type] = {}

    @classmethod
    def from_mapping(cls, mapping: Optional[Mapping[str, Any]] = None):
        mapping = dict(mapping or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise InvalidInput(
                f"Unknown configuration key(s) for {cls.__name__}: "
                f"{', '.join(unknown)}"
            )

        values = {}
        for name, value in mapping.items():
            nested = cls._nested.get(name)
            if nested is not None and not is_dataclass(value):
                if not isinstance(value, Mapping):
                    raise InvalidInput(
                        f"'{name}' must be an object in {cls.__name__}"
                    )
                value = nested.from_mapping(value)
            values[name] = value

        try:
            settings = cls(**values)
        except TypeError as e:
            raise InvalidInput(f"Invalid {cls.__name__}: {e}")
        settings.validate()
        return settings

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        pass


@dataclass
class PhantomSpec(_Settings):
    grid_size: int = 32
    n_records: int = 800
    n_classes: int = 4
    modalities: List[str] = field(default_factory=lambda: ["T1", "T2", "DWI"])
    # modality -> [mean, std] of the lesion peak intensity
    lesion_intensity_by_modality: Dict[str, List[float]] = field(
        default_factory=dict
    )
    base_intensity_by_modality: Dict[str, float] = field(default_factory=dict)
    noise_std: float = 0.05
    seed: int = 0
    class_names: Optional[List[str]] = None
    labels_per_record: int = 1
    workers: int = 1

    def validate(self) -> None:
        _check(self.grid_size >= 8, "grid_size must be at least 8")
        _check(self.n_records >= 1, "n_records must be at least 1")
        _check(self.n_classes >= 2, "n_classes must be at least 2")
        _check(self.noise_std >= 0, "noise_std must be non-negative")
        _check(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned int")
        _check(self.workers >= 1, "workers must be at least 1")
        _check(len(self.modalities) > 0, "modalities cannot be empty")
        _check(
            len(set(self.modalities)) == len(self.modalities),
            "modalities must be unique",
        )
        for modality in self.modalities:
            _check(
                bool(_MODALITY_NAME.match(modality)),
                f"Modality '{modality}' must be alphanumeric (with _ + -)",
            )
        for key in list(self.lesion_intensity_by_modality) + list(
            self.base_intensity_by_modality
        ):
            _check(
                key in self.modalities,
                f"Intensity given for undeclared modality '{key}'",
            )
        for modality, profile in self.lesion_intensity_by_modality.items():
            _check(
                len(profile) == 2 and profile[1] >= 0,
                f"Lesion intensity of '{modality}' must be [mean, std>=0]",
            )
        _check(
            1 <= self.labels_per_record <= min(self.n_classes, 8),
            "labels_per_record must be between 1 and min(n_classes, 8)",
        )
        if self.class_names is not None:
            _check(
                len(self.class_names) == self.n_classes,
                "class_names must list exactly n_classes names",
            )
        else:
            _check(
                self.n_classes <= len(ABNORMALITY_VOCABULARY),
                f"n_classes={self.n_classes} exceeds the "
                f"{len(ABNORMALITY_VOCABULARY)} abnormality names available "
                "to the report templates",
            )

    def resolved_class_names(self) -> List[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return list(ABNORMALITY_VOCABULARY[: self.n_classes])

    def lesion_intensity(self, modality: str) -> Tuple[float, float]:
        if modality in self.lesion_intensity_by_modality:
            mean, std = self.lesion_intensity_by_modality[modality]
            return float(mean), float(std)
        index = self.modalities.index(modality)
        return 0.85 - 0.05 * (index % 3), 0.04

    def base_intensity(self, modality: str) -> float:
        if modality in self.base_intensity_by_modality:
            return float(self.base_intensity_by_modality[modality])
        index = self.modalities.index(modality)
        return 0.25 + 0.05 * (index % 4)


@dataclass
class ModelConfig(_Settings):
    grid_size: int = 32
    conv_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    feature_channels: int = 64
    embed_dim: int = 128
    text_encoder: str = "token-bag"
    text_vocab_size: int = 8192
    text_dim: int = 128
    text_seed: int = 1234
    max_tokens: int = 64
    patch_size: int = 4
    window_size: int = 2
    swin_dim: int = 32
    swin_depths: List[int] = field(default_factory=lambda: [2, 2])
    num_heads: int = 4
    fusion_layers: int = 2
    fusion_heads: int = 4
    mlp_ratio: float = 2.0

    def validate(self) -> None:
        _check(self.grid_size >= 8, "model.grid_size must be at least 8")
        _check(len(self.conv_channels) >= 1, "conv_channels cannot be empty")
        _check(
            all(c >= 1 for c in self.conv_channels), "conv_channels must be > 0"
        )
        _check(self.embed_dim >= 2, "embed_dim must be at least 2")
        _check(self.text_dim >= 2, "text_dim must be at least 2")
        _check(self.text_vocab_size >= 2, "text_vocab_size must be >= 2")
        _check(self.max_tokens >= 1, "max_tokens must be at least 1")
        _check(
            self.patch_size >= 1
            and (self.patch_size & (self.patch_size - 1)) == 0,
            "patch_size must be a power of two",
        )
        _check(self.window_size >= 1, "window_size must be at least 1")
        _check(len(self.swin_depths) >= 1, "swin_depths cannot be empty")
        stage_stride = self.patch_size * 2 ** (len(self.swin_depths) - 1)
        _check(
            stage_stride <= self.stride,
            "patch_size and swin_depths downsample more than the conv stream",
        )
        for i in range(len(self.swin_depths)):
            _check(
                (self.swin_dim * 2**i) % self.num_heads == 0,
                "swin stage widths must be divisible by num_heads",
            )
        _check(
            self.feature_channels % self.fusion_heads == 0,
            "feature_channels must be divisible by fusion_heads",
        )
        _check(self.fusion_layers >= 1, "fusion_layers must be at least 1")
        _check(self.mlp_ratio > 0, "mlp_ratio must be positive")

    @property
    def stride(self) -> int:
        return 2 ** (len(self.conv_channels) + 1)


@dataclass
class PretrainConfig(_Settings):
    epochs: int = 20
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    temperature: float = 0.07
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    _nested = {"model": ModelConfig}

    def validate(self) -> None:
        _check(self.epochs >= 1, "epochs must be at least 1")
        _check(self.learning_rate > 0, "learning_rate must be positive")
        _check(self.weight_decay >= 0, "weight_decay must be non-negative")
        _check(self.batch_size >= 1, "batch_size must be at least 1")
        _check(self.temperature > 0, "temperature must be positive")
        _check(
            self.model.embed_dim == self.model.text_dim,
            "pretraining aligns vision and text in the text space, "
            "model.embed_dim must equal model.text_dim",
        )
        if self.batch_size == 1:
            logger.warning(
                "batch_size=1 gives a constant zero contrastive loss"
            )


@dataclass
class AblationFlags(_Settings):
    use_pretrained: bool = True
    use_cct: bool = True
    use_csa: bool = True

    def validate(self) -> None:
        _check(
            self.use_cct or not self.use_csa,
            "use_csa requires use_cct: text modulation feeds the "
            "cross-attention fusion",
        )


@dataclass
class FinetuneConfig(_Settings):
    epochs: int = 40
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    seed: int = 0
    ablation_flags: AblationFlags = field(default_factory=AblationFlags)
    kl_direction: str = "forward"
    kl_temperature: float = 1.0
    schedule_base: float = 0.1
    schedule_decay: float = 5.0
    ablation_seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    model: ModelConfig = field(default_factory=ModelConfig)

    _nested = {"model": ModelConfig, "ablation_flags": AblationFlags}

    def validate(self) -> None:
        _check(self.epochs >= 1, "epochs must be at least 1")
        _check(self.learning_rate > 0, "learning_rate must be positive")
        _check(self.weight_decay >= 0, "weight_decay must be non-negative")
        _check(self.batch_size >= 1, "batch_size must be at least 1")
        _check(
            self.kl_direction in ("forward", "reverse"),
            "kl_direction must be 'forward' or 'reverse'",
        )
        _check(self.kl_temperature > 0, "kl_temperature must be positive")
        _check(self.schedule_base > 0, "schedule_base must be positive")
        _check(len(self.ablation_seeds) >= 1, "ablation_seeds cannot be empty")


@dataclass
class TSNEConfig(_Settings):
    perplexity: float = 30.0
    iterations: int = 1000
    seed: int = 0
    learning_rate: Optional[float] = None
    early_exaggeration: float = 12.0
    exaggeration_iterations: int = 250
    momentum_switch: int = 250

    def validate(self) -> None:
        _check(self.perplexity > 0, "perplexity must be positive")
        _check(self.iterations >= 1, "iterations must be at least 1")
        _check(
            self.learning_rate is None or self.learning_rate > 0,
            "learning_rate must be positive",
        )
        _check(self.early_exaggeration >= 1, "early_exaggeration must be >= 1")


SECTIONS = {
    "phantom": PhantomSpec,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "tsne": TSNEConfig,
}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {},
    "paper": {
        "phantom": {"grid_size": 128},
        "pretrain": {
            "epochs": 300,
            "learning_rate": 1e-4,
            "model": {"grid_size": 128},
        },
        "finetune": {
            "epochs": 500,
            "learning_rate": 1e-5,
            "model": {"grid_size": 128},
        },
    },
    "liver": {"phantom": {"n_classes": 7, "n_records": 1400}},
    "brain": {
        "phantom": {
            "n_classes": 2,
            "class_names": ["benign tumor", "malignant tumor"],
        }
    },
}


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    merged = deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = deepcopy(value)
    return merged


def parse_override(expression: str) -> Dict[str, Any]:
    """
    Turn `model.grid_size=16` into `{"model": {"grid_size": 16}}`. The value
    is read as JSON and kept as a raw string when it is not valid JSON.
    """
    if "=" not in expression:
        raise InvalidInput(f"Override '{expression}' must look like key=value")
    key, raw = expression.split("=", 1)
    key = key.strip()
    if not key:
        raise InvalidInput(f"Override '{expression}' has an empty key")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw

    result: Dict[str, Any] = {}
    cursor = result
    parts = key.split(".")
    for part in parts[:-1]:
        cursor = cursor.setdefault(part, {})
    cursor[parts[-1]] = value
    return result


def load_run_config(
    section: str,
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    preset: str = "desk",
):
    """
    Resolve the settings of one pipeline stage and return the typed
    dataclass. The JSON file holds the stage fields at its top level.
    """
    if section not in SECTIONS:
        raise InvalidInput(f"Unknown configuration section '{section}'")
    if preset not in PRESETS:
        raise InvalidInput(
            f"Unknown preset '{preset}', expected one of: "
            f"{', '.join(sorted(PRESETS))}"
        )

    resolved = deepcopy(PRESETS[preset].get(section, {}))
    if path:
        try:
            with open(path, encoding="utf-8") as fd:
                document = json.load(fd)
        except OSError as e:
            raise InvalidInput(f"Cannot read config '{path}': {e.strerror}")
        except ValueError as e:
            raise InvalidInput(f"Config '{path}' is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise InvalidInput(f"Config '{path}' must hold a JSON object")
        resolved = _merge(resolved, document)

    for expression in overrides:
        resolved = _merge(resolved, parse_override(expression))

    return SECTIONS[section].from_mapping(resolved)
