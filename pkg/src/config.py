import configparser
import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.exceptions import ConfigurationError

load_dotenv()

class Settings:
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("LOG_FILE", "meta_cs.log")

    # Seed override for every CLI run (wins over --seed and the config file)
    META_CS_SEED = os.getenv("META_CS_SEED")

    # Storage
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "runs")
    DATA_DIR = os.getenv("DATA_DIR", "data")

    # Runtime
    SHOW_PROGRESS = os.getenv("SHOW_PROGRESS", "true").lower() == "true"
    SAMPLING_RETRIES = int(os.getenv("SAMPLING_RETRIES", 20))
    TORCH_THREADS = int(os.getenv("TORCH_THREADS", 0))

settings = Settings()


class Scenario(str, Enum):
    SGSC = "sgsc"
    SGDC = "sgdc"
    MGOD = "mgod"
    MGDD = "mgdd"


class FeatureMode(str, Enum):
    ATTRS_STRUCTURAL = "attrs+structural"
    STRUCTURAL_ONLY = "structural-only"


class LayerKind(str, Enum):
    GCN = "gcn"
    GAT = "gat"
    SAGE = "sage"


class CombineMode(str, Enum):
    SUM = "sum"
    AVERAGE = "average"
    ATTENTION = "attention"


class DecoderKind(str, Enum):
    IP = "ip"
    MLP = "mlp"
    GNN = "gnn"


MODEL_NAMES = (
    "cgnp-ip", "cgnp-mlp", "cgnp-gnn",
    "supervised", "feattrans", "maml", "reptile", "gpn",
    "ctc", "kcore",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class ScenarioConfig(_Strict):
    scenario: Scenario = Scenario.SGSC
    shots: int = 1
    query_count: int = 30
    pos_per_query: int = 5
    neg_per_query: int = 10
    subgraph_size: int = 200
    n_train: int = 100
    n_valid: int = 50
    n_test: int = 50
    feature_mode: FeatureMode = FeatureMode.ATTRS_STRUCTURAL
    rng_seed: int = 0

    @field_validator("shots")
    @classmethod
    def _shots(cls, v):
        if v not in (1, 5):
            raise ValueError("shots must be 1 or 5")
        return v

    @field_validator("query_count", "pos_per_query", "neg_per_query", "subgraph_size",
                     "n_train", "n_valid", "n_test")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("counts must be positive")
        return v


class CgnpConfig(_Strict):
    gnn_kind: LayerKind = LayerKind.GAT
    num_layers: int = 3
    hidden_dim: int = 128
    dropout: float = 0.2
    combine: CombineMode = CombineMode.AVERAGE
    decoder: DecoderKind = DecoderKind.IP
    mlp_hidden: int = 512
    decoder_layers: int = 2
    attention_dim: int = 128
    threshold: float = 0.5
    epochs: int = 200
    lr: float = 5e-4
    valid_every: int = 10

    @field_validator("threshold")
    @classmethod
    def _threshold(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return v

    @field_validator("dropout")
    @classmethod
    def _dropout(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        return v

    @field_validator("num_layers", "hidden_dim", "mlp_hidden", "decoder_layers", "attention_dim")
    @classmethod
    def _dims(cls, v):
        if v <= 0:
            raise ValueError("dimensions must be positive")
        return v


class BaselineConfig(_Strict):
    gnn_kind: LayerKind = LayerKind.GAT
    num_layers: int = 3
    hidden_dim: int = 128
    dropout: float = 0.2
    lr: float = 5e-4
    inner_lr: float = 5e-4
    outer_lr: float = 1e-3
    inner_steps_train: int = 10
    inner_steps_test: int = 20
    finetune_lr: float = 5e-4
    epochs: int = 200
    gpn_proto_pos: int = 3
    gpn_proto_neg: int = 3
    first_order: bool = True
    threshold: float = 0.5
    valid_every: int = 10

    @field_validator("inner_steps_train", "inner_steps_test", "num_layers", "hidden_dim",
                     "gpn_proto_pos", "gpn_proto_neg")
    @classmethod
    def _steps(cls, v):
        if v <= 0:
            raise ValueError("steps and sizes must be positive")
        return v

    @field_validator("threshold")
    @classmethod
    def _threshold(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return v


class DatasetConfig(_Strict):
    kind: str = "edgelist"  # edgelist | linqs | ego | sbm
    name: str = "dataset"
    edges: Optional[Path] = None
    communities: Optional[Path] = None
    labels: Optional[Path] = None
    attributes: Optional[Path] = None
    content: Optional[Path] = None
    cites: Optional[Path] = None
    ego_dir: Optional[Path] = None
    sbm_blocks: list[int] = Field(default_factory=lambda: [100, 100])
    sbm_p_in: float = 0.3
    sbm_p_out: float = 0.02
    sbm_seed: int = 0

    @field_validator("sbm_blocks", mode="before")
    @classmethod
    def _blocks(cls, v):
        if isinstance(v, str):
            return [int(x) for x in v.replace(" ", "").split(",") if x]
        return v

    @field_validator("sbm_p_in", "sbm_p_out")
    @classmethod
    def _prob(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _kind(self):
        required = {
            "edgelist": ("edges",),
            "linqs": ("content", "cites"),
            "ego": ("ego_dir",),
            "sbm": (),
        }
        if self.kind not in required:
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        missing = [k for k in required[self.kind] if getattr(self, k) is None]
        if missing:
            raise ValueError(f"dataset kind '{self.kind}' needs {missing}")
        return self


class ExperimentConfig(_Strict):
    model: str = "cgnp-ip"
    seed: int = 0
    output_dir: Path = Path(settings.OUTPUT_DIR)
    tasks_dir: Optional[Path] = None
    dataset: DatasetConfig = Field(default_factory=lambda: DatasetConfig(kind="sbm"))
    target_dataset: Optional[DatasetConfig] = None
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    cgnp: CgnpConfig = Field(default_factory=CgnpConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)

    @field_validator("model")
    @classmethod
    def _model(cls, v):
        if v not in MODEL_NAMES:
            raise ValueError(f"unknown model '{v}', expected one of {MODEL_NAMES}")
        return v

    def cgnp_settings(self) -> CgnpConfig:
        """CGNP config with the decoder implied by the model name."""
        if self.model.startswith("cgnp-"):
            return self.cgnp.model_copy(update={"decoder": DecoderKind(self.model.split("-", 1)[1])})
        return self.cgnp


SECTIONS = ("run", "dataset", "target_dataset", "scenario", "cgnp", "baseline")


def load_experiment_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """
    Reads an INI-style config (flat key = value under [section] headers).
    Unknown sections and keys are errors. `overrides` are dotted keys
    ("scenario.shots") applied on top of the file. `seed` is the master
    seed: a seed from the command line or META_CS_SEED replaces
    scenario.rng_seed as well.
    """
    raw: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(path, encoding="utf-8"):
            raise ConfigurationError(f"Config file not found: {path}")
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigurationError(f"Unknown config section [{section}] in {path}")
            values = dict(parser.items(section))
            if section == "run":
                raw.update(values)
            else:
                raw[section] = values

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, field = key.split(".", 1)
            raw.setdefault(section, {})[field] = value
        else:
            raw[key] = value

    seed_given = (overrides or {}).get("seed") is not None
    if settings.META_CS_SEED is not None:
        raw["seed"] = int(settings.META_CS_SEED)
        seed_given = True
    # the master seed also drives task sampling unless the file pins scenario.rng_seed
    scenario = raw.setdefault("scenario", {})
    if isinstance(scenario, dict) and (seed_given or "rng_seed" not in scenario):
        scenario["rng_seed"] = raw.get("seed", 0)

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def config_hash(cfg: BaseModel) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
