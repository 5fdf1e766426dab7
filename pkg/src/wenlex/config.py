"""Run configuration: dataclasses with TOML round-trip and layered precedence
(CLI flag > config file > WENLEX_SEED-derived > built-in default)."""

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib


@dataclass
class DataConfig:
    n_train: int = 384
    n_val: int = 64
    n_test: int = 128
    seed: int = 11


@dataclass
class DomainConfig:
    noise_sigma: float = 0.05
    tau_read: float = 0.3  # positive read threshold; uncertain uses tau/2


@dataclass
class CodecConfig:
    dim: int = 64
    seed: int = 20240


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 16
    base_lr: float = 5e-3
    warmup_steps: int = 10
    weight_decay: float = 0.01
    seed: int = 7


@dataclass
class TrainConfig:
    mode: str = "post_hoc"        # post_hoc | in_model
    plausibility: str = "mmd"     # mmd | adversarial
    recons: bool = False          # loss toggles; defaults give the MMD-only row
    nle_clf: bool = False
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 5e-4
    warmup_steps: int = 100       # rescaled for desk-sized runs
    weight_decay: float = 0.01
    critic_ratio: int = 5
    copy_period: int = 1000
    db_size: int = 5
    db_seed: int = 24
    tap: str = "block2"
    gp_lambda: float = 10.0
    mmd_bandwidth: str = "median_heuristic"
    mmd_sigma: float = 1.0
    soft_targets: bool = False    # soft-probability CE targets (experimental)
    grammar: str = "medical"
    seed: int = 14

    def validate(self):
        if self.mode not in ("post_hoc", "in_model"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.plausibility not in ("mmd", "adversarial"):
            raise ValueError(f"unknown plausibility loss '{self.plausibility}'")
        if self.tap not in ("block1", "block2", "block3", "gap", "heads"):
            raise ValueError(f"unknown reconstruction tap '{self.tap}'")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.train.validate()
        return self


_SECTIONS = ("data", "domain", "codec", "pretrain", "train")
# offsets applied to a global seed when section seeds are not pinned explicitly
_SEED_OFFSETS = {"data": 1, "codec": 2, "pretrain": 3, "train": 4, "db": 5}


def load_config(path=None, overrides=None, env=None):
    """Resolve the layered configuration.

    ``overrides`` maps "section.key" to values (CLI flags). A WENLEX_SEED
    environment variable reseeds every section seed not explicitly set by
    file or flag.
    """
    env = os.environ if env is None else env
    file_data = {}
    if path is not None:
        with open(path, "rb") as fh:
            file_data = tomllib.load(fh)
        unknown = set(file_data) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
    cfg = Config()
    explicit_seeds = set()
    for section in _SECTIONS:
        section_cfg = getattr(cfg, section)
        incoming = file_data.get(section, {})
        valid = {f.name for f in fields(section_cfg)}
        unknown = set(incoming) - valid
        if unknown:
            raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
        for key, value in incoming.items():
            setattr(section_cfg, key, value)
            if key.endswith("seed"):
                explicit_seeds.add(f"{section}.{key}")
    for key, value in (overrides or {}).items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ValueError(f"unknown override section '{section}'")
        section_cfg = getattr(cfg, section)
        if not hasattr(section_cfg, name):
            raise ValueError(f"unknown override key '{key}'")
        setattr(section_cfg, name, value)
        if name.endswith("seed"):
            explicit_seeds.add(key)
    env_seed = env.get("WENLEX_SEED")
    if env_seed is not None:
        base = int(env_seed)
        if "data.seed" not in explicit_seeds:
            cfg.data.seed = base + _SEED_OFFSETS["data"]
        if "codec.seed" not in explicit_seeds:
            cfg.codec.seed = base + _SEED_OFFSETS["codec"]
        if "pretrain.seed" not in explicit_seeds:
            cfg.pretrain.seed = base + _SEED_OFFSETS["pretrain"]
        if "train.seed" not in explicit_seeds:
            cfg.train.seed = base + _SEED_OFFSETS["train"]
        if "train.db_seed" not in explicit_seeds:
            cfg.train.db_seed = base + _SEED_OFFSETS["db"]
    return cfg.validate()


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_toml(cfg):
    """Canonical TOML snapshot; identical configs produce identical bytes."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        section_cfg = getattr(cfg, section)
        for f in fields(section_cfg):
            lines.append(f"{f.name} = {_toml_value(getattr(section_cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg):
    return hashlib.sha256(dump_toml(cfg).encode()).hexdigest()


def as_dict(cfg):
    return dataclasses.asdict(cfg)
