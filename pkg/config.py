"""
图后验网络配置文件
"""
from pathlib import Path
from typing import Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError

load_dotenv()


class Settings(BaseSettings):
    """系统配置类，环境变量前缀 GPN_"""

    model_config = SettingsConfigDict(env_prefix="GPN_", env_file=".env", extra="ignore")

    # 模型结构
    hidden_dim: int = 64
    latent_dim: int = 16
    num_layers: int = 2
    n_radial: int = 10
    dropout: float = 0.5
    encoder_bias: bool = True

    # 证据扩散
    teleport: float = 0.1
    iterations: int = 10
    propagation_mode: str = "symmetric"
    budget_scaling: str = "latent"
    prior_value: float = 1.0
    diffusion: str = "evidence"

    # 训练
    entropy_weight: float = 1e-3
    weight_decay: float = 1e-3
    lr: float = 0.01
    warmup_epochs: int = 5
    max_epochs: int = 10000
    patience: int = 50
    eval_every: int = 1

    # 划分与运行
    train_ratio: float = 0.05
    val_ratio: float = 0.15
    test_ratio: float = 0.80
    seed: int = 42
    num_seeds: int = 1
    num_workers: int = 4
    output_dir: str = "./results"
    log_level: str = "INFO"

    # 基线与指标
    gkde_sigma: float = 1.0
    lp_teleport: float = 0.1
    lp_iterations: int = 10
    ece_bins: int = 10

    # 合成数据集
    nodes_per_class: int = 200
    num_classes: int = 4
    feature_dim: int = 16
    homophily: float = 0.8
    avg_degree: float = 6.0
    separation: float = 4.0
    noise_scale: float = 0.05

    @property
    def split_ratios(self):
        return (self.train_ratio, self.val_ratio, self.test_ratio)


def load_settings(config_file: Optional[Union[str, Path]] = None, **overrides) -> Settings:
    """
    读取配置：环境变量 / .env 为基础，--config 文件与显式参数依次覆盖

    Args:
        config_file: key=value 格式的配置文件，键为 Settings 字段名（不区分大小写）
        overrides: 额外覆盖项，值为 None 的忽略

    Returns:
        Settings
    """
    values = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"配置文件不存在: {path}")
        fields = set(Settings.model_fields)
        for key, value in dotenv_values(path).items():
            name = key.strip().lower()
            if name not in fields:
                raise ConfigError(f"未知配置项: {key}")
            if value is None:
                raise ConfigError(f"配置项缺少取值: {key}")
            values[name] = value
    values.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return Settings(**values)
    except ValidationError as exc:
        raise ConfigError(f"配置取值非法: {exc}") from exc


# 全局配置实例
settings = Settings()
