"""
配置模块
读取分节的 config.ini，叠加 DYADPROBIT_* 环境变量与命令行参数

优先级: 默认值 < 配置文件 < 环境变量 < 命令行
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from dyadprobit.errors import ConfigError, ValidationError
from dyadprobit.levels import parse_levels
from dyadprobit.simulate import SimulationScenario
from dyadprobit.state import ModelSpec, ParameterState
from dyadprobit.stochastic import n_pairs

logger = logging.getLogger(__name__)

ENV_PREFIX = "DYADPROBIT"
COMMANDS = ("simulate", "fit", "diagnose", "summarize", "correlations", "predict-marginals", "tetrachoric")
VERBOSITY = ("DEBUG", "INFO", "WARNING", "ERROR")

# 各节的键 -> (类型, 默认值)；floats 为逗号或空白分隔的数列
SCHEMA = {
    "General": {
        "seed": (int, 20240101),
        "threads": (int, 2),
        "verbosity": (str, "INFO"),
    },
    "fit": {
        "levels": (str, "two"),
        "n_iterations": (int, 5000),
        "burn_in": (int, 1000),
        "thin": (int, 1),
        "n_chains": (int, 2),
        "prior_beta_variance": (float, 100.0),
        "iw_prior_scale": (float, 1.0),
        "iw_prior_dof": (float, 4.0),
        "target_rejection_low": (float, 0.7),
        "target_rejection_high": (float, 0.8),
        "adapt_window": (int, 50),
        "adapt_factor": (float, 1.1),
        "initial_step": (float, 0.1),
        "init_jitter": (float, 0.1),
    },
    "simulate": {
        "levels": (str, "two"),
        "n_units": (int, 500),
        "n_waves": (int, 4),
        "n_outcomes": (int, 3),
        "n_covariates": (int, 3),
        "initial_partner_prob": (float, 0.6),
        "form_prob": (float, 0.0),
        "dissolve_prob": (float, 0.0),
        "beta": ("floats", None),
        "sigma_u": ("floats", None),
        "sigma_v": ("floats", None),
        "sigma_w": ("floats", None),
        "rho_e": ("floats", None),
        "design_csv": (str, None),
    },
    "diagnose": {
        "psrf_threshold": (float, 1.1),
    },
}


def _convert(kind, raw, key_path):
    """按类型转换字符串取值"""
    if raw is None or isinstance(raw, (list, tuple)) and kind == "floats":
        return None if raw is None else [float(x) for x in raw]
    text = str(raw).strip()
    try:
        if kind == "floats":
            return [float(x) for x in text.replace(",", " ").split()] if text else None
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        expected = {int: "整数", float: "实数", "floats": "实数列表"}[kind]
        raise ConfigError(key_path, f"应为{expected}，实际为 {raw!r}")
    return text or None


def _section_name(name):
    """节名匹配（忽略大小写）"""
    for section in SCHEMA:
        if section.lower() == name.lower():
            return section
    return None


def default_settings():
    return {section: {key: default for key, (_, default) in keys.items()} for section, keys in SCHEMA.items()}


def _apply(settings, section, key, raw, source):
    section_name = _section_name(section)
    if section_name is None:
        raise ConfigError(section, f"未知的配置节（来源: {source}）")
    if key not in SCHEMA[section_name]:
        raise ConfigError(f"{section_name}.{key}", f"未知的配置项（来源: {source}）")
    kind = SCHEMA[section_name][key][0]
    settings[section_name][key] = _convert(kind, raw, f"{section_name}.{key}")


def read_config_file(settings, path):
    """读取 ini 文件，未知节或键报错"""
    if not os.path.exists(path):
        raise ConfigError("config", f"配置文件不存在: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError("config", f"无法解析 {path}: {e}")
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            _apply(settings, section, key, value, path)


def read_environment(settings, environ=None):
    """DYADPROBIT_<SECTION>_<KEY> 环境变量覆盖"""
    if environ is None:
        load_dotenv()
        environ = os.environ
    for section, keys in SCHEMA.items():
        for key in keys:
            name = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
            if name in environ:
                _apply(settings, section, key, environ[name], name)


def _check(settings):
    """解析阶段即检查的不变量"""
    general, fit, sim = settings["General"], settings["fit"], settings["simulate"]
    if general["verbosity"] is None or general["verbosity"].upper() not in VERBOSITY:
        raise ConfigError("General.verbosity", f"应为 {'/'.join(VERBOSITY)} 之一")
    general["verbosity"] = general["verbosity"].upper()
    if general["threads"] < 1:
        raise ConfigError("General.threads", "必须 >= 1")
    for section in ("fit", "simulate"):
        try:
            parse_levels(settings[section]["levels"] or "")
        except ValidationError as e:
            raise ConfigError(f"{section}.levels", str(e))
    if fit["n_iterations"] < 1:
        raise ConfigError("fit.n_iterations", "必须为正")
    if not 0 <= fit["burn_in"] < fit["n_iterations"]:
        raise ConfigError("fit.burn_in", f"burn_in={fit['burn_in']} 必须小于 n_iterations={fit['n_iterations']}")
    if fit["thin"] < 1:
        raise ConfigError("fit.thin", "必须 >= 1")
    if fit["n_chains"] < 1:
        raise ConfigError("fit.n_chains", "必须 >= 1")
    if not 0 < fit["target_rejection_low"] < fit["target_rejection_high"] < 1:
        raise ConfigError("fit.target_rejection_low", "目标拒绝率区间必须满足 0 < low < high < 1")
    for key in ("prior_beta_variance", "iw_prior_scale", "initial_step"):
        if fit[key] <= 0:
            raise ConfigError(f"fit.{key}", "必须为正")
    if fit["adapt_factor"] <= 1:
        raise ConfigError("fit.adapt_factor", "必须大于 1")
    for key in ("initial_partner_prob", "form_prob", "dissolve_prob"):
        if not 0.0 <= sim[key] <= 1.0:
            raise ConfigError(f"simulate.{key}", "概率必须在 [0, 1] 内")
    for key in ("n_units", "n_waves", "n_outcomes", "n_covariates"):
        if sim[key] < 1:
            raise ConfigError(f"simulate.{key}", "必须为正")
    if settings["diagnose"]["psrf_threshold"] <= 1:
        raise ConfigError("diagnose.psrf_threshold", "必须大于 1")


@dataclass
class RunConfig:
    """一次命令运行的完整配置"""

    command: str
    settings: dict
    config_path: Optional[str] = None
    data_path: Optional[str] = None
    out_dir: Optional[str] = None
    chains_dir: Optional[str] = None
    outcomes: Optional[list] = None
    covariate: Optional[str] = None
    values: list = field(default_factory=list)
    model: Optional[str] = None

    @property
    def seed(self):
        return self.settings["General"]["seed"]

    @property
    def threads(self):
        return self.settings["General"]["threads"]

    @property
    def verbosity(self):
        return self.settings["General"]["verbosity"]

    @property
    def psrf_threshold(self):
        return self.settings["diagnose"]["psrf_threshold"]

    def model_spec(self, R, P):
        """由 [fit] 节与数据维数构造 ModelSpec"""
        fit = self.settings["fit"]
        try:
            return ModelSpec(
                R=R,
                P=P,
                levels=fit["levels"],
                prior_beta_variance=fit["prior_beta_variance"],
                iw_prior_scale=fit["iw_prior_scale"],
                iw_prior_dof=fit["iw_prior_dof"],
                n_iterations=fit["n_iterations"],
                burn_in=fit["burn_in"],
                thin=fit["thin"],
                n_chains=fit["n_chains"],
                target_rejection=(fit["target_rejection_low"], fit["target_rejection_high"]),
                adapt_window=fit["adapt_window"],
                adapt_factor=fit["adapt_factor"],
                initial_step=fit["initial_step"],
                init_jitter=fit["init_jitter"],
                seed=self.seed,
            )
        except ValidationError as e:
            raise ConfigError(f"fit.{e.key}" if e.key else "fit", str(e))

    def scenario(self):
        """由 [simulate] 节构造模拟情景"""
        sim = self.settings["simulate"]
        R, P = sim["n_outcomes"], sim["n_covariates"]
        B = _shaped("simulate.beta", sim["beta"], (R, P), np.zeros((R, P)))
        sigma = {}
        for key in parse_levels(sim["levels"]):
            sigma[key] = _covariance_setting(f"simulate.sigma_{key}", sim[f"sigma_{key}"], R)
        rho_e = _shaped("simulate.rho_e", sim["rho_e"], (n_pairs(R),), np.zeros(n_pairs(R)))
        scenario = SimulationScenario(
            truth=ParameterState(B, sigma, rho_e),
            n_units=sim["n_units"],
            n_waves=sim["n_waves"],
            initial_partner_prob=sim["initial_partner_prob"],
            form_prob=sim["form_prob"],
            dissolve_prob=sim["dissolve_prob"],
            design_csv=sim["design_csv"],
            seed=self.seed,
        )
        try:
            return scenario.validate()
        except ValidationError as e:
            raise ConfigError(f"simulate.{e.key}" if e.key else "simulate", str(e))


def _shaped(key_path, values, shape, default):
    if values is None:
        return default
    size = int(np.prod(shape))
    if len(values) != size:
        raise ConfigError(key_path, f"需要 {size} 个数，实际为 {len(values)}")
    return np.asarray(values, dtype=float).reshape(shape)


def _covariance_setting(key_path, values, R):
    """1 个数为 c*I，R 个数为对角阵，R*R 个数为完整矩阵（按行）"""
    if values is None:
        return np.eye(R)
    if len(values) == 1:
        return values[0] * np.eye(R)
    if len(values) == R:
        return np.diag(values)
    return _shaped(key_path, values, (R, R), None)


def parse_config(command, path=None, overrides=None, environ=None, **paths):
    """合并默认值、配置文件、环境变量与命令行覆盖，返回 RunConfig

    overrides 为 {"节.键": 值}，值为 None 的项视为未给出。
    """
    if command not in COMMANDS:
        raise ConfigError("command", f"未知命令: {command}")
    settings = default_settings()
    if path is not None:
        read_config_file(settings, path)
    read_environment(settings, environ)
    for key_path, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = key_path.partition(".")
        _apply(settings, section, key, value, "命令行")
    _check(settings)
    logger.debug("配置: %s", settings)
    return RunConfig(command=command, settings=settings, config_path=path, **paths)
