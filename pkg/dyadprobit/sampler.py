"""
Gibbs/Metropolis 抽样器模块
交替抽取潜变量 (y*, u, v, w) 与参数 (B, Sigma_u, Sigma_v, Sigma_w, rho_e)
"""

import logging

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from tqdm import tqdm

from dyadprobit.chain_store import ChainStore
from dyadprobit.errors import NumericalError, ValidationError
from dyadprobit.levels import LevelFactory
from dyadprobit.state import LatentState, ParameterState
from dyadprobit.stochastic import (
    TruncationBox,
    cholesky_lower,
    corr_matrix,
    gaussian_log_likelihood,
    is_positive_definite_corr,
    n_pairs,
    sample_inverse_wishart,
    sample_truncated_mvn,
)

logger = logging.getLogger(__name__)


class ModelDesign:
    """设计矩阵、截断象限与随机效应单元划分"""

    def __init__(self, X, Y, levels):
        self.X = np.asarray(X, dtype=float)
        self.Y = np.asarray(Y, dtype=int)
        self.levels = dict(levels)
        self.box = TruncationBox.from_outcomes(self.Y)
        self.xtx = self.X.T @ self.X

    @classmethod
    def from_dataset(cls, dataset, index, levels):
        """由数据集、夫妻簇索引与激活层次构造"""
        return cls(dataset.X, dataset.Y, LevelFactory.create_levels(levels, dataset, index))

    @property
    def n_rows(self):
        return self.X.shape[0]

    @property
    def R(self):
        return self.Y.shape[1]

    @property
    def P(self):
        return self.X.shape[1]


def _inverse(matrix):
    """对称正定矩阵求逆"""
    chol = cholesky_lower(matrix)
    return cho_solve((chol, True), np.eye(chol.shape[0]))


def linear_predictor(latent, params, design, exclude=None):
    """均值 mu = B x + 各激活层效应（可排除某一层）"""
    mu = design.X @ params.B.T
    for key, level in design.levels.items():
        if key != exclude:
            mu = mu + level.expand(latent.effects[key])
    return mu


def gibbs_sample_y_star(latent, params, design, rng):
    """在象限 A 上从截断多元正态抽取 y*"""
    mu = linear_predictor(latent, params, design)
    return sample_truncated_mvn(mu, params.sigma_e, design.box, rng, start=latent.y_star)


def effect_posterior_precision(count, sigma_e_inv, sigma_level_inv):
    """效应条件后验精度 T Sigma_e^-1 + Sigma^-1"""
    return count * sigma_e_inv + sigma_level_inv


def gibbs_sample_effects(key, latent, params, design, rng):
    """抽取某一层随机效应：N(Sigma_post Sigma_e^-1 sum(d), Sigma_post)"""
    level = design.levels[key]
    resid = latent.y_star - linear_predictor(latent, params, design, exclude=key)
    sums = level.unit_sums(resid)
    sigma_e_inv = _inverse(params.sigma_e)
    sigma_level_inv = _inverse(params.sigma[key])
    rhs = sums @ sigma_e_inv

    draws = np.empty_like(sums)
    z = rng.standard_normal(sums.shape)
    # 按观测次数分组，同组共用一个后验协方差
    for count in np.unique(level.counts):
        units = level.counts == count
        chol = cholesky_lower(effect_posterior_precision(count, sigma_e_inv, sigma_level_inv))
        mean = cho_solve((chol, True), rhs[units].T).T
        draws[units] = mean + solve_triangular(chol.T, z[units].T, lower=False).T
    return draws


def gibbs_sample_u(latent, params, design, rng):
    """抽取个体效应 u"""
    return gibbs_sample_effects("u", latent, params, design, rng)


def gibbs_sample_v(latent, params, design, rng):
    """抽取夫妻固定效应 v"""
    return gibbs_sample_effects("v", latent, params, design, rng)


def gibbs_sample_w(latent, params, design, rng):
    """抽取夫妻时变效应 w"""
    return gibbs_sample_effects("w", latent, params, design, rng)


def gibbs_sample_beta(latent, params, design, rng, prior_variance=100.0):
    """抽取系数 vec(B) ~ N(mu_beta, (I/s0^2 + Sigma_e^-1 (x) X'X)^-1)"""
    R, P = params.B.shape
    target = latent.y_star.copy()
    for key, level in design.levels.items():
        target -= level.expand(latent.effects[key])
    sigma_e_inv = _inverse(params.sigma_e)

    precision = np.eye(R * P) / prior_variance + np.kron(sigma_e_inv, design.xtx)
    rhs = (sigma_e_inv @ target.T @ design.X).ravel()
    chol = cholesky_lower(precision)
    mean = cho_solve((chol, True), rhs)
    draw = mean + solve_triangular(chol.T, rng.standard_normal(R * P), lower=False)
    return draw.reshape(R, P)


def gibbs_sample_sigma(key, latent, rng, prior_scale=1.0, prior_dof=4.0):
    """共轭逆 Wishart 更新：IW(s I + sum e e', dof + 单元数)"""
    effects = latent.effects[key]
    k = effects.shape[1]
    scale = prior_scale * np.eye(k) + effects.T @ effects
    return sample_inverse_wishart(scale, prior_dof + effects.shape[0], rng)


def metropolis_update_rho(rho, gamma, cross_product, n_obs, rng):
    """逐坐标随机游走 Metropolis，先验为 C_rho 上的均匀分布

    返回 (新 rho, 每个坐标是否接受)。
    """
    rho = np.asarray(rho, dtype=float).copy()
    accepted = np.zeros(rho.size, dtype=bool)
    if rho.size == 0:
        return rho, accepted
    current_ll = gaussian_log_likelihood(cross_product, n_obs, corr_matrix(rho))
    for ell in range(rho.size):
        proposal = rho.copy()
        proposal[ell] += gamma[ell] * rng.standard_normal()
        log_u = np.log(rng.random())
        # 提案落在 C_rho 之外时接受概率为 0
        if abs(proposal[ell]) >= 1.0 or not is_positive_definite_corr(proposal, changed=ell):
            continue
        proposal_ll = gaussian_log_likelihood(cross_product, n_obs, corr_matrix(proposal))
        if log_u < proposal_ll - current_ll:
            rho, current_ll = proposal, proposal_ll
            accepted[ell] = True
    return rho, accepted


def metropolis_step_rho(latent, params, design, gamma, rng):
    """以完整数据残差 e = y* - mu 更新 rho_e"""
    resid = latent.y_star - linear_predictor(latent, params, design)
    return metropolis_update_rho(params.rho_e, gamma, resid.T @ resid, design.n_rows, rng)


def adapt_step_size(accept_history, gamma, target=(0.7, 0.8), factor=1.1):
    """按窗口拒绝率调整各坐标步长"""
    accept_history = np.atleast_2d(np.asarray(accept_history, dtype=float))
    gamma = np.asarray(gamma, dtype=float).copy()
    rejection = 1.0 - accept_history.mean(axis=0)
    low, high = target
    gamma[rejection > high] /= factor
    gamma[rejection < low] *= factor
    return gamma


def initialize(spec, design, rng, init=None):
    """初始值：B 加小扰动，Sigma 为单位阵，rho_e=0，效应为 0，y* 从先验截断象限抽取"""
    R, P = design.R, design.P
    if init is None:
        params = ParameterState(
            B=rng.normal(0.0, spec.init_jitter, size=(R, P)),
            sigma={key: np.eye(R) for key in spec.levels},
            rho_e=np.zeros(n_pairs(R)),
        )
    else:
        params = init.copy().validate()
        if params.levels != spec.levels or params.B.shape != (R, P):
            raise ValidationError("初始值与模型设定的维数或层次不一致")

    effects = {key: np.zeros((level.n_units, R)) for key, level in design.levels.items()}
    latent = LatentState(np.zeros((design.n_rows, R)), effects)
    mu = linear_predictor(latent, params, design)
    latent.y_star = sample_truncated_mvn(mu, np.eye(R), design.box, rng)
    return params, latent


def gibbs_sweep(spec, design, params, latent, gamma, rng):
    """一次完整扫描：y* -> u -> v -> w -> B -> Sigma_u -> Sigma_v -> Sigma_w -> rho_e"""
    latent.y_star = gibbs_sample_y_star(latent, params, design, rng)
    for key in spec.levels:
        latent.effects[key] = gibbs_sample_effects(key, latent, params, design, rng)
    params.B = gibbs_sample_beta(latent, params, design, rng, spec.prior_beta_variance)
    for key in spec.levels:
        params.sigma[key] = gibbs_sample_sigma(key, latent, rng, spec.iw_prior_scale, spec.iw_prior_dof)
    params.rho_e, accepted = metropolis_step_rho(latent, params, design, gamma, rng)
    return accepted


def run_chain(spec, design, chain=0, init=None, rng=None, progress=False):
    """运行一条链，返回稀疏化后的燃烧期后抽样"""
    if design.levels.keys() != set(spec.levels):
        raise ValidationError("设计矩阵的随机效应层次与模型设定不一致")
    if (spec.R, spec.P) != (design.R, design.P):
        raise ValidationError(f"模型设定 R={spec.R}, P={spec.P} 与数据 R={design.R}, P={design.P} 不一致")
    if rng is None:
        rng = np.random.default_rng(spec.seed + chain)

    params, latent = initialize(spec, design, rng, init)
    n_coords = n_pairs(spec.R)
    gamma = np.full(n_coords, spec.initial_step)
    window = np.zeros((spec.adapt_window, n_coords), dtype=bool)
    store = ChainStore(spec, chain, names=ParameterState.parameter_names(spec.R, spec.P, spec.levels))
    store.record_gamma(0, gamma)

    logger.info("链 %d 开始: %d 次迭代（燃烧期 %d，稀疏 %d）", chain, spec.n_iterations, spec.burn_in, spec.thin)
    iterations = tqdm(range(1, spec.n_iterations + 1), disable=not progress, desc=f"chain {chain}", leave=False)
    for it in iterations:
        try:
            accepted = gibbs_sweep(spec, design, params, latent, gamma, rng)
        except NumericalError as e:
            raise NumericalError(f"链 {chain} 第 {it} 次迭代: {e}") from e

        burning = it <= spec.burn_in
        store.record_acceptance(accepted, burn_in=burning)
        if burning:
            window[(it - 1) % spec.adapt_window] = accepted
            if it % spec.adapt_window == 0:
                gamma = adapt_step_size(window, gamma, spec.target_rejection, spec.adapt_factor)
                store.record_gamma(it, gamma)
            if it == spec.burn_in:
                logger.debug("链 %d 燃烧期结束，步长冻结为 %s", chain, np.round(gamma, 4))
        elif (it - spec.burn_in) % spec.thin == 0:
            store.append(params)

    store.final_gamma = gamma.copy()
    rates = store.rejection_rates()
    if rates.size:
        low, high = spec.target_rejection
        logger.info("链 %d 完成，冻结后拒绝率 %s", chain, np.round(rates, 3))
        if np.any((rates < low - 0.05) | (rates > high + 0.05)):
            logger.warning("链 %d 的 rho_e 拒绝率偏离目标区间 [%.2f, %.2f]", chain, low, high)
    return store
