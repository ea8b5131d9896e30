"""
多元随机效应 probit 模型估计引擎
支持个体、夫妻固定和夫妻时变随机效应的 Gibbs/Metropolis 抽样与后验分析
"""

__version__ = "1.0.0"
